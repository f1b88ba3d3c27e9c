//! Named parameter storage. Layer records refer to parameters by [`ParamId`];
//! a tape built with [`Tape::with_params`](crate::tape::Tape::with_params)
//! exposes parameter `i` as `Var(i)`.

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn var(self) -> Var {
        Var(self.0)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Registers a parameter; `decay` marks it for weight decay.
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(t);
        self.decay.push(decay);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
        }
    }
}

/// Deterministic parameter initializer.
pub struct ParamInit {
    pub store: ParamStore<f32>,
    rng: Rng64,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            store: ParamStore::new(),
            rng: Rng64::new(seed),
        }
    }

    /// Kaiming-uniform (fan-in) kernel: `U(−√(6/fan_in), √(6/fan_in))` with
    /// `fan_in` the product of all extents after the first.
    pub fn kernel(&mut self, name: impl Into<String>, extents: &[usize]) -> Result<ParamId> {
        self.kernel_with_gain(name, extents, 1.0)
    }

    /// [`ParamInit::kernel`] with the bound multiplied by `gain`.
    pub fn kernel_with_gain(&mut self, name: impl Into<String>, extents: &[usize], gain: f64) -> Result<ParamId> {
        let fan_in: usize = extents[1..].iter().product();
        let bound = gain * (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let t = Tensor::from_fn(extents, |_| rng.range(-bound, bound) as f32);
        self.store.add(name, t, true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, extents: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(extents), false)
    }

    pub fn ones(&mut self, name: impl Into<String>, extents: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::full(extents, 1.0), false)
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut init = ParamInit::new(0);
        init.zeros("a", &[2]).unwrap();
        assert!(init.zeros("a", &[3]).is_err());
    }

    #[test]
    fn kernel_init_is_deterministic_and_bounded() {
        let mut a = ParamInit::new(5);
        let mut b = ParamInit::new(5);
        let ia = a.kernel("k", &[4, 3, 3, 3]).unwrap();
        let ib = b.kernel("k", &[4, 3, 3, 3]).unwrap();
        assert_eq!(a.store.get(ia), b.store.get(ib));
        let bound = (6.0f32 / 27.0).sqrt();
        assert!(a.store.get(ia).data().iter().all(|v| v.abs() <= bound));
        assert!(a.store.decays(ia));
    }
}
