//! Tape-based reverse-mode differentiation.
//!
//! Every value produced during a forward pass lives on the [`Tape`] and is
//! addressed by a [`Var`]. Operations whose inputs require gradients record a
//! backward closure; [`Tape::backward`] replays them in reverse recording order.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>], &mut GradSink<'_, T>)>;

/// Accumulates gradients flowing into the inputs of one node.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    values: &'a [Tensor<T>],
}

impl<T: Scalar> GradSink<'_, T> {
    /// Mutable gradient buffer for `v`, allocated as zeros on first use.
    /// Returns `None` when `v` does not require a gradient.
    pub fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        let value = &self.values[v.0];
        if !value.requires_grad {
            return None;
        }
        let slot = &mut self.grads[v.0];
        Some(slot.get_or_insert_with(|| vec![T::ZERO; value.numel()]))
    }

    pub fn wants(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    /// Adds `g` elementwise into the gradient of `v`.
    pub fn add(&mut self, v: Var, g: &[T]) {
        if let Some(buf) = self.buf(v) {
            debug_assert_eq!(buf.len(), g.len());
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
    }
}

/// Ordered record of a forward pass.
pub struct Tape<T: Scalar = f32> {
    values: Vec<Tensor<T>>,
    backward: Vec<Option<BackwardFn<T>>>,
    num_params: usize,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backward: Vec::new(),
            num_params: 0,
        }
    }

    /// Tape whose first `store.len()` vars are the store's parameters, so that
    /// `ParamId(i)` and `Var(i)` coincide.
    pub fn with_params(store: &ParamStore<T>, requires_grad: bool) -> Self {
        let mut tape = Tape::new();
        for t in store.tensors() {
            tape.leaf(t.clone(), requires_grad);
        }
        tape.num_params = store.len();
        tape
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an input value.
    pub fn leaf(&mut self, mut t: Tensor<T>, requires_grad: bool) -> Var {
        t.requires_grad = requires_grad;
        t.grad = None;
        self.values.push(t);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn extents(&self, v: Var) -> &[usize] {
        self.values[v.0].extents()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.values[v.0].requires_grad)
    }

    /// Gradient buffer of `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.values[v.0].grad.as_deref()
    }

    /// Records the output of an operation over `inputs`.
    ///
    /// The backward closure receives the output gradient, all tape values,
    /// and a sink for input gradients. It is dropped when no input requires
    /// gradients.
    pub(crate) fn record(&mut self, out: Tensor<T>, inputs: &[Var], backward: BackwardFn<T>) -> Var {
        debug_assert!(
            out.all_finite(),
            "non-finite output recorded at node {} (extents {:?})",
            self.values.len(),
            out.extents()
        );
        let requires = self.any_requires_grad(inputs);
        let idx = self.values.len();
        self.leaf(out, requires);
        if requires {
            self.backward[idx] = Some(backward);
        }
        Var(idx)
    }

    /// Reverse traversal from a scalar `loss`. Populates the `grad` buffer of
    /// every value that requires a gradient (zeros where no path exists).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.values[loss.0];
        if lv.numel() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got extents {:?}", lv.extents())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite(format!("loss value {:?} at node {}", lv.data()[0], loss.0)));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        if lv.requires_grad {
            grads[loss.0] = Some(vec![T::ONE]);
        }
        for i in (0..=loss.0).rev() {
            let Some(back) = self.backward[i].as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let (before, _) = grads.split_at_mut(i);
            let mut sink = GradSink {
                grads: before,
                values: &self.values,
            };
            back(&g, &self.values, &mut sink);
            grads[i] = Some(g);
        }
        for (value, g) in self.values.iter_mut().zip(grads) {
            if value.requires_grad {
                let n = value.numel();
                value.grad = Some(g.unwrap_or_else(|| vec![T::ZERO; n]));
            }
        }
        Ok(())
    }

    /// Gradients of the parameter vars, in [`ParamStore`] order.
    pub fn param_grads(&self) -> Vec<Option<&[T]>> {
        (0..self.num_params).map(|i| self.grad(Var(i))).collect()
    }
}
