//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub eps: f64,
    /// Coordinates sampled per input tensor (all of them when smaller).
    pub coords_per_input: usize,
    pub seed: u64,
    /// Extra differences tried for a coordinate whose error at `eps`
    /// exceeds [`REFINE_BELOW`]; the smallest error is kept.
    pub fallback: &'static [Stencil],
}

/// A finite-difference rule and its step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, truncation O(h²).
    Central(f64),
    /// `(f(x−2h) − 8f(x−h) + 8f(x+h) − f(x+2h)) / 12h`, truncation O(h⁴).
    FivePoint(f64),
}

/// Coordinates already this accurate are not re-evaluated at other steps.
pub const REFINE_BELOW: f64 = 1e-6;

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            coords_per_input: 64,
            seed: 0,
            fallback: &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
}

impl GradCheckConfig {
    /// Difference ladder for deep composites. Roundoff (≈ ε_mach·|f| / h)
    /// swamps small gradient entries at small steps, while large steps may
    /// straddle a max/pool switch close to the evaluation point; the
    /// five-point rule keeps large steps accurate where `f` is smooth.
    pub fn composite(seed: u64) -> Self {
        GradCheckConfig {
            eps: 1e-3,
            seed,
            fallback: &[
                Stencil::FivePoint(1e-2),
                Stencil::FivePoint(1e-3),
                Stencil::Central(1e-4),
                Stencil::Central(1e-5),
                Stencil::Central(1e-6),
            ],
            ..GradCheckConfig::default()
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences `(f(x+εe) − f(x−εe)) / 2ε`.
///
/// `f` receives one var per entry of `inputs`, recorded in order as the first
/// vars of a fresh tape.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], track: bool| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::shape("grad_check function must return a scalar"));
        }
        Ok((tape, out, vars))
    };

    let (mut tape, out, vars) = eval(inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()).collect();

    let mut rng = Rng64::new(cfg.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst: None,
        coords_checked: 0,
    };
    for (ii, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= cfg.coords_per_input {
            (0..n).collect()
        } else {
            (0..cfg.coords_per_input).map(|_| rng.below(n as u64) as usize).collect()
        };
        for ci in coords {
            let orig = input.data()[ci];
            let a = analytic[ii][ci];
            let mut at = |delta: f64| -> Result<f64> {
                work[ii].data_mut()[ci] = orig + delta;
                let (t, o, _) = eval(&work, false)?;
                work[ii].data_mut()[ci] = orig;
                let v = t.data(o)[0];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("perturbed evaluation at input {ii}[{ci}]")));
                }
                Ok(v)
            };
            let mut diff = |s: Stencil| -> Result<f64> {
                Ok(match s {
                    Stencil::Central(h) => (at(h)? - at(-h)?) / (2.0 * h),
                    Stencil::FivePoint(h) => (at(-2.0 * h)? - 8.0 * at(-h)? + 8.0 * at(h)? - at(2.0 * h)?) / (12.0 * h),
                })
            };
            let mut numeric = diff(Stencil::Central(cfg.eps))?;
            let mut err = relative_error(a, numeric);
            for &s in cfg.fallback {
                if err <= REFINE_BELOW {
                    break;
                }
                let n = diff(s)?;
                let e = relative_error(a, n);
                if e < err {
                    (numeric, err) = (n, e);
                }
            }
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((ii, ci, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Tensor of i.i.d. uniform values in `[-scale, scale)`.
pub fn random_tensor<T: Scalar>(rng: &mut Rng64, extents: &[usize], scale: f64) -> Tensor<T> {
    Tensor::from_fn(extents, |_| T::of(rng.range(-scale, scale)))
}

/// Gradient check of a tensor-valued op, scalarized by a fixed random weighting.
pub fn check_op<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    try_check_op(inputs, seed, f).expect("gradient check evaluation failed")
}

pub fn try_check_op<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    try_check_op_with(inputs, &cfg, f)
}

/// [`try_check_op`] with an explicit configuration.
pub fn try_check_op_with<F>(inputs: &[Tensor<f64>], cfg: &GradCheckConfig, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let seed = cfg.seed;
    let weights = std::cell::RefCell::new(None::<Tensor<f64>>);
    grad_check(
        |tape, vars| {
            let y = f(tape, vars)?;
            let mut w = weights.borrow_mut();
            let w = w.get_or_insert_with(|| {
                let mut r = Rng64::new(seed ^ 0x5eed);
                random_tensor(&mut r, tape.extents(y), 1.0)
            });
            tape.weighted_sum(y, w)
        },
        inputs,
        cfg,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.coords_checked, 2);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-12);
    }
}
