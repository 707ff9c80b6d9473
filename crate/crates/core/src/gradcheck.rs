//! Central-difference gradient checking.
//!
//! The checker builds one tape to obtain analytic gradients and then
//! re-evaluates the function from scratch on fresh tapes with each coordinate
//! nudged by `±h`. Relative error per coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

/// Options for [`grad_check_all`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Checks the gradient of `f` with respect to one tensor.
pub fn grad_check<F>(f: F, theta: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let opts = CheckOptions {
        step: h,
        ..CheckOptions::default()
    };
    grad_check_all(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), &opts)
}

/// Checks the gradient of `f` with respect to every tensor in `thetas`.
/// Returns the worst relative error seen.
pub fn grad_check_all<F>(f: F, thetas: &[Tensor], opts: &CheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("grad_check: function returned shape {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("grad_check: function value {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = thetas.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().zip(thetas).map(|(&v, t)| grads.get_or_zeros(v, t)).collect();
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("grad_check: non-finite analytic gradient".into()));
    }

    let mut rng = SeedRng::new(opts.seed).split("grad_check");
    let mut work: Vec<Tensor> = thetas.to_vec();
    let mut worst: f64 = 0.0;
    for (ti, theta) in thetas.iter().enumerate() {
        let mut coords: Vec<usize> = (0..theta.numel()).collect();
        if let Some(limit) = opts.max_coords {
            if limit < coords.len() {
                rng.shuffle(&mut coords);
                coords.truncate(limit);
            }
        }
        for &c in &coords {
            let orig = theta.data()[c];
            work[ti].data_mut()[c] = orig + opts.step;
            let plus = eval(&work)?;
            work[ti].data_mut()[c] = orig - opts.step;
            let minus = eval(&work)?;
            work[ti].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti].data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let err = grad_check(|t, v| Ok(t.sum(v)), &x, DEFAULT_STEP).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = Tensor::zeros(&[5]);
        let err = grad_check(
            |t, v| {
                let s = t.sigmoid(v);
                Ok(t.sum(s))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let x = Tensor::vector(vec![1.0]);
        let r = grad_check(
            |t, v| {
                let big = t.scale(v, f64::INFINITY);
                Ok(t.sum(big))
            },
            &x,
            DEFAULT_STEP,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
