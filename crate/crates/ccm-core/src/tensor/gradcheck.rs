//! Central finite-difference verification of reverse-mode gradients.
//!
//! Always runs in f64; the relative-error bounds the test suites assert are
//! not reachable in f32.

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`,
/// with the numeric side from central differences of step `step`.
///
/// `f` must produce a scalar from its tensor argument, registered as a
/// requires-grad leaf on the supplied graph.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    grad_check_coords(f, x, step, None)
}

/// Like [`grad_check`] but restricted to a coordinate subset, for inputs too
/// large to sweep exhaustively.
pub fn grad_check_coords<F>(
    f: F,
    x: &Tensor<f64>,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check: step must be positive, got {step}"
        )));
    }
    let x = x.clone().with_requires_grad(true);

    let mut g = Graph::new();
    let leaf = g.leaf(&x);
    let loss = f(&mut g, &leaf)?;
    if loss.numel() != 1 {
        return Err(Error::InvalidArgument(format!(
            "grad_check: fn must return a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let analytic = g.backward(&loss)?.get(&leaf)?.to_vec();

    let eval = |values: Vec<f64>| -> Result<f64> {
        let probe =
            Tensor::from_vec(x.shape().to_vec(), values)?.with_requires_grad(false);
        let mut g = Graph::new();
        let leaf = g.leaf(&probe);
        Ok(f(&mut g, &leaf)?.item()?)
    };

    let base = x.to_vec();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };

    let mut max_rel = 0.0f64;
    for &i in coords {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
