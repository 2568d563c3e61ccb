//! Finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::model::{ModelError, TinyLM};
use super::tape::{Matrix, Tape, Var};

/// Below this magnitude on both sides, absolute error is reported instead.
const ABS_FALLBACK: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("loss is not finite: {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// (parameter index, flat offset) of the worst coordinate.
    pub worst: (usize, usize),
}

/// Relative error with an absolute fallback for near-zero gradients.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < ABS_FALLBACK {
        diff
    } else {
        diff / scale
    }
}

/// A loss built on a tape from a model's parameters.
pub trait LossFn: for<'a> Fn(&'a TinyLM, &mut Tape<'a>) -> Result<Var, ModelError> {}
impl<F> LossFn for F where F: for<'a> Fn(&'a TinyLM, &mut Tape<'a>) -> Result<Var, ModelError> {}

fn eval(model: &TinyLM, loss_fn: &impl LossFn) -> Result<f64, GradCheckError> {
    let mut tape = Tape::new(&model.params);
    let out = loss_fn(model, &mut tape)?;
    let v = tape.scalar(out);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(GradCheckError::NonFinite(v))
    }
}

/// Reverse-mode gradients of the whole loss.
pub fn gradients(model: &TinyLM, loss_fn: &impl LossFn) -> Result<(f64, Vec<Matrix>), GradCheckError> {
    let mut grads: Vec<Matrix> = model.params.iter().map(|p| Matrix::zeros(p.raw_dim())).collect();
    let mut tape = Tape::new(&model.params);
    let out = loss_fn(model, &mut tape)?;
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(GradCheckError::NonFinite(v));
    }
    tape.backward(out, 1.0, &mut grads);
    Ok((v, grads))
}

/// Compares reverse-mode gradients with central differences (step `eps`)
/// on `n_coords` parameter coordinates drawn uniformly with `seed`.
pub fn grad_check(
    model: &TinyLM,
    loss_fn: impl LossFn,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport, GradCheckError> {
    let (_, grads) = gradients(model, &loss_fn)?;
    let sizes: Vec<usize> = model.params.iter().map(Matrix::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, total, n_coords.min(total)).into_vec();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: (0, 0),
    };
    for flat in picks {
        let (mut p, mut off) = (0, flat);
        while off >= sizes[p] {
            off -= sizes[p];
            p += 1;
        }
        let cols = probe.params[p].ncols();
        let at = [off / cols, off % cols];
        let orig = probe.params[p][at];
        let mut f = |h: f64| {
            probe.params[p][at] = orig + h;
            eval(&probe, &loss_fn)
        };
        // five-point central stencil, truncation error O(eps^4)
        let numeric = (-f(2.0 * eps)? + 8.0 * f(eps)? - 8.0 * f(-eps)? + f(-2.0 * eps)?) / (12.0 * eps);
        probe.params[p][at] = orig;
        let err = rel_error(grads[p][at], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (p, off);
        }
        report.coords_checked += 1;
    }
    Ok(report)
}
