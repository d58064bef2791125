//! Central finite-difference verification of tape gradients.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinates probed.
    pub coords: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::no_grad();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(AutodiffError::NotScalar(value.shape().to_vec()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(AutodiffError::NonFinite(v));
    }
    Ok(v)
}

/// Compares the tape gradient of a scalar function of several tensors with
/// central differences of width `2 * step` in every coordinate.
pub fn check_gradients<F>(f: F, points: &[Tensor], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "gradcheck",
            detail: format!("step must be positive, got {step}"),
        });
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.is_scalar() && !v.item().is_finite() {
        return Err(AutodiffError::NonFinite(v.item()));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| grads.get_or_zeros(v, p))
        .collect();

    let mut probe = points.to_vec();
    let mut worst = 0.0_f64;
    let mut coords = 0;
    for (which, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = probe[which].data()[j];
            probe[which].data_mut()[j] = orig + step;
            let up = eval(&f, &probe)?;
            probe[which].data_mut()[j] = orig - step;
            let down = eval(&f, &probe)?;
            probe[which].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            coords += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        coords,
    })
}

/// Single-input form of [`check_gradients`]; returns the maximum relative
/// error.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(|t, v| f(t, v[0]), std::slice::from_ref(point), step).map(|r| r.max_rel_error)
}
