//! Central finite-difference oracle for tape gradients.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-6;
/// Step for whole-model checks with [`Stencil::Central6`].
pub const MODEL_STEP: f64 = 1e-2;
const DENOMINATOR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub worst_tape: f64,
    pub worst_numeric: f64,
    pub coordinates: usize,
}

/// Relative error with the denominator clamped from below.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOMINATOR_FLOOR)
}

/// Symmetric difference formula used by [`finite_diff_check_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(p+h) − f(p−h)) / 2h`, error O(h²).
    Central2,
    /// Five-point formula, error O(h⁴).
    Central4,
    /// Seven-point formula, error O(h⁶).
    Central6,
}

impl Stencil {
    /// Weights `c_k` in `f' ≈ Σ_k c_k (f(p+kh) − f(p−kh)) / h`.
    fn weights(self) -> &'static [f64] {
        match self {
            Stencil::Central2 => &[0.5],
            Stencil::Central4 => &[2.0 / 3.0, -1.0 / 12.0],
            Stencil::Central6 => &[0.75, -0.15, 1.0 / 60.0],
        }
    }
}

/// Compares the tape gradient of `f` against `(f(p+h) − f(p−h)) / 2h` for
/// every coordinate of every parameter.
///
/// `f` evaluates the scalar objective and its tape gradient for a given
/// parameter set. It must be deterministic.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    finite_diff_check_with(params, h, Stencil::Central2, f)
}

/// [`finite_diff_check`] with a higher-order stencil. Wider stencils allow a
/// larger `h`, which shrinks the rounding noise of the difference quotient.
pub fn finite_diff_check_with<F>(params: &ParamStore, h: f64, stencil: Stencil, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    check_impl(params, h, stencil, |p| f(p).map(|(v, g)| (v, g, 0)))
}

/// Finite differences for piecewise-smooth objectives.
///
/// `f` also returns a label of the smooth piece it evaluated in (for
/// example [`Tape::relu_pattern`](crate::tape::Tape::relu_pattern)). When a
/// stencil point lands in a different piece than the base point, the step
/// for that coordinate is divided by ten until every point agrees, down to
/// `h · 1e-4`.
pub fn finite_diff_check_piecewise<F>(params: &ParamStore, h: f64, stencil: Stencil, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients, u64)>,
{
    check_impl(params, h, stencil, f)
}

fn check_impl<F>(params: &ParamStore, h: f64, stencil: Stencil, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients, u64)>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let (base, tape_grads, piece) = f(params)?;
    let (again, _, _) = f(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Oracle(format!(
            "objective is not deterministic: {base} then {again}"
        )));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_tape: 0.0,
        worst_numeric: 0.0,
        coordinates: 0,
    };
    for id in params.ids() {
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            let mut step = h;
            let numeric = loop {
                let mut acc = 0.0;
                let mut same_piece = true;
                for (k, &c) in stencil.weights().iter().enumerate() {
                    let offset = (k + 1) as f64 * step;
                    work.get_mut(id).data_mut()[i] = orig + offset;
                    let (plus, _, p_plus) = f(&work)?;
                    work.get_mut(id).data_mut()[i] = orig - offset;
                    let (minus, _, p_minus) = f(&work)?;
                    same_piece &= p_plus == piece && p_minus == piece;
                    acc += c * (plus - minus);
                }
                if same_piece || step <= h * 1e-4 {
                    break acc / step;
                }
                step /= 10.0;
            };
            work.get_mut(id).data_mut()[i] = orig;

            let analytic = tape_grads.get(id)[i];
            let err = relative_error(analytic, numeric);
            if !err.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient comparison at {}[{i}]",
                    params.name(id)
                )));
            }
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
                report.worst_tape = analytic;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
