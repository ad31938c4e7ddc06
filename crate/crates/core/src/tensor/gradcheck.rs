use super::{Real, Tape, Tensor, Var};
use crate::error::{invalid, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: Real,
    pub max_rel_err: Real,
    pub worst_index: usize,
    pub tolerance: Real,
    /// Flat indices whose relative error exceeded the tolerance.
    pub failures: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Check every coordinate of `x`. See [`grad_check_at`].
pub fn grad_check<F>(f: F, x: &Tensor, step: Real, tolerance: Real) -> Result<GradCheckReport>
where
    F: Fn(&Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_at(f, x, step, tolerance, &coords)
}

/// Compare the tape gradient of scalar `f` at `x` with
/// `(f(x + εe) − f(x − εe)) / 2ε` on the given flat coordinates.
///
/// Relative error is `|g − n| / max(|g|, |n|, 1e-3·s)` where `s` is the
/// largest numerical gradient magnitude seen, so coordinates whose
/// gradient is negligible next to the rest are judged on absolute error.
pub fn grad_check_at<F>(
    f: F,
    x: &Tensor,
    step: Real,
    tolerance: Real,
    coords: &[usize],
) -> Result<GradCheckReport>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(invalid("grad_check", format!("step must be positive, got {step}")));
    }
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let loss = f(&xv)?;
    let analytic = tape.backward(&loss)?.get_or_zero(&xv);

    let eval = |t: Tensor| -> Result<Real> {
        let tape = Tape::new();
        let v = tape.constant(t);
        Ok(f(&v)?.item())
    };
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    let scale = numeric.iter().fold(0.0 as Real, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);

    let mut report = GradCheckReport {
        checked: coords.len(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst_index: coords.first().copied().unwrap_or(0),
        tolerance,
        failures: vec![],
    };
    for (&i, &n) in coords.iter().zip(&numeric) {
        let g = analytic.data()[i];
        let abs = (g - n).abs();
        let rel = abs / g.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        if !(rel <= tolerance) {
            report.failures.push(i);
        }
    }
    Ok(report)
}
