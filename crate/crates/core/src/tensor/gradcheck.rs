use super::{Tape, Tensor, Var};
use crate::error::{contract_err, Error, Result};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_coord: usize,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, x: &Tensor, coord: Option<usize>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = f(&tape, tape.constant(x.clone()))?;
    let v = out.value();
    if v.len() != 1 {
        return contract_err(format!("grad_check needs a scalar function, got {:?}", v.shape()));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::Numeric(match coord {
            Some(c) => format!("function is non-finite when perturbing coordinate {c}"),
            None => "function is non-finite at the base point".into(),
        }));
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// on every coordinate and returns the maximum relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    Ok(grad_check_coords(f, x, eps, &coords)?.max_rel_error)
}

/// As [`grad_check`] but only on the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !x.all_finite() {
        return Err(Error::Numeric("grad_check input is not finite".into()));
    }
    eval_scalar(&f, x, None)?;
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = f(&tape, xv)?;
        tape.backward(out)?.get_or_zeros(xv)
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coord: coords.first().copied().unwrap_or(0),
        checked: coords.len(),
    };
    let mut probe = x.clone();
    for &c in coords {
        if c >= x.len() {
            return contract_err(format!("coordinate {c} out of range for {} values", x.len()));
        }
        let orig = probe.data()[c];
        probe.data_mut()[c] = orig + eps;
        let up = eval_scalar(&f, &probe, Some(c))?;
        probe.data_mut()[c] = orig - eps;
        let down = eval_scalar(&f, &probe, Some(c))?;
        probe.data_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[c];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = c;
        }
    }
    Ok(report)
}
