use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the coordinate with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, x: &Array<f64>) -> Result<(f64, Option<Array<f64>>)>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf);
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::Shape(format!("grad_check needs a scalar output, got {:?}", v.shape())));
    }
    let fx = v.data()[0];
    if !fx.is_finite() {
        return Err(Error::Numeric(format!("f(x) = {fx}")));
    }
    let mut grads = tape.backward(out);
    Ok((fx, grads.take(leaf)))
}

fn eval_value<F>(f: &F, x: &Array<f64>) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let mut tape = Tape::new();
    let leaf = tape.constant(x.clone());
    let out = f(&mut tape, leaf);
    tape.value(out).data()[0]
}

/// Compare the reverse-mode gradient of scalar `f` at `x` with central
/// differences over every coordinate.
pub fn grad_check<F>(f: F, x: &Array<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, h, tol, &coords)
}

/// As [`grad_check`], restricted to the listed flat coordinates.
pub fn grad_check_coords<F>(f: F, x: &Array<f64>, h: f64, tol: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let (_, grad) = eval(&f, x)?;
    let grad = grad.unwrap_or_else(|| Array::zeros(x.shape()));
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        checked: 0,
        pass: true,
    };
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_value(&f, &probe);
        probe.data_mut()[i] = orig - h;
        let fm = eval_value(&f, &probe);
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad.data()[i];
        let rel = relative_error(analytic, numeric);
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        if rel > report.max_rel_err || !rel.is_finite() {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
