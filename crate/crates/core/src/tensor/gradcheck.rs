use super::{lit, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]; below it the error is absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub indices: Vec<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_err: f64,
}

/// Compares the tape gradient of `f` at `x` with central differences of
/// step `h` on every coordinate.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_at(f, x, h, &all)
}

/// As [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_at<T, F>(mut f: F, x: &Tensor<T>, h: f64, indices: &[usize]) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Tape<T>, Var) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&h) {
        return Err(Error::Unsupported { op: "finite_diff_check", reason: format!("step {h} outside [1e-5, 1e-2]") });
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone().with_requires_grad(true));
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let grad = tape.grad(v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); x.numel()]);

    let mut eval = |probe: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe.with_requires_grad(true));
        let out = f(&mut t, v)?;
        Ok(t.value(out).item().to_f64().unwrap_or(f64::NAN))
    };

    let mut analytic = Vec::with_capacity(indices.len());
    let mut numeric = Vec::with_capacity(indices.len());
    let mut max_rel_err = 0.0f64;
    for &i in indices {
        let base = x.data()[i];
        let mut plus = x.clone();
        plus.data_mut()[i] = base + lit(h);
        let mut minus = x.clone();
        minus.data_mut()[i] = base - lit(h);
        // Use the actually representable step.
        let step = (plus.data()[i] - minus.data()[i]).to_f64().unwrap_or(2.0 * h);
        let est = (eval(plus)? - eval(minus)?) / step;
        let a = grad[i].to_f64().unwrap_or(f64::NAN);
        max_rel_err = max_rel_err.max(relative_error(a, est));
        analytic.push(a);
        numeric.push(est);
    }
    Ok(GradCheck { indices: indices.to_vec(), analytic, numeric, max_rel_err })
}
