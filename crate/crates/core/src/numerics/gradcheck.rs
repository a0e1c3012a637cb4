use crate::error::{Error, Result};

use super::tensor::{Tape, Tensor};

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences.
///
/// `f` is evaluated on fresh tapes; it receives a leaf with the given shape
/// and data and must return a scalar. Returns the maximum over coordinates
/// of |analytic - central| / max(1, |central|).
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    shape: &[usize],
    x: &[f64],
    eps: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps {eps} outside [1e-7, 1e-3]"
        )));
    }

    let eval = |data: &[f64]| -> Result<f64> {
        let tape = Tape::new();
        let leaf = tape.leaf(shape, data.to_vec(), false)?;
        let out = f(&leaf)?;
        if out.numel() != 1 {
            return Err(Error::Contract(
                "grad_check function must return a scalar".into(),
            ));
        }
        let v = out.scalar_value();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check function value not finite".into()));
        }
        Ok(v)
    };

    let analytic = {
        let tape = Tape::new();
        let leaf = tape.leaf(shape, x.to_vec(), true)?;
        let out = f(&leaf)?;
        if out.numel() != 1 {
            return Err(Error::Contract(
                "grad_check function must return a scalar".into(),
            ));
        }
        out.backward()?;
        leaf.grad().unwrap_or_else(|| vec![0.0; x.len()])
    };
    if analytic.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("analytic gradient not finite".into()));
    }

    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = eval(&probe)?;
        probe[i] = orig - eps;
        let minus = eval(&probe)?;
        probe[i] = orig;
        let central = (plus - minus) / (2.0 * eps);
        if !central.is_finite() {
            return Err(Error::Numeric("finite difference not finite".into()));
        }
        let rel = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
