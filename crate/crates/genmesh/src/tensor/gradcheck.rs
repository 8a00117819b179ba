//! Central finite-difference verification of backward passes.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep over one input point.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare the tape gradient of a scalar-valued expression against
/// central finite differences `(f(x+h e_i) - f(x-h e_i)) / 2h`.
///
/// Coordinates where both gradients are below 1e-7 in magnitude are
/// compared absolutely; elsewhere the error is relative to the larger
/// magnitude.
pub fn finite_diff_check<F>(f: F, point: &Tensor, step: f64) -> Result<FdReport>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Autodiff(format!("step must be positive, got {step}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.input(t.clone());
        let y = f(&tape, &x)?;
        let v = y.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_check eval".into(),
                index: 0,
            });
        }
        Ok(v)
    };

    // Analytic gradient.
    let tape = Tape::new();
    let x = tape.input(point.clone());
    let y = f(&tape, &x)?;
    if !y.value().is_scalar() {
        return Err(Error::Autodiff(format!(
            "finite_diff_check wants a scalar function, got shape {:?}",
            y.value().shape()
        )));
    }
    let grads = tape.backward(&y)?;
    let analytic = x
        .grad(&grads)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let mut numeric = vec![0.0; point.numel()];
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fp = eval(&plus).map_err(|_| Error::NonFinite {
            op: format!("finite_diff_check: f non-finite at +h perturbation of coord {i}"),
            index: i,
        })?;
        let fm = eval(&minus).map_err(|_| Error::NonFinite {
            op: format!("finite_diff_check: f non-finite at -h perturbation of coord {i}"),
            index: i,
        })?;
        numeric[i] = (fp - fm) / (2.0 * step);
    }

    let mut max_rel_error = 0.0;
    let mut worst_coord = 0;
    for i in 0..numeric.len() {
        let a = analytic.data()[i];
        let n = numeric[i];
        let scale = a.abs().max(n.abs());
        let err = if scale < 1e-7 {
            (a - n).abs()
        } else {
            (a - n).abs() / scale
        };
        if err > max_rel_error {
            max_rel_error = err;
            worst_coord = i;
        }
    }
    Ok(FdReport {
        max_rel_error,
        worst_coord,
        analytic: analytic.data().to_vec(),
        numeric,
    })
}
