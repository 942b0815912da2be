//! Central finite-difference verification of analytic gradients.

use std::fmt;

use super::{Module, Tensor};
use crate::error::{EtpError, Result};

/// Per-coordinate step `1e-6 * max(1, |x|)`.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

/// `|a - n| / max(|a|, |n|, 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    /// Which input tensor (or parameter, in declaration order).
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl fmt::Display for GradEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "input {} element {}: analytic {:.12e} vs numeric {:.12e} (rel err {:.3e})",
            self.input, self.index, self.analytic, self.numeric, self.rel_error
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub rel_tol: f64,
    pub entries: Vec<GradEntry>,
    /// Optional names for each checked input.
    pub names: Vec<String>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.first_failure().is_none()
    }

    pub fn first_failure(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .find(|e| e.rel_error.is_nan() || e.rel_error > self.rel_tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    /// `Err` naming the first failing coordinate.
    pub fn into_result(self) -> Result<Self> {
        match self.first_failure() {
            None => Ok(self),
            Some(e) => {
                let name = self.names.get(e.input).map(|n| format!(" (`{n}`)")).unwrap_or_default();
                Err(EtpError::Training(format!(
                    "gradient check failed at rel_tol {:e}{name}: {e}",
                    self.rel_tol
                )))
            }
        }
    }
}

/// Compares `analytic[i]` against central differences of `loss` around
/// `inputs`, one coordinate at a time.
pub fn grad_check<F>(inputs: &[Tensor], analytic: &[Tensor], mut loss: F, rel_tol: f64) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> f64,
{
    if inputs.len() != analytic.len() {
        return Err(EtpError::invalid("one analytic gradient per input is required"));
    }
    for (x, g) in inputs.iter().zip(analytic) {
        if x.shape() != g.shape() {
            return Err(EtpError::Shape {
                op: "grad_check",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut entries = Vec::new();
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let x0 = inputs[t].data()[i];
            let h = fd_step(x0);
            probe[t].data_mut()[i] = x0 + h;
            let up = loss(&probe);
            probe[t].data_mut()[i] = x0 - h;
            let down = loss(&probe);
            probe[t].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            entries.push(GradEntry {
                input: t,
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    Ok(GradReport {
        rel_tol,
        entries,
        names: Vec::new(),
    })
}

/// Checks the gradients already accumulated in `model`'s parameters against
/// central differences of `loss`, perturbing parameter values in place.
pub fn grad_check_params<M, F>(model: &mut M, mut loss: F, rel_tol: f64) -> GradReport
where
    M: Module + ?Sized,
    F: FnMut(&M) -> f64,
{
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let names = model.params().iter().map(|p| p.name.clone()).collect();
    let mut entries = Vec::new();
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let x0 = model.params()[t].value.data()[i];
            let h = fd_step(x0);
            model.params_mut()[t].value.data_mut()[i] = x0 + h;
            let up = loss(model);
            model.params_mut()[t].value.data_mut()[i] = x0 - h;
            let down = loss(model);
            model.params_mut()[t].value.data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * h);
            entries.push(GradEntry {
                input: t,
                index: i,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
    }
    GradReport {
        rel_tol,
        entries,
        names,
    }
}
