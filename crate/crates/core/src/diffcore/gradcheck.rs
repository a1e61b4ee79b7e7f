//! Central-difference gradient verification.

use super::tensor::ParameterSet;
use crate::error::{Error, Result};

/// Loss value plus a signature of every non-smooth branch taken
/// (relu on/off pattern, log-argument clamping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub signature: u64,
}

impl Probe {
    pub fn smooth(loss: f64) -> Self {
        Self { loss, signature: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter whose error is largest, as `name[index]`.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates whose ±ε probes landed in different smooth pieces.
    pub skipped_kinks: usize,
}

/// Compares `analytic` against central differences of `loss` for every
/// parameter coordinate. Relative error is
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(
    params: &ParameterSet<f64>,
    analytic: &ParameterSet<f64>,
    eps: f64,
    mut loss: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterSet<f64>) -> Result<Probe>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be > 0"));
    }
    let mut probe_params = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.get(&name).expect("present").len();
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::invalid(format!("no analytic gradient for `{name}`")))?;
        if grad.len() != len {
            return Err(Error::shape(name.clone(), "analytic gradient length differs"));
        }
        for i in 0..len {
            let original = params.get(&name).expect("present").data()[i];
            probe_params.get_mut(&name).expect("present").data_mut()[i] = original + eps;
            let plus = loss(&probe_params)?;
            probe_params.get_mut(&name).expect("present").data_mut()[i] = original - eps;
            let minus = loss(&probe_params)?;
            probe_params.get_mut(&name).expect("present").data_mut()[i] = original;
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite loss while probing {name}[{i}]"
                )));
            }
            if plus.signature != minus.signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some(format!("{name}[{i}]"));
                }
            }
        }
    }
    Ok(report)
}
