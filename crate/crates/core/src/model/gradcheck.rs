// SPDX-License-Identifier: Apache-2.0

//! Central-difference gradient checking against any scalar loss of the parameters.

use super::MlpNetwork;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|fd − an| / max(|fd|, |an|, floor)` over checked parameters.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` at the parameter
/// indices in `indices` (all parameters when `None`).
pub fn check_gradients(
    net: &MlpNetwork,
    analytic: &[f64],
    indices: Option<&[usize]>,
    h: f64,
    abs_floor: f64,
    mut loss: impl FnMut(&MlpNetwork) -> Result<f64>,
) -> Result<GradCheckReport> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..analytic.len()).collect();
            &all
        }
    };
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in idx {
        let orig = *probe.params().nth(i).expect("parameter index in range");
        *probe.params_mut().nth(i).unwrap() = orig + h;
        let up = loss(&probe)?;
        *probe.params_mut().nth(i).unwrap() = orig - h;
        let down = loss(&probe)?;
        *probe.params_mut().nth(i).unwrap() = orig;
        let fd = (up - down) / (2.0 * h);
        let an = analytic[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(abs_floor);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
