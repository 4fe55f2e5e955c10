use std::collections::BTreeMap;

use super::{Gradients, ParamStore};
use crate::error::{contract, DuaError, Result};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    /// (name, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Central-difference check of `analytic` against `f` around `params`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamStore,
    analytic: &Gradients,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return contract(format!("finite difference step must be positive, got {eps}"));
    }
    let first = f(params)?;
    let second = f(params)?;
    if first.to_bits() != second.to_bits() {
        return contract(format!(
            "function is not deterministic: {first} then {second}"
        ));
    }

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| DuaError::Contract(format!("no analytic gradient for `{name}`")))?;
        let len = params.get(&name)?.len();
        let mut worst_here: f64 = 0.0;
        for i in 0..len {
            let original = params.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = original + eps;
            let plus = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original - eps;
            let minus = f(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            worst_here = worst_here.max(rel);
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
        report.per_param.insert(name, worst_here);
    }
    Ok(report)
}
