//! Central-difference verification of analytic gradients.

use super::params::{Gradients, ParamId, ParameterSet};
use crate::error::{Error, Result};

/// Relative error `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries whose
/// true gradient is numerically zero from dominating.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst entries, largest error first.
    pub worst: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

pub fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compare analytic gradients with the five-point central difference
/// `(-f(w+2ε) + 8f(w+ε) - 8f(w-ε) + f(w-2ε)) / 12ε` for every scalar of every
/// parameter accepted by `filter`.
///
/// `loss(params, grads)` must be deterministic; when `grads` is given it must
/// also accumulate the analytic gradient.
pub fn grad_check<F>(
    params: &ParameterSet,
    epsilon: f64,
    filter: impl Fn(ParamId, &str) -> bool,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterSet, Option<&mut Gradients>) -> Result<f64>,
{
    let mut grads = Gradients::new(params);
    let base = loss(params, Some(&mut grads))?;
    if !base.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let mut work = params.clone();
    let mut entries = Vec::new();
    let ids: Vec<(ParamId, String, usize)> = params
        .iter()
        .filter(|(id, p)| filter(*id, &p.name))
        .map(|(id, p)| (id, p.name.clone(), p.data.len()))
        .collect();
    for (id, name, len) in ids {
        let analytic = grads.get_or_zero(id, len);
        for i in 0..len {
            let orig = work.get(id).data[i];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(id).data[i] = orig + delta;
                let v = loss(&work, None)?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("loss at {name}[{i}]")));
                }
                Ok(v)
            };
            let (p2, p1, m1, m2) = (at(2.0 * epsilon)?, at(epsilon)?, at(-epsilon)?, at(-2.0 * epsilon)?);
            work.get_mut(id).data[i] = orig;
            let numeric = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * epsilon);
            entries.push(GradEntry {
                param: name.clone(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: rel_error(analytic[i], numeric),
            });
        }
    }
    entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    let checked = entries.len();
    let max_rel_error = entries.first().map(|e| e.rel_error).unwrap_or(0.0);
    entries.truncate(10);
    Ok(GradCheckReport {
        max_rel_error,
        checked,
        worst: entries,
    })
}
