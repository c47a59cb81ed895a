use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::Differentiable;
use crate::training::{evaluate, EvalResult};

use super::AttackConfig;

/// Outcome of a grid search over step sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct StepSizeSearch {
    pub best: f64,
    /// `(α, result)` in candidate order.
    pub results: Vec<(f64, EvalResult)>,
}

/// Evaluates `cfg` with every candidate α and picks the one with the lowest
/// adversarial accuracy. Ties go to the smaller α.
pub fn search_step_size(
    model: &dyn Differentiable,
    dataset: &Dataset,
    candidates: &[f64],
    cfg: &AttackConfig,
) -> Result<StepSizeSearch> {
    if candidates.is_empty() {
        return Err(invalid("no step-size candidates"));
    }
    let results = candidates
        .iter()
        .map(|&a| Ok((a, evaluate(model, dataset, Some(&cfg.clone().with_step_size(a)))?)))
        .collect::<Result<Vec<_>>>()?;
    let best = results
        .iter()
        .min_by(|(a1, r1), (a2, r2)| r1.accuracy.total_cmp(&r2.accuracy).then(a1.total_cmp(a2)))
        .map(|(a, _)| *a)
        .expect("non-empty");
    Ok(StepSizeSearch { best, results })
}
