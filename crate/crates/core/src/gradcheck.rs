//! Central finite differences, the independent oracle for [`Graph::backward`].
//!
//! [`Graph::backward`]: crate::autodiff::Graph::backward

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{invalid, Result};
use crate::model::{evaluate_batch, input_gradient, Differentiable, Model};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`].
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for each requested flat index.
pub fn central_difference(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
    indices: &[usize],
) -> Result<Vec<f64>> {
    if step <= 0.0 {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let down = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

fn summed_loss(model: &dyn Differentiable, x: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(evaluate_batch(model, x, labels, false)?.losses.iter().sum())
}

/// Finite-difference estimate of `∇_x Σᵢ J(xᵢ, yᵢ)` at every component.
pub fn finite_diff_gradient(model: &dyn Differentiable, input: &Tensor, labels: &[usize], step: f64) -> Result<Tensor> {
    let all: Vec<usize> = (0..input.len()).collect();
    let g = central_difference(|x| summed_loss(model, x, labels), input, step, &all)?;
    Tensor::new(input.shape().to_vec(), g)
}

fn pattern_at(model: &dyn Differentiable, x: &Tensor, labels: &[usize]) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let input = g.constant(x.clone())?;
    model.build_loss(&mut g, input, labels)?;
    Ok(g.piecewise_pattern())
}

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose ±h probes straddle a ReLU or max-pool kink.
    pub skipped: usize,
}

impl GradCheck {
    fn record(&mut self, err: f64) {
        self.max_rel_error = self.max_rel_error.max(err);
        self.checked += 1;
    }

    pub fn merge(mut self, other: &GradCheck) -> Self {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.skipped += other.skipped;
        self
    }
}

/// Checks `∇_x` at the given flat indices, skipping kink neighborhoods.
pub fn check_input_gradient(
    model: &dyn Differentiable,
    input: &Tensor,
    labels: &[usize],
    step: f64,
    indices: &[usize],
) -> Result<GradCheck> {
    let analytic = input_gradient(model, input, labels)?;
    let base = pattern_at(model, input, labels)?;
    let mut report = GradCheck::default();
    let mut probe = input.clone();
    for &i in indices {
        let orig = probe.data()[i];
        let mut smooth = true;
        for delta in [step, -step] {
            probe.data_mut()[i] = orig + delta;
            smooth &= pattern_at(model, &probe, labels)? == base;
        }
        probe.data_mut()[i] = orig;
        if !smooth {
            report.skipped += 1;
            continue;
        }
        let numeric = central_difference(|x| summed_loss(model, x, labels), &probe, step, &[i])?[0];
        report.record(relative_error(analytic.data()[i], numeric));
    }
    Ok(report)
}

/// Checks every coordinate of every input of a graph function.
///
/// `build` receives the graph and one node per input and returns a scalar
/// node. Inputs are fed back as constants to detect kinks.
pub fn check_graph_function(
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    inputs: &[Tensor],
    step: f64,
) -> Result<GradCheck> {
    let eval = |xs: &[Tensor], differentiable: bool| -> Result<(Graph, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids = xs
            .iter()
            .map(|x| if differentiable { g.input(x.clone()) } else { g.constant(x.clone()) })
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };
    let (g, ids, out) = eval(inputs, true)?;
    let grads = g.backward(out)?;
    let base = g.piecewise_pattern();
    let mut report = GradCheck::default();
    let mut probe = inputs.to_vec();
    for (k, id) in ids.iter().enumerate() {
        let analytic = grads.wrt(*id);
        for i in 0..probe[k].len() {
            let orig = probe[k].data()[i];
            let mut values = [0.0; 2];
            let mut smooth = true;
            for (slot, delta) in [step, -step].into_iter().enumerate() {
                probe[k].data_mut()[i] = orig + delta;
                let (g, _, out) = eval(&probe, false)?;
                smooth &= g.piecewise_pattern() == base;
                values[slot] = g.value(out).data()[0];
            }
            probe[k].data_mut()[i] = orig;
            if !smooth {
                report.skipped += 1;
                continue;
            }
            report.record(relative_error(analytic.data()[i], (values[0] - values[1]) / (2.0 * step)));
        }
    }
    Ok(report)
}

/// Checks parameter gradients of the mean loss at `per_tensor` random
/// coordinates of every parameter tensor.
pub fn check_parameter_gradient(
    model: &Model,
    input: &Tensor,
    labels: &[usize],
    step: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<GradCheck> {
    let (_, _, analytic) = model.loss_and_param_grads(input, labels)?;
    let base = pattern_at(model, input, labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheck::default();
    let n = labels.len() as f64;
    for (p, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        for i in sample(&mut rng, len, per_tensor.min(len)) {
            let eval = |delta: f64| -> Result<(f64, bool)> {
                let mut m = model.clone();
                m.params_mut().nth(p).expect("parameter index").data_mut()[i] += delta;
                let loss = summed_loss(&m, input, labels)? / n;
                Ok((loss, pattern_at(&m, input, labels)? == base))
            };
            let (up, s1) = eval(step)?;
            let (down, s2) = eval(-step)?;
            if !(s1 && s2) {
                report.skipped += 1;
                continue;
            }
            report.record(relative_error(grad.data()[i], (up - down) / (2.0 * step)));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_quadratics() {
        let x = Tensor::from_vec(vec![3.0]);
        let d = central_difference(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-5, &[0]).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn symmetric_function_at_origin() {
        let x = Tensor::from_vec(vec![0.0]);
        let d = central_difference(|t| Ok(t.data()[0].abs()), &x, 1e-5, &[0]).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::from_vec(vec![0.0]);
        assert!(central_difference(|t| Ok(t.data()[0]), &x, 0.0, &[0]).is_err());
    }
}
