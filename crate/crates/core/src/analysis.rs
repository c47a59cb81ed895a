//! Diagnostics over attack traces and trained models: component histograms,
//! gradient heatmaps, per-step convergence tables and security curves.

use rayon::prelude::*;

use crate::attacks::{self, AttackConfig, Method, PerturbationTrace};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::{input_gradient, Differentiable};
use crate::seed;
use crate::spectral::{coefficient_gradient, SpectralPlan};
use crate::tensor::Tensor;
use crate::training::{evaluate, EVAL_BATCH};

/// Default bin count; odd so one bin is centred on zero.
pub const DEFAULT_BINS: usize = 101;

/// Histogram range as a multiple of ε.
pub const HISTOGRAM_SPAN: f64 = 1.25;

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub method: Method,
    /// 1-based attack step.
    pub step: usize,
    pub epsilon: f64,
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Bins `values` into `bins` equal bins over `[lo, hi]`. Values outside
    /// the range land in the outermost bins.
    pub fn from_values(method: Method, step: usize, epsilon: f64, values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(invalid(format!("need at least 2 bins, got {bins}")));
        }
        if !(lo < hi) {
            return Err(invalid(format!("histogram range [{lo}, {hi}] is empty")));
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let i = ((v - lo) / width).floor();
            let i = if i < 0.0 { 0 } else { (i as usize).min(bins - 1) };
            counts[i] += 1;
        }
        Ok(Self {
            method,
            step,
            epsilon,
            edges,
            counts,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Index of the bin containing `v`.
    pub fn bin_of(&self, v: f64) -> usize {
        let n = self.counts.len();
        let width = (self.edges[n] - self.edges[0]) / n as f64;
        let i = ((v - self.edges[0]) / width).floor();
        if i < 0.0 {
            0
        } else {
            (i as usize).min(n - 1)
        }
    }
}

/// One histogram per attack step over the flattened perturbation components,
/// binned over `[−1.25ε, 1.25ε]`.
pub fn component_histograms(trace: &PerturbationTrace, bins: usize) -> Result<Vec<Histogram>> {
    if trace.is_empty() {
        return Err(invalid("trace has no steps"));
    }
    if !(trace.epsilon > 0.0) {
        return Err(invalid("histograms need ε > 0"));
    }
    let half = HISTOGRAM_SPAN * trace.epsilon;
    (1..=trace.len())
        .map(|k| Histogram::from_values(trace.method, k, trace.epsilon, trace.perturbation(k).data(), -half, half, bins))
        .collect()
}

/// Fraction of components with `|v| < threshold`.
pub fn fraction_below(values: &[f64], threshold: f64) -> f64 {
    values.iter().filter(|v| v.abs() < threshold).count() as f64 / values.len() as f64
}

/// Raw gradients of one example, summed over channels: `[H, W]` each.
#[derive(Clone, Debug)]
pub struct GradientHeatmaps {
    pub pixel_grad: Tensor,
    /// Gradient with respect to the DCT coefficients.
    pub freq_grad: Tensor,
}

fn channel_sum(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = vec![0.0; h * w];
    for chunk in t.data().chunks(h * w) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// `x` is a single image `[C, H, W]`, with or without a leading batch axis of 1.
pub fn gradient_heatmaps(model: &dyn Differentiable, x: &Tensor, label: usize, plan: &SpectralPlan) -> Result<GradientHeatmaps> {
    let x = match x.rank() {
        3 => x.reshape([&[1][..], x.shape()].concat())?,
        4 if x.shape()[0] == 1 => x.clone(),
        _ => return Err(invalid(format!("expected a single image, got shape {:?}", x.shape()))),
    };
    let pixel = input_gradient(model, &x, &[label])?;
    let (freq, _) = coefficient_gradient(model, plan, &plan.dct2(&x)?, &[label])?;
    Ok(GradientHeatmaps {
        pixel_grad: channel_sum(&pixel)?,
        freq_grad: channel_sum(&freq)?,
    })
}

/// Share of squared magnitude in each frequency quartile, lowest first.
///
/// Cells are ordered by Manhattan index `k₁ + k₂` (ties by `k₁`) and split
/// into four groups of equal size.
pub fn band_energies(freq: &Tensor) -> Result<[f64; 4]> {
    if freq.rank() != 2 {
        return Err(invalid(format!("expected an [H, W] field, got {:?}", freq.shape())));
    }
    let (h, w) = (freq.shape()[0], freq.shape()[1]);
    let mut cells: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).collect();
    cells.sort_by_key(|&(i, j)| (i + j, i));
    let n = cells.len();
    let mut energy = [0.0; 4];
    for (rank, (i, j)) in cells.into_iter().enumerate() {
        let v = freq.data()[i * w + j];
        energy[rank * 4 / n] += v * v;
    }
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return Ok([0.0; 4]);
    }
    Ok(energy.map(|e| e / total))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    /// Attack name; the method name unless labelled explicitly.
    pub label: String,
    pub method: Method,
    pub step: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Per-step adversarial accuracy and mean loss for several attacks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepTable {
    pub rows: Vec<StepRow>,
}

impl StepTable {
    pub fn rows_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a StepRow> + 'a {
        self.rows.iter().filter(move |r| r.label == label)
    }

    pub fn get(&self, label: &str, step: usize) -> Option<&StepRow> {
        self.rows.iter().find(|r| r.label == label && r.step == step)
    }
}

/// Runs every config over `dataset` in batches of [`EVAL_BATCH`] and records
/// every step. Batch `i` of each attack uses sub-seed `i` of its seed, as
/// [`evaluate`] does, so the last row matches `evaluate` exactly.
pub fn attack_step_table(model: &dyn Differentiable, dataset: &Dataset, cfgs: &[AttackConfig]) -> Result<StepTable> {
    let labelled: Vec<(String, AttackConfig)> = cfgs.iter().map(|c| (c.method.name().to_string(), c.clone())).collect();
    labelled_step_table(model, dataset, &labelled)
}

/// [`attack_step_table`] with explicit row labels, for several attacks of
/// the same method.
pub fn labelled_step_table(model: &dyn Differentiable, dataset: &Dataset, cfgs: &[(String, AttackConfig)]) -> Result<StepTable> {
    if let Some((_, first)) = cfgs.first() {
        if cfgs.iter().any(|(_, c)| c.epsilon != first.epsilon || c.value_range != first.value_range) {
            return Err(invalid("all attacks in a step table must share ε and value range"));
        }
    }
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    let plan = {
        let [_, h, w] = dataset.sample_shape();
        SpectralPlan::new(h, w)
    };
    let batches: Vec<_> = dataset.batches(EVAL_BATCH).collect();
    let mut table = StepTable::default();
    for (label, cfg) in cfgs {
        cfg.validate()?;
        let per_batch = batches
            .par_iter()
            .enumerate()
            .map(|(i, (x, labels))| {
                let c = cfg.clone().with_seed(seed::derive(cfg.seed, i as u64));
                let mut acc = vec![(0usize, 0.0f64); cfg.steps];
                attacks::drive(model, x, labels, &c, Some(&plan), |k, _, ev| {
                    acc[k - 1] = (ev.n_correct(), ev.losses.iter().sum());
                    Ok(())
                })?;
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        let n = dataset.len() as f64;
        for k in 0..cfg.steps {
            let (correct, loss) = per_batch.iter().fold((0, 0.0), |(c, l), b| (c + b[k].0, l + b[k].1));
            table.rows.push(StepRow {
                label: label.clone(),
                method: cfg.method,
                step: k + 1,
                accuracy: correct as f64 / n,
                loss: loss / n,
            });
        }
    }
    Ok(table)
}

/// Adversarial accuracy over an ascending ε grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SecurityCurve {
    pub attack: String,
    pub model: String,
    pub epsilons: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl SecurityCurve {
    /// Largest increase between consecutive points; 0 for a non-increasing curve.
    pub fn max_increase(&self) -> f64 {
        self.accuracies.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

/// Evaluates `template` at every ε. The ε = 0 point is the natural
/// accuracy, computed without running the attack.
pub fn security_curve(
    model: &dyn Differentiable,
    model_label: &str,
    dataset: &Dataset,
    template: &AttackConfig,
    epsilons: &[f64],
) -> Result<SecurityCurve> {
    if epsilons.is_empty() {
        return Err(invalid("empty ε grid"));
    }
    if epsilons[0] != 0.0 {
        return Err(invalid("ε grid must start at 0"));
    }
    if epsilons.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("ε grid must be strictly ascending"));
    }
    let accuracies = epsilons
        .iter()
        .map(|&eps| {
            let attack = if eps == 0.0 { None } else { Some(template.clone().with_epsilon(eps)) };
            Ok(evaluate(model, dataset, attack.as_ref())?.accuracy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SecurityCurve {
        attack: template.method.name().to_string(),
        model: model_label.to_string(),
        epsilons: epsilons.to_vec(),
        accuracies,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::{Architecture, LinearScore, Model};

    fn trace_of(deltas: Vec<f64>, eps: f64) -> PerturbationTrace {
        let n = deltas.len();
        PerturbationTrace {
            method: Method::Pgd,
            epsilon: eps,
            natural: Tensor::zeros(vec![1, n]),
            steps: vec![attacks::TraceStep {
                adversarial: Tensor::new(vec![1, n], deltas).unwrap(),
                losses: vec![0.0],
                correct: vec![true],
            }],
        }
    }

    #[test]
    fn zeros_fill_the_centre_bin() {
        let h = &component_histograms(&trace_of(vec![0.0; 40], 0.3), DEFAULT_BINS).unwrap()[0];
        assert_eq!(h.counts[50], 40);
        assert_eq!(h.total(), 40);
        assert_eq!(h.edges.len(), 102);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sign_quantized_mass_in_three_bins() {
        let eps = 0.3;
        let a = eps / 4.0;
        let deltas: Vec<f64> = (0..30).map(|i| [-a, 0.0, a][i % 3]).collect();
        let h = &component_histograms(&trace_of(deltas, eps), DEFAULT_BINS).unwrap()[0];
        let bins = [h.bin_of(-a), h.bin_of(0.0), h.bin_of(a)];
        assert_eq!(bins.iter().map(|&b| h.counts[b]).sum::<u64>(), 30);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 3);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(component_histograms(&trace_of(vec![0.0], 0.3), 1).is_err());
        assert!(component_histograms(&trace_of(vec![0.0], 0.0), 5).is_err());
        let mut empty = trace_of(vec![0.0], 0.3);
        empty.steps.clear();
        assert!(component_histograms(&empty, 5).is_err());
    }

    #[test]
    fn linear_heatmaps() {
        let w = Tensor::from_fn(vec![1, 4, 4], |i| (i as f64 * 0.7).sin());
        let model = LinearScore::new(w.clone());
        let plan = SpectralPlan::new(4, 4);
        let x = Tensor::full(vec![1, 4, 4], 0.5);
        let maps = gradient_heatmaps(&model, &x, 0, &plan).unwrap();
        assert_eq!(maps.pixel_grad.data(), w.data());
        let expected = plan.dct2(&w.reshape(vec![4, 4]).unwrap()).unwrap();
        assert!(maps.freq_grad.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn band_energy_split() {
        let mut f = Tensor::zeros(vec![4, 4]);
        f.data_mut()[0] = 1.0;
        f.data_mut()[15] = 1.0;
        let e = band_energies(&f).unwrap();
        assert_eq!(e, [0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn curve_anchor_and_validation() {
        let ds = synth_blobs(3, 20, 4, 2.0, 1).unwrap();
        let m = Model::new(Architecture::mlp(ds.sample_shape(), &[6], 3), ds.value_range, 2).unwrap();
        let t = AttackConfig::pgd(0.0, 0.3, 3, ds.value_range);
        let c = security_curve(&m, "m", &ds, &t, &[0.0]).unwrap();
        assert_eq!(c.accuracies, vec![evaluate(&m, &ds, None).unwrap().accuracy]);
        assert!(security_curve(&m, "m", &ds, &t, &[0.1]).is_err());
        assert!(security_curve(&m, "m", &ds, &t, &[0.0, 0.2, 0.1]).is_err());
    }

    #[test]
    fn step_table_matches_evaluation() {
        let ds = synth_blobs(2, 120, 3, 2.0, 4).unwrap();
        let m = Model::new(Architecture::mlp(ds.sample_shape(), &[5], 2), ds.value_range, 9).unwrap();
        let cfg = AttackConfig::pgd(1.0, 0.25, 4, ds.value_range).with_seed(5);
        let table = attack_step_table(&m, &ds, &[cfg.clone()]).unwrap();
        assert_eq!(table.rows.len(), 4);
        let ev = evaluate(&m, &ds, Some(&cfg)).unwrap();
        let last = table.get("pgd", 4).unwrap();
        assert_eq!(last.accuracy, ev.accuracy);
        assert!((last.loss - ev.mean_loss).abs() < 1e-12);
        let mixed = [cfg.clone(), cfg.with_epsilon(0.5)];
        assert!(attack_step_table(&m, &ds, &mixed).is_err());
    }
}
