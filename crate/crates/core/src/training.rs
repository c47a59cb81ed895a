//! Standard and adversarial training, plus evaluation under attack.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig};
use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::model::{evaluate_batch, Differentiable, Model};
use crate::seed;

/// Mini-batch SGD settings. With `attack` set, every batch is replaced by
/// its adversarial counterpart before the descent step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 50,
            learning_rate: 0.01,
            momentum: default_momentum(),
            attack: None,
            seed: 0,
            checkpoint_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }
}

/// Accuracy and mean loss over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean loss and accuracy over the batches actually descended on.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation: Option<EvalResult>,
    pub validation_adversarial: Option<EvalResult>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

/// Minimizes the mean cross-entropy on natural examples.
pub fn train_standard(model: &mut Model, train: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.attack.is_some() {
        return Err(invalid("standard training takes no attack; use train_adversarial"));
    }
    train_loop(model, train, validation, cfg)
}

/// Minimizes the mean cross-entropy on adversarial examples generated on
/// the fly with `cfg.attack` (fresh random start per batch and epoch).
pub fn train_adversarial(model: &mut Model, train: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.attack.is_none() {
        return Err(invalid("adversarial training needs an attack"));
    }
    train_loop(model, train, validation, cfg)
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if model.sample_shape() != data.sample_shape() {
        return Err(invalid(format!(
            "model expects {:?} inputs, dataset has {:?}",
            model.sample_shape(),
            data.sample_shape()
        )));
    }
    if data.classes > model.classes() {
        return Err(invalid(format!("dataset has {} classes, model {}", data.classes, model.classes())));
    }
    Ok(())
}

fn train_loop(model: &mut Model, train: &Dataset, validation: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_compatible(model, train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let wrap = |e: Error| Error::Diverged {
                epoch,
                batch: b,
                source: Box::new(e),
            };
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut x = train.images.select(idx)?;
            if let Some(attack) = &cfg.attack {
                let a = attack.clone().with_seed(seed::derive2(attack.seed ^ cfg.seed, epoch as u64, b as u64));
                x = attacks::generate(model, &x, &labels, &a, None).map_err(wrap_non_finite(epoch, b))?;
            }
            let (loss, preds, grads) = model.loss_and_param_grads(&x, &labels).map_err(wrap_non_finite(epoch, b))?;
            if !loss.is_finite() {
                return Err(wrap(Error::NonFinite { op: "loss" }));
            }
            loss_sum += loss * labels.len() as f64;
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            for ((param, v), g) in model.params_mut().zip(&mut velocity).zip(&grads) {
                for ((p, vi), gi) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *vi = cfg.momentum * *vi + gi;
                    *p -= cfg.learning_rate * *vi;
                }
            }
        }
        let (v_nat, v_adv) = match validation {
            Some(val) => (
                Some(evaluate(model, val, None)?),
                match &cfg.attack {
                    Some(a) => Some(evaluate(model, val, Some(a))?),
                    None => None,
                },
            ),
            None => (None, None),
        };
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_accuracy: correct as f64 / seen as f64,
            validation: v_nat,
            validation_adversarial: v_adv,
        });
        if let Some(path) = &cfg.checkpoint_path {
            checkpoint::save(model, path)?;
        }
    }
    Ok(report)
}

fn wrap_non_finite(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            source: Box::new(e),
        },
        other => other,
    }
}

/// Batch size used by [`evaluate`].
pub const EVAL_BATCH: usize = 100;

/// Natural accuracy when `attack` is `None`, otherwise accuracy and mean
/// loss at the final attack step. Batch `i` draws its random start from
/// sub-stream `i` of the attack seed.
pub fn evaluate(model: &dyn Differentiable, dataset: &Dataset, attack: Option<&AttackConfig>) -> Result<EvalResult> {
    evaluate_batched(model, dataset, attack, EVAL_BATCH)
}

pub fn evaluate_batched(
    model: &dyn Differentiable,
    dataset: &Dataset,
    attack: Option<&AttackConfig>,
    batch_size: usize,
) -> Result<EvalResult> {
    if dataset.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if let Some(a) = attack {
        a.validate()?;
    }
    let batches: Vec<_> = dataset.batches(batch_size).collect();
    let parts = batches
        .par_iter()
        .enumerate()
        .map(|(i, (x, labels))| {
            let ev = match attack {
                None => evaluate_batch(model, x, labels, false)?,
                Some(a) => {
                    let a = a.clone().with_seed(seed::derive(a.seed, i as u64));
                    let mut last = None;
                    attacks::drive(model, x, labels, &a, None, |_, _, ev| {
                        last = Some(ev);
                        Ok(())
                    })?;
                    last.expect("at least one step")
                }
            };
            Ok((ev.n_correct(), ev.losses.iter().sum::<f64>()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (correct, loss) = parts.iter().fold((0, 0.0), |(c, l), (pc, pl)| (c + pc, l + pl));
    let n = dataset.len() as f64;
    Ok(EvalResult {
        accuracy: correct as f64 / n,
        mean_loss: loss / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::model::Architecture;
    use crate::range::ValueRange;

    fn blob_model(ds: &Dataset, seed: u64) -> Model {
        Model::new(Architecture::mlp(ds.sample_shape(), &[8], ds.classes), ds.value_range, seed).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let ds = synth_blobs(2, 20, 2, 4.0, 1).unwrap();
        let mut m = blob_model(&ds, 2);
        let before = m.clone();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        train_standard(&mut m, &ds, None, &cfg).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let train = synth_blobs(2, 200, 2, 8.0, 3).unwrap();
        let test = synth_blobs(2, 100, 2, 8.0, 4).unwrap();
        let mut m = blob_model(&train, 5);
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 20,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        train_standard(&mut m, &train, None, &cfg).unwrap();
        let acc = evaluate(&m, &test, None).unwrap().accuracy;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn empty_threat_model_reduces_to_standard_training() {
        let ds = synth_blobs(3, 30, 4, 3.0, 7).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut std_model = blob_model(&ds, 1);
        train_standard(&mut std_model, &ds, None, &cfg).unwrap();
        let mut adv_model = blob_model(&ds, 1);
        let adv_cfg = TrainConfig {
            attack: Some(AttackConfig::pgd(0.0, 0.5, 3, ds.value_range)),
            ..cfg
        };
        train_adversarial(&mut adv_model, &ds, None, &adv_cfg).unwrap();
        assert_eq!(std_model, adv_model);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = synth_blobs(2, 20, 2, 4.0, 1).unwrap();
        let mut m = blob_model(&ds, 2);
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e200,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let err = train_standard(&mut m, &ds, None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn degenerate_attack_matches_natural_accuracy() {
        let ds = synth_blobs(3, 30, 4, 3.0, 9).unwrap();
        let m = blob_model(&ds, 4);
        let nat = evaluate(&m, &ds, None).unwrap();
        let cfg = AttackConfig::pgd(0.0, 0.1, 5, ds.value_range).with_random_init(false);
        let adv = evaluate(&m, &ds, Some(&cfg)).unwrap();
        assert_eq!(nat, adv);
    }

    #[test]
    fn training_is_reproducible() {
        let ds = synth_blobs(2, 30, 3, 3.0, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 7,
            attack: Some(AttackConfig::pgd(0.5, 0.2, 2, ds.value_range)),
            seed: 3,
            ..TrainConfig::default()
        };
        let mut a = blob_model(&ds, 8);
        let mut b = blob_model(&ds, 8);
        train_adversarial(&mut a, &ds, None, &cfg).unwrap();
        train_adversarial(&mut b, &ds, None, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn requires_matching_attack_presence() {
        let ds = synth_blobs(2, 5, 2, 3.0, 2).unwrap();
        let mut m = blob_model(&ds, 1);
        assert!(train_adversarial(&mut m, &ds, None, &TrainConfig::default()).is_err());
        let cfg = TrainConfig {
            attack: Some(AttackConfig::pgd(0.1, 0.1, 1, ValueRange::UNIT)),
            ..TrainConfig::default()
        };
        assert!(train_standard(&mut m, &ds, None, &cfg).is_err());
    }
}
