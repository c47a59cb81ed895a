//! l∞ attacks: FGSM, PGD, momentum PGD, SPGD and sign-free PGD.
//!
//! All methods share [`project`] and [`random_init`]. Pixel-domain methods
//! step along `sign(g)` (FGSM, PGD, momentum PGD) or along `g` itself
//! (sign-free PGD). SPGD ascends on the DCT coefficients of the image and
//! projects back in pixel space after every step; with an orthonormal DCT it
//! follows the same trajectory as sign-free PGD.
//!
//! Gradients are taken of the loss summed over the batch, so each example
//! moves along its own gradient regardless of batch size.

mod config;
mod search;

pub use config::{defaults, AttackConfig, Method};
pub use search::{search_step_size, StepSizeSearch};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::model::{evaluate_batch, Differentiable, Evaluation};
use crate::range::ValueRange;
use crate::spectral::{coefficient_gradient, SpectralPlan};
use crate::tensor::{sign, Tensor};

/// Clips `x_candidate − x_nat` to `[−ε, ε]` component-wise, adds `x_nat`
/// back and clips to the value range. Points already inside both sets are
/// returned bit-for-bit unchanged.
pub fn project(x_nat: &Tensor, x_candidate: &Tensor, epsilon: f64, range: ValueRange) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    x_nat.zip_map(x_candidate, |x, c| {
        let d = c - x;
        let v = if d > epsilon {
            x + epsilon
        } else if d < -epsilon {
            x - epsilon
        } else {
            c
        };
        range.clamp(v)
    })
}

/// `x_nat + δ` with `δᵢ ~ U(−ε, ε)` i.i.d., clipped to the value range.
pub fn random_init(x_nat: &Tensor, epsilon: f64, range: ValueRange, seed: u64) -> Result<Tensor> {
    if epsilon < 0.0 {
        return Err(invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    if epsilon == 0.0 {
        return Ok(x_nat.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x_nat
        .data()
        .iter()
        .map(|&x| range.clamp(x + rng.random_range(-epsilon..=epsilon)))
        .collect();
    Tensor::new(x_nat.shape().to_vec(), data)
}

/// State after one attack step.
#[derive(Clone, Debug)]
pub struct TraceStep {
    pub adversarial: Tensor,
    pub losses: Vec<f64>,
    pub correct: Vec<bool>,
}

impl TraceStep {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }
}

/// Per-step adversarial batches of one attack run.
#[derive(Clone, Debug)]
pub struct PerturbationTrace {
    pub method: Method,
    pub epsilon: f64,
    pub natural: Tensor,
    pub steps: Vec<TraceStep>,
}

impl PerturbationTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Adversarial batch after step `k` (1-based).
    pub fn adversarial(&self, k: usize) -> &Tensor {
        &self.steps[k - 1].adversarial
    }

    pub fn last(&self) -> &TraceStep {
        self.steps.last().expect("traces have at least one step")
    }

    /// `δ_k = x′_k − x`.
    pub fn perturbation(&self, k: usize) -> Tensor {
        self.adversarial(k).sub(&self.natural).expect("same shape by construction")
    }

    /// Number of components, over all steps, outside the ε-ball (with
    /// `slack`) or outside the value range.
    pub fn violations(&self, range: ValueRange, slack: f64) -> usize {
        self.steps
            .iter()
            .map(|s| {
                s.adversarial
                    .data()
                    .iter()
                    .zip(self.natural.data())
                    .filter(|(&a, &x)| (a - x).abs() > self.epsilon + slack || !range.contains(a))
                    .count()
            })
            .sum()
    }
}

fn take_gradient(ev: Evaluation) -> Result<Tensor> {
    ev.input_grad.ok_or_else(|| invalid("missing input gradient"))
}

fn starting_point(x: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.random_init {
        random_init(x, cfg.epsilon, cfg.value_range, cfg.seed)
    } else {
        Ok(x.clone())
    }
}

/// `buffer ← μ·buffer + (1−μ)·g`.
fn blend(buffer: &mut Tensor, g: &Tensor, mu: f64) {
    for (b, &v) in buffer.data_mut().iter_mut().zip(g.data()) {
        *b = *b * mu + v * (1.0 - mu);
    }
}

fn momentum_buffer(cfg: &AttackConfig, initial: &Tensor) -> Tensor {
    if cfg.seed_momentum {
        initial.clone()
    } else {
        Tensor::zeros(initial.shape().to_vec())
    }
}

/// Runs `cfg` and calls `on_step(k, x′_k, evaluation at x′_k)` for `k = 1..=steps`.
///
/// `plan` is only consulted by SPGD and is built from the input size when absent.
pub fn drive(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    plan: Option<&SpectralPlan>,
    on_step: impl FnMut(usize, &Tensor, Evaluation) -> Result<()>,
) -> Result<()> {
    drive_inner(model, x, labels, cfg, plan, true, on_step)
}

/// Final adversarial batch only; skips evaluating the last point.
pub fn generate(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    plan: Option<&SpectralPlan>,
) -> Result<Tensor> {
    let mut last = None;
    drive_inner(model, x, labels, cfg, plan, false, |_, adv, _| {
        last = Some(adv.clone());
        Ok(())
    })?;
    Ok(last.expect("at least one step"))
}

fn skipped() -> Evaluation {
    Evaluation {
        losses: Vec::new(),
        correct: Vec::new(),
        input_grad: None,
    }
}

fn drive_inner(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    plan: Option<&SpectralPlan>,
    final_eval: bool,
    mut on_step: impl FnMut(usize, &Tensor, Evaluation) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.method == Method::Spgd {
        let owned;
        let plan = match plan {
            Some(p) => p,
            None => {
                let r = x.rank();
                if r < 2 {
                    return Err(invalid("SPGD needs image-shaped input"));
                }
                owned = SpectralPlan::new(x.shape()[r - 2], x.shape()[r - 1]);
                &owned
            }
        };
        return drive_spectral(model, x, labels, cfg, plan, final_eval, on_step);
    }

    let mut current = starting_point(x, cfg)?;
    let mut g = take_gradient(evaluate_batch(model, &current, labels, true)?)?;
    let mut buffer = match cfg.method {
        Method::MomentumPgd | Method::NosignPgd => Some(momentum_buffer(cfg, &g)),
        _ => None,
    };
    for k in 1..=cfg.steps {
        let direction = match (&mut buffer, cfg.method) {
            (Some(buf), Method::MomentumPgd) => {
                blend(buf, &g, cfg.momentum);
                buf.map(sign)
            }
            (Some(buf), _) => {
                blend(buf, &g, cfg.momentum);
                buf.clone()
            }
            (None, _) => g.map(sign),
        };
        let candidate = current.zip_map(&direction, |x, d| x + cfg.step_size * d)?;
        current = project(x, &candidate, cfg.epsilon, cfg.value_range)?;
        let last = k == cfg.steps;
        let mut ev = if last && !final_eval {
            skipped()
        } else {
            evaluate_batch(model, &current, labels, !last)?
        };
        if let Some(next) = ev.input_grad.take() {
            g = next;
        }
        on_step(k, &current, ev)?;
    }
    Ok(())
}

/// Gradient ascent on DCT coefficients with pixel-space projection.
fn drive_spectral(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    plan: &SpectralPlan,
    final_eval: bool,
    mut on_step: impl FnMut(usize, &Tensor, Evaluation) -> Result<()>,
) -> Result<()> {
    let start = starting_point(x, cfg)?;
    let mut z = plan.dct2(&start)?;
    let (mut g, _) = coefficient_gradient(model, plan, &z, labels)?;
    let mut buffer = momentum_buffer(cfg, &g);
    for i in 1..=cfg.steps {
        // At i = 1 the coefficients have not moved, so the fresh gradient equals δ₀.
        blend(&mut buffer, &g, cfg.momentum);
        z = z.zip_map(&buffer, |v, d| v + cfg.step_size * d)?;
        let current = project(x, &plan.idct2(&z)?, cfg.epsilon, cfg.value_range)?;
        z = plan.dct2(&current)?;
        let ev = if i < cfg.steps {
            let (next, out) = coefficient_gradient(model, plan, &z, labels)?;
            g = next;
            let correct = out
                .predictions
                .map(|p| p.iter().zip(labels).map(|(p, y)| p == y).collect())
                .unwrap_or_default();
            Evaluation {
                losses: out.per_example,
                correct,
                input_grad: None,
            }
        } else if final_eval {
            evaluate_batch(model, &current, labels, false)?
        } else {
            skipped()
        };
        on_step(i, &current, ev)?;
    }
    Ok(())
}

fn expect_method(cfg: &AttackConfig, method: Method) -> Result<()> {
    if cfg.method == method {
        Ok(())
    } else {
        Err(invalid(format!("expected a {method} config, got {}", cfg.method)))
    }
}

/// Runs any configured attack and records every step.
pub fn run_attack(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    plan: Option<&SpectralPlan>,
) -> Result<PerturbationTrace> {
    let mut steps = Vec::with_capacity(cfg.steps);
    drive(model, x, labels, cfg, plan, |_, adv, ev| {
        steps.push(TraceStep {
            adversarial: adv.clone(),
            losses: ev.losses,
            correct: ev.correct,
        });
        Ok(())
    })?;
    Ok(PerturbationTrace {
        method: cfg.method,
        epsilon: cfg.epsilon,
        natural: x.clone(),
        steps,
    })
}

/// `project(x + α·sign(∇_x J))`, starting from `x` unless random init is set.
pub fn fgsm(model: &dyn Differentiable, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    expect_method(cfg, Method::Fgsm)?;
    let trace = run_attack(model, x, labels, cfg, None)?;
    Ok(trace.steps.into_iter().next().expect("one step").adversarial)
}

pub fn pgd(model: &dyn Differentiable, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<PerturbationTrace> {
    expect_method(cfg, Method::Pgd)?;
    run_attack(model, x, labels, cfg, None)
}

/// Sign PGD whose raw gradients are blended before taking the sign.
pub fn momentum_pgd(model: &dyn Differentiable, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<PerturbationTrace> {
    expect_method(cfg, Method::MomentumPgd)?;
    run_attack(model, x, labels, cfg, None)
}

pub fn spgd(
    model: &dyn Differentiable,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    plan: &SpectralPlan,
) -> Result<PerturbationTrace> {
    expect_method(cfg, Method::Spgd)?;
    run_attack(model, x, labels, cfg, Some(plan))
}

/// `project(x′ + α·∇_x J)`, with the same momentum blend as SPGD.
pub fn nosign_pgd(model: &dyn Differentiable, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<PerturbationTrace> {
    expect_method(cfg, Method::NosignPgd)?;
    run_attack(model, x, labels, cfg, None)
}
