use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::range::ValueRange;

/// Attack family member.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fgsm,
    Pgd,
    MomentumPgd,
    Spgd,
    NosignPgd,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Fgsm, Method::Pgd, Method::MomentumPgd, Method::Spgd, Method::NosignPgd];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fgsm => "fgsm",
            Method::Pgd => "pgd",
            Method::MomentumPgd => "momentum_pgd",
            Method::Spgd => "spgd",
            Method::NosignPgd => "nosign_pgd",
        }
    }

    /// Whether the update keeps an exponential blend of past gradients.
    pub fn uses_momentum(self) -> bool {
        matches!(self, Method::MomentumPgd | Method::Spgd | Method::NosignPgd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown attack method {s:?}")))
    }
}

/// Step sizes and momentum from the reference experiments.
pub mod defaults {
    /// l∞ radius for MNIST in [0, 1] units.
    pub const MNIST_EPSILON: f64 = 0.3;
    pub const MNIST_PGD_STEP: f64 = 0.01;
    pub const MNIST_SPGD_STEP: f64 = 100.0;
    /// l∞ radius for CIFAR-10 in [0, 255] units.
    pub const CIFAR_EPSILON: f64 = 8.0;
    pub const CIFAR_PGD_STEP: f64 = 2.0;
    pub const CIFAR_SPGD_STEP: f64 = 75_000_000.0;
    pub const SPGD_MOMENTUM: f64 = 0.75;
    pub const TRAINING_STEPS: usize = 20;
    pub const EVALUATION_STEPS: usize = 20;
}

/// Threat model plus optimizer settings of one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: Method,
    pub epsilon: f64,
    pub step_size: f64,
    #[serde(default = "one")]
    pub steps: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "yes")]
    pub random_init: bool,
    pub value_range: ValueRange,
    #[serde(default)]
    pub seed: u64,
    /// When set, the gradient at the starting point seeds the momentum
    /// buffer before the first blended step; otherwise the buffer starts at
    /// zero.
    #[serde(default = "yes")]
    pub seed_momentum: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl AttackConfig {
    fn base(method: Method, epsilon: f64, step_size: f64, steps: usize, value_range: ValueRange) -> Self {
        Self {
            method,
            epsilon,
            step_size,
            steps,
            momentum: 0.0,
            random_init: true,
            value_range,
            seed: 0,
            seed_momentum: true,
        }
    }

    /// Single sign step of size `step_size`, no random start.
    pub fn fgsm(epsilon: f64, step_size: f64, value_range: ValueRange) -> Self {
        Self {
            random_init: false,
            ..Self::base(Method::Fgsm, epsilon, step_size, 1, value_range)
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize, value_range: ValueRange) -> Self {
        Self::base(Method::Pgd, epsilon, step_size, steps, value_range)
    }

    pub fn momentum_pgd(epsilon: f64, step_size: f64, steps: usize, momentum: f64, value_range: ValueRange) -> Self {
        Self {
            momentum,
            ..Self::base(Method::MomentumPgd, epsilon, step_size, steps, value_range)
        }
    }

    pub fn spgd(epsilon: f64, step_size: f64, steps: usize, momentum: f64, value_range: ValueRange) -> Self {
        Self {
            momentum,
            ..Self::base(Method::Spgd, epsilon, step_size, steps, value_range)
        }
    }

    pub fn nosign_pgd(epsilon: f64, step_size: f64, steps: usize, momentum: f64, value_range: ValueRange) -> Self {
        Self {
            momentum,
            ..Self::base(Method::NosignPgd, epsilon, step_size, steps, value_range)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_random_init(mut self, random_init: bool) -> Self {
        self.random_init = random_init;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_step_size(mut self, step_size: f64) -> Self {
        self.step_size = step_size;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Same attack with another method; momentum is dropped for methods
    /// that do not blend gradients.
    pub fn with_method(mut self, method: Method) -> Self {
        self.method = method;
        if !method.uses_momentum() {
            self.momentum = 0.0;
        }
        self
    }

    /// ε = 0 is allowed and describes the empty threat model.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{} attack: {msg}", self.method)));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return fail(format!("step_size must be finite and non-negative, got {}", self.step_size));
        }
        if self.steps == 0 {
            return fail("steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if self.method == Method::Fgsm && self.steps != 1 {
            return fail(format!("FGSM takes exactly one step, got steps = {}", self.steps));
        }
        if !self.method.uses_momentum() && self.momentum != 0.0 {
            return fail(format!("momentum must be 0, got {}", self.momentum));
        }
        Ok(())
    }
}
