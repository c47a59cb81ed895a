//! Run configuration read from one TOML file.
//!
//! ```toml
//! seed = 7
//!
//! [dataset]
//! source = "idx"            # or "synthetic"
//! path = "data/mnist"       # directory holding train-/t10k- IDX files
//! value_range = [0.0, 1.0]
//! train_subset = 10000
//! test_subset = 1000
//!
//! [model]
//! layers = "conv16k5p0;relu;pool2;conv32k5p0;relu;pool2;flatten;fc128;relu;fc10"
//!
//! [train]
//! epochs = 10
//! batch_size = 50
//! learning_rate = 0.01
//! momentum = 0.9
//! attack = "pgd20"          # omit for standard training
//!
//! [attacks.pgd20]
//! method = "pgd"
//! epsilon = 0.3             # MNIST radius
//! step_size = 0.01          # PGD step on MNIST
//! steps = 20
//!
//! [attacks.spgd20]
//! method = "spgd"
//! epsilon = 0.3
//! step_size = 100.0         # SPGD step on MNIST
//! steps = 20
//! momentum = 0.75
//!
//! [eval]
//! attacks = ["pgd20"]
//!
//! [report]
//! out_dir = "out"
//! step_table = ["spgd20", "pgd20"]
//! ```
//!
//! Attack entries take every [`AttackConfig`] field; `value_range` defaults
//! to the dataset's and `seed` to the global seed, so attacks that share a
//! seed also share their random starts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attacks::{defaults, AttackConfig, Method};
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::model::{Architecture, Layer};
use crate::range::ValueRange;
use crate::seed;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default)]
    pub attacks: BTreeMap<String, AttackSpec>,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub attack: AttackRunSpec,
    #[serde(default)]
    pub report: ReportSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    /// Directory relative paths are resolved against; set by [`RunConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "unit_range")]
    pub value_range: ValueRange,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default = "ten")]
    pub classes: usize,
    #[serde(default = "default_per_class")]
    pub train_per_class: usize,
    #[serde(default = "default_per_class")]
    pub test_per_class: usize,
    /// Sample shape; also the model input shape.
    #[serde(default = "mnist_shape")]
    pub shape: [usize; 3],
}

fn unit_range() -> ValueRange {
    ValueRange::UNIT
}

fn ten() -> usize {
    10
}

fn default_per_class() -> usize {
    20
}

fn mnist_shape() -> [usize; 3] {
    [1, 28, 28]
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `;`-separated layer tokens; the MNIST CNN when absent.
    #[serde(default)]
    pub layers: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    #[serde(default = "ten")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_sgd_momentum")]
    pub momentum: f64,
    /// Name of the inner attack; standard training when absent.
    #[serde(default)]
    pub attack: Option<String>,
    /// Evaluate on the test split after every epoch.
    #[serde(default = "yes")]
    pub validate: bool,
}

fn default_batch() -> usize {
    50
}

fn default_lr() -> f64 {
    0.01
}

fn default_sgd_momentum() -> f64 {
    0.9
}

fn yes() -> bool {
    true
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            epochs: ten(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            momentum: default_sgd_momentum(),
            attack: None,
            validate: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: Method,
    #[serde(default = "mnist_eps")]
    pub epsilon: f64,
    /// Defaults to the MNIST step for the method.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default = "eval_steps")]
    pub steps: usize,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "yes")]
    pub random_init: bool,
    #[serde(default)]
    pub value_range: Option<ValueRange>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "yes")]
    pub seed_momentum: bool,
}

fn mnist_eps() -> f64 {
    defaults::MNIST_EPSILON
}

fn eval_steps() -> usize {
    defaults::EVALUATION_STEPS
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub attacks: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackRunSpec {
    /// Attacks run by the `attack` command; all must share ε.
    #[serde(default)]
    pub attacks: Vec<String>,
    /// Test images whose perturbations are histogrammed.
    #[serde(default = "ten")]
    pub trace_images: usize,
}

impl Default for AttackRunSpec {
    fn default() -> Self {
        Self {
            attacks: Vec::new(),
            trace_images: ten(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSpec {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub step_table: Vec<String>,
    #[serde(default)]
    pub security_curve: Vec<String>,
    #[serde(default = "table4_grid")]
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub histograms: Vec<String>,
    #[serde(default = "ten")]
    pub histogram_images: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
    /// Test images whose gradient heatmaps are drawn.
    #[serde(default)]
    pub heatmap_images: usize,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// The MNIST ε grid of the robustness tables.
pub fn table4_grid() -> Vec<f64> {
    vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
}

fn default_bins() -> usize {
    crate::analysis::DEFAULT_BINS
}

impl Default for ReportSpec {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            step_table: Vec::new(),
            security_curve: Vec::new(),
            epsilons: table4_grid(),
            histograms: Vec::new(),
            histogram_images: ten(),
            bins: default_bins(),
            heatmap_images: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    #[serde(default = "ten")]
    pub images: usize,
    /// Attack used for the SPGD versus sign-free comparison.
    #[serde(default)]
    pub attack: Option<String>,
    #[serde(default = "default_coords")]
    pub gradcheck_coords: usize,
    #[serde(default = "default_param_coords")]
    pub gradcheck_params: usize,
    /// Negative control: perturb the DCT basis so the checks must fail.
    #[serde(default)]
    pub corrupt_basis: bool,
}

fn default_coords() -> usize {
    20
}

fn default_param_coords() -> usize {
    5
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            images: ten(),
            attack: None,
            gradcheck_coords: default_coords(),
            gradcheck_params: default_param_coords(),
            corrupt_basis: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => config_err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Checks cross references and every attack; messages name the field.
    pub fn validate(&self) -> Result<()> {
        for (name, spec) in &self.attacks {
            self.build_attack(name, spec)?
                .validate()
                .map_err(|e| config_err(format!("attacks.{name}: {e}")))?;
        }
        let refs = self
            .train
            .attack
            .iter()
            .map(|n| ("train.attack".to_string(), n))
            .chain(self.verify.attack.iter().map(|n| ("verify.attack".to_string(), n)))
            .chain(list_refs("eval.attacks", &self.eval.attacks))
            .chain(list_refs("attack.attacks", &self.attack.attacks))
            .chain(list_refs("report.step_table", &self.report.step_table))
            .chain(list_refs("report.security_curve", &self.report.security_curve))
            .chain(list_refs("report.histograms", &self.report.histograms));
        for (field, name) in refs {
            if !self.attacks.contains_key(name) {
                return Err(config_err(format!("{field}: unknown attack {name:?}")));
            }
        }
        for (field, names) in [("attack.attacks", &self.attack.attacks), ("report.step_table", &self.report.step_table)] {
            let eps: Vec<f64> = names.iter().map(|n| self.attacks[n].epsilon).collect();
            if eps.windows(2).any(|w| w[0] != w[1]) {
                return Err(config_err(format!("{field}: attacks in one step table must share epsilon")));
            }
        }
        let grid = &self.report.epsilons;
        if grid.first() != Some(&0.0) || grid.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(config_err("report.epsilons: must start at 0 and be strictly ascending"));
        }
        if self.report.bins < 2 {
            return Err(config_err("report.bins: need at least 2"));
        }
        if self.threads == Some(0) {
            return Err(config_err("threads: must be at least 1"));
        }
        let d = &self.dataset;
        if d.source == DataSource::Idx && d.path.is_none() {
            return Err(config_err("dataset.path: required for source = \"idx\""));
        }
        if d.train_subset == Some(0) || d.test_subset == Some(0) {
            return Err(config_err("dataset: subset sizes must be positive"));
        }
        self.architecture().map_err(|e| config_err(format!("model.layers: {e}")))?;
        self.train_config(None).validate().map_err(|e| config_err(format!("train: {e}")))?;
        Ok(())
    }

    fn build_attack(&self, name: &str, s: &AttackSpec) -> Result<AttackConfig> {
        let step_size = s.step_size.unwrap_or(match s.method {
            Method::Spgd | Method::NosignPgd => defaults::MNIST_SPGD_STEP,
            Method::Fgsm => s.epsilon,
            _ => defaults::MNIST_PGD_STEP,
        });
        if name.contains(',') {
            return Err(config_err(format!("attacks.{name}: names may not contain commas")));
        }
        Ok(AttackConfig {
            method: s.method,
            epsilon: s.epsilon,
            step_size,
            steps: s.steps,
            momentum: s.momentum,
            random_init: s.random_init,
            value_range: s.value_range.unwrap_or(self.dataset.value_range),
            seed: s.seed.unwrap_or(self.seed),
            seed_momentum: s.seed_momentum,
        })
    }

    pub fn attack_config(&self, name: &str) -> Result<AttackConfig> {
        let spec = self
            .attacks
            .get(name)
            .ok_or_else(|| config_err(format!("unknown attack {name:?}")))?;
        self.build_attack(name, spec)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        let layers = match &self.model.layers {
            Some(s) => s.split(';').map(str::parse).collect::<Result<Vec<Layer>>>()?,
            None => Architecture::mnist_cnn().layers,
        };
        let arch = Architecture {
            input: self.dataset.shape,
            layers,
        };
        arch.parameter_shapes()?;
        Ok(arch)
    }

    /// Training settings; `checkpoint` is written after every epoch.
    pub fn train_config(&self, checkpoint: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            attack: self.train.attack.as_deref().map(|n| self.attack_config(n).expect("validated")),
            seed: seed::derive(self.seed, 2),
            checkpoint_path: checkpoint,
        }
    }

    pub fn model_seed(&self) -> u64 {
        seed::derive(self.seed, 1)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// `(train, test)` splits after subsetting.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let (train, test) = match d.source {
            DataSource::Idx => {
                let dir = self.resolve(d.path.as_deref().expect("validated"));
                let tr = data::load_mnist_split(&dir, "train")?;
                let te = data::load_mnist_split(&dir, "t10k")?;
                (rescale(tr, d.value_range)?, rescale(te, d.value_range)?)
            }
            DataSource::Synthetic => (
                data::synth_patterns(d.classes, d.train_per_class, d.shape, d.value_range, seed::derive(self.seed, 10))?,
                data::synth_patterns(d.classes, d.test_per_class, d.shape, d.value_range, seed::derive(self.seed, 11))?,
            ),
        };
        let pick = |ds: Dataset, n: Option<usize>, stream| match n {
            Some(n) if n < ds.len() => data::subset(&ds, n, seed::derive(self.seed, stream)),
            _ => Ok(ds),
        };
        Ok((pick(train, d.train_subset, 12)?, pick(test, d.test_subset, 13)?))
    }
}

fn list_refs<'a>(field: &'a str, names: &'a [String]) -> impl Iterator<Item = (String, &'a String)> + 'a {
    names.iter().enumerate().map(move |(i, n)| (format!("{field}[{i}]"), n))
}

/// Maps a unit-range dataset affinely onto `range`.
fn rescale(mut ds: Dataset, range: ValueRange) -> Result<Dataset> {
    if range == ds.value_range {
        return Ok(ds);
    }
    let (lo, span) = (range.lo(), range.hi() - range.lo());
    let (src_lo, src_span) = (ds.value_range.lo(), ds.value_range.hi() - ds.value_range.lo());
    ds.images = ds.images.map(|v| lo + (v - src_lo) / src_span * span);
    ds.value_range = range;
    Ok(ds)
}
