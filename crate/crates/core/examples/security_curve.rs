//! Adversarial accuracy over a grid of radii, written as CSV to stdout.

use sadv::analysis::security_curve;
use sadv::attacks::AttackConfig;
use sadv::data::synth_patterns;
use sadv::report::security_curves_csv;
use sadv::training::{train_standard, TrainConfig};
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let r = ValueRange::UNIT;
    let train = synth_patterns(4, 40, [1, 12, 12], r, 1)?;
    let test = synth_patterns(4, 10, [1, 12, 12], r, 2)?;
    let mut model = Model::new(Architecture::small_cnn([1, 12, 12], 4, 8, 3, 16, 4), r, 3)?;
    train_standard(&mut model, &train, None, &TrainConfig { epochs: 5, batch_size: 10, learning_rate: 0.05, ..TrainConfig::default() })?;

    let template = AttackConfig::pgd(0.0, 0.01, 20, r).with_seed(2);
    let grid = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3];
    let curve = security_curve(&model, "standard", &test, &template, &grid)?;
    print!("{}", security_curves_csv(&[curve]));
    Ok(())
}
