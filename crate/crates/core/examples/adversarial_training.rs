//! Standard against PGD adversarial training on synthetic patterns.

use sadv::attacks::AttackConfig;
use sadv::data::synth_patterns;
use sadv::training::{evaluate, train_adversarial, train_standard, TrainConfig};
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let r = ValueRange::UNIT;
    let train = synth_patterns(4, 50, [1, 12, 12], r, 1)?;
    let test = synth_patterns(4, 15, [1, 12, 12], r, 2)?;
    let arch = Architecture::small_cnn([1, 12, 12], 4, 8, 3, 16, 4);
    let attack = AttackConfig::pgd(0.1, 0.03, 5, r).with_seed(11);

    let base = TrainConfig { epochs: 10, batch_size: 10, learning_rate: 0.05, seed: 5, ..TrainConfig::default() };
    let mut standard = Model::new(arch.clone(), r, 3)?;
    train_standard(&mut standard, &train, Some(&test), &base)?;

    let mut robust = Model::new(arch, r, 3)?;
    let adv_cfg = TrainConfig { attack: Some(attack.clone()), ..base };
    let report = train_adversarial(&mut robust, &train, Some(&test), &adv_cfg)?;
    for e in &report.epochs {
        println!("epoch {} train loss {:.4} adv acc {:.3}", e.epoch, e.train_loss, e.train_accuracy);
    }

    for (name, m) in [("standard", &standard), ("adversarial", &robust)] {
        let nat = evaluate(m, &test, None)?;
        let adv = evaluate(m, &test, Some(&attack))?;
        println!("{name:<12} natural {:.3}  under PGD {:.3}", nat.accuracy, adv.accuracy);
    }
    Ok(())
}
