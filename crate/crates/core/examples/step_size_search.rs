//! Picks the PGD step size that drives accuracy lowest.

use sadv::attacks::{search_step_size, AttackConfig};
use sadv::data::synth_patterns;
use sadv::training::{train_standard, TrainConfig};
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let r = ValueRange::UNIT;
    let train = synth_patterns(4, 40, [1, 12, 12], r, 1)?;
    let test = synth_patterns(4, 10, [1, 12, 12], r, 2)?;
    let mut model = Model::new(Architecture::small_cnn([1, 12, 12], 4, 8, 3, 16, 4), r, 3)?;
    train_standard(&mut model, &train, None, &TrainConfig { epochs: 5, batch_size: 10, learning_rate: 0.05, ..TrainConfig::default() })?;

    let template = AttackConfig::pgd(0.1, 0.01, 5, r).with_seed(4);
    let s = search_step_size(&model, &test, &[0.005, 0.01, 0.02, 0.05, 0.1], &template)?;
    for (alpha, res) in &s.results {
        println!("alpha {alpha:<6} accuracy {:.3} loss {:.4}", res.accuracy, res.mean_loss);
    }
    println!("best alpha {}", s.best);
    Ok(())
}
