//! Runs every attack against a briefly trained CNN on synthetic patterns and
//! prints the per-step adversarial accuracy.

use sadv::attacks::{fgsm, momentum_pgd, nosign_pgd, pgd, spgd, AttackConfig};
use sadv::data::synth_patterns;
use sadv::spectral::SpectralPlan;
use sadv::training::{evaluate, train_standard, TrainConfig};
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let r = ValueRange::UNIT;
    let train = synth_patterns(4, 40, [1, 12, 12], r, 1)?;
    let test = synth_patterns(4, 10, [1, 12, 12], r, 2)?;
    let mut model = Model::new(Architecture::small_cnn([1, 12, 12], 4, 8, 3, 16, 4), r, 3)?;
    let cfg = TrainConfig { epochs: 5, batch_size: 10, learning_rate: 0.05, ..TrainConfig::default() };
    train_standard(&mut model, &train, None, &cfg)?;
    println!("natural accuracy {:.3}", evaluate(&model, &test, None)?.accuracy);

    let (x, y) = (&test.images, &test.labels[..]);
    let eps = 0.2;
    let adv = fgsm(&model, x, y, &AttackConfig::fgsm(eps, eps, r))?;
    let fgsm_acc = sadv::model::evaluate_batch(&model, &adv, y, false)?;
    println!("fgsm          {:.3}", fgsm_acc.n_correct() as f64 / y.len() as f64);

    let plan = SpectralPlan::new(12, 12);
    let traces = [
        pgd(&model, x, y, &AttackConfig::pgd(eps, eps / 4.0, 10, r))?,
        momentum_pgd(&model, x, y, &AttackConfig::momentum_pgd(eps, eps / 4.0, 10, 0.9, r))?,
        spgd(&model, x, y, &AttackConfig::spgd(eps, 100.0, 10, 0.75, r), &plan)?,
        nosign_pgd(&model, x, y, &AttackConfig::nosign_pgd(eps, 100.0, 10, 0.75, r))?,
    ];
    for t in &traces {
        let accs: Vec<String> = t.steps.iter().map(|s| format!("{:.2}", s.accuracy())).collect();
        println!("{:<13} {}  violations {}", t.method.name(), accs.join(" "), t.violations(r, 1e-9));
    }
    Ok(())
}
