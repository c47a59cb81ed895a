//! SPGD (momentum in DCT space, step in pixel space) against the sign-free
//! pixel-space update. The two trajectories coincide up to rounding.

use sadv::attacks::{nosign_pgd, spgd, AttackConfig};
use sadv::data::synth_patterns;
use sadv::spectral::SpectralPlan;
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let r = ValueRange::UNIT;
    let data = synth_patterns(4, 5, [1, 12, 12], r, 4)?;
    let model = Model::new(Architecture::small_cnn([1, 12, 12], 3, 4, 3, 10, 4), r, 6)?;
    let plan = SpectralPlan::new(12, 12);
    let s = spgd(&model, &data.images, &data.labels, &AttackConfig::spgd(0.3, 100.0, 20, 0.75, r).with_seed(8), &plan)?;
    let n = nosign_pgd(&model, &data.images, &data.labels, &AttackConfig::nosign_pgd(0.3, 100.0, 20, 0.75, r).with_seed(8))?;

    for k in [1, 5, 10, 20] {
        let gap = s.adversarial(k).data().iter().zip(n.adversarial(k).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("step {k:>2}: max |x_spgd - x_nosign| = {gap:.2e}, loss {:.6} vs {:.6}", s.steps[k - 1].mean_loss(), n.steps[k - 1].mean_loss());
    }
    Ok(())
}
