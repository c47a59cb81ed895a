//! Distribution of perturbation components after each step, for SPGD and
//! sign PGD. Writes one SVG per step into the given directory.

use sadv::analysis::{component_histograms, fraction_below, DEFAULT_BINS};
use sadv::attacks::{run_attack, AttackConfig};
use sadv::data::synth_patterns;
use sadv::report::{histogram_svg, write_artifact};
use sadv::spectral::SpectralPlan;
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/histograms".into());
    let r = ValueRange::UNIT;
    let data = synth_patterns(4, 3, [1, 12, 12], r, 1)?;
    let model = Model::new(Architecture::small_cnn([1, 12, 12], 3, 4, 3, 10, 4), r, 2)?;
    let plan = SpectralPlan::new(12, 12);
    let eps = 0.3;

    for cfg in [AttackConfig::spgd(eps, 100.0, 3, 0.75, r), AttackConfig::pgd(eps, eps, 3, r)] {
        let trace = run_attack(&model, &data.images, &data.labels, &cfg, Some(&plan))?;
        for h in component_histograms(&trace, DEFAULT_BINS)? {
            let abs: Vec<f64> = trace.perturbation(h.step).data().iter().map(|v| v.abs()).collect();
            println!("{} step {}: {:.3} of components below eps/2", h.method.name(), h.step, fraction_below(&abs, eps / 2.0));
            write_artifact(format!("{out}/{}_step{:02}.svg", h.method.name(), h.step), &histogram_svg(&h))?;
        }
    }
    println!("wrote SVGs to {out}");
    Ok(())
}
