//! The frequency-domain gradient obtained through the graph equals the DCT
//! of the pixel gradient.

use sadv::data::synth_patterns;
use sadv::spectral::{verify_gradient_transport, SpectralPlan};
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let data = synth_patterns(4, 3, [1, 12, 12], ValueRange::UNIT, 1)?;
    let model = Model::new(Architecture::small_cnn([1, 12, 12], 3, 4, 3, 10, 4), ValueRange::UNIT, 2)?;
    let plan = SpectralPlan::new(12, 12);

    let r = verify_gradient_transport(&model, &plan, &data.images, &data.labels)?;
    println!("relative l-inf error      {:.3e}", r.max_rel_error);
    println!("after scaling by {:.1e}  {:.3e}", r.scaled_by, r.scaled_rel_error);
    Ok(())
}
