//! Pixel and DCT-coefficient gradient maps for one image, plus the energy in
//! four frequency bands.

use sadv::analysis::{band_energies, gradient_heatmaps};
use sadv::data::synth_patterns;
use sadv::report::{heatmap_svg, write_artifact};
use sadv::spectral::SpectralPlan;
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "out/heatmaps".into());
    let r = ValueRange::UNIT;
    let data = synth_patterns(4, 1, [1, 12, 12], r, 1)?;
    let model = Model::new(Architecture::small_cnn([1, 12, 12], 3, 4, 3, 10, 4), r, 2)?;
    let plan = SpectralPlan::new(12, 12);

    let one = data.select(&[0])?;
    let maps = gradient_heatmaps(&model, &one.images, one.labels[0], &plan)?;
    write_artifact(format!("{out}/pixel.svg"), &heatmap_svg(&maps.pixel_grad, "pixel gradient")?)?;
    write_artifact(format!("{out}/freq.svg"), &heatmap_svg(&maps.freq_grad, "DCT gradient")?)?;
    let bands = band_energies(&maps.freq_grad)?;
    println!("band energy low..high: {:.3e} {:.3e} {:.3e} {:.3e}", bands[0], bands[1], bands[2], bands[3]);
    Ok(())
}
