//! Finite-difference check of input and parameter gradients of a small CNN.

use sadv::data::synth_patterns;
use sadv::gradcheck::{check_input_gradient, check_parameter_gradient};
use sadv::{Architecture, Model, ValueRange};

fn main() -> sadv::Result<()> {
    let data = synth_patterns(4, 2, [1, 12, 12], ValueRange::UNIT, 3)?;
    let model = Model::new(Architecture::small_cnn([1, 12, 12], 3, 4, 3, 10, 4), ValueRange::UNIT, 5)?;
    let coords: Vec<usize> = (0..data.images.len()).step_by(7).collect();

    let input = check_input_gradient(&model, &data.images, &data.labels, 1e-5, &coords)?;
    let params = check_parameter_gradient(&model, &data.images, &data.labels, 1e-5, 10, 9)?;
    for (what, r) in [("input", input), ("parameters", params)] {
        println!("{what:<10} max rel error {:.2e}  checked {}  skipped at kinks {}", r.max_rel_error, r.checked, r.skipped);
    }
    Ok(())
}
