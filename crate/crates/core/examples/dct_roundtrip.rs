//! Forward and inverse 2-D DCT on a random 3×32×32 image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadv::spectral::SpectralPlan;
use sadv::Tensor;

fn main() -> sadv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(vec![3, 32, 32], |_| rng.random_range(0.0..1.0));
    let plan = SpectralPlan::new(32, 32);

    let z = plan.dct2(&x)?;
    let back = plan.idct2(&z)?;
    let err = x.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let energy = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();

    println!("basis orthogonality error {:.3e}", plan.orthogonality_error());
    println!("round-trip max abs error  {err:.3e}");
    println!("energy pixel {:.6} / freq {:.6}", energy(&x), energy(&z));
    println!("DC coefficient of channel 0: {:.4}", z.data()[0]);
    Ok(())
}
