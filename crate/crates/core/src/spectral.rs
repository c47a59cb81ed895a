//! Whole-image orthonormal 2-D DCT-II per channel.
//!
//! For an `H×W` channel `x` the coefficients are `z = B_H · x · B_Wᵀ`, where
//! `B_N[k][n] = s_k · cos(π(2n+1)k / 2N)` with `s_0 = √(1/N)` and
//! `s_k = √(2/N)` otherwise. The bases are orthogonal, so the inverse is
//! `x = B_Hᵀ · z · B_W` and a gradient with respect to `z` is the DCT of the
//! gradient with respect to `x`.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::autodiff::{apply_bilinear, Graph, NodeId};
use crate::error::{shape_err, Result};
use crate::model::Differentiable;
use crate::tensor::{relative_linf_error, Tensor};

/// Precomputed row and column DCT bases for one image size.
#[derive(Clone, Debug)]
pub struct SpectralPlan {
    height: usize,
    width: usize,
    basis_row: Arc<Tensor>,
    basis_col: Arc<Tensor>,
    basis_row_t: Arc<Tensor>,
    basis_col_t: Arc<Tensor>,
}

/// Orthonormal `N×N` DCT-II matrix, row `k` holding frequency `k`.
pub fn dct_basis(n: usize) -> Tensor {
    assert!(n > 0, "DCT size must be positive");
    let nf = n as f64;
    Tensor::from_fn(vec![n, n], |i| {
        let (k, j) = (i / n, i % n);
        let s = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        s * (PI * (2 * j + 1) as f64 * k as f64 / (2.0 * nf)).cos()
    })
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    Tensor::from_fn(vec![c, r], |i| m.data()[(i % r) * c + i / r])
}

/// `max |BᵀB − I|` for a square basis.
pub fn orthogonality_error(basis: &Tensor) -> f64 {
    let n = basis.shape()[0];
    let b = basis.data();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|k| b[k * n + i] * b[k * n + j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - target).abs());
        }
    }
    worst
}

impl SpectralPlan {
    pub fn new(height: usize, width: usize) -> Self {
        Self::from_bases(dct_basis(height), dct_basis(width))
    }

    /// Builds a plan from arbitrary square bases. Used to inject corrupted
    /// bases as a negative control for the orthogonality check.
    pub fn from_bases(basis_row: Tensor, basis_col: Tensor) -> Self {
        assert_eq!(basis_row.rank(), 2);
        assert_eq!(basis_col.rank(), 2);
        let height = basis_row.shape()[0];
        let width = basis_col.shape()[0];
        Self {
            height,
            width,
            basis_row_t: Arc::new(transpose(&basis_row)),
            basis_col_t: Arc::new(transpose(&basis_col)),
            basis_row: Arc::new(basis_row),
            basis_col: Arc::new(basis_col),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn basis_row(&self) -> &Tensor {
        &self.basis_row
    }

    pub fn basis_col(&self) -> &Tensor {
        &self.basis_col
    }

    /// Largest orthogonality defect over both bases.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_error(&self.basis_row).max(orthogonality_error(&self.basis_col))
    }

    fn check(&self, t: &Tensor, op: &'static str) -> Result<()> {
        let r = t.rank();
        if r < 2 || t.shape()[r - 2] != self.height || t.shape()[r - 1] != self.width {
            return Err(shape_err(
                op,
                format!("plan is {}×{}, tensor is {:?}", self.height, self.width, t.shape()),
            ));
        }
        Ok(())
    }

    /// Forward transform of every trailing `H×W` plane (`[C,H,W]` or `[N,C,H,W]`).
    pub fn dct2(&self, image: &Tensor) -> Result<Tensor> {
        self.check(image, "dct2")?;
        apply_bilinear(image, &self.basis_row, &self.basis_col_t, false)
    }

    /// Inverse transform of every trailing `H×W` plane.
    pub fn idct2(&self, coeffs: &Tensor) -> Result<Tensor> {
        self.check(coeffs, "idct2")?;
        apply_bilinear(coeffs, &self.basis_row_t, &self.basis_col, false)
    }

    /// Pushes an inverse-transform node so gradients flow back to the coefficients.
    pub fn idct2_node(&self, graph: &mut Graph, coeffs: NodeId) -> Result<NodeId> {
        self.check(graph.value(coeffs), "idct2")?;
        graph.bilinear(coeffs, self.basis_row_t.clone(), self.basis_col.clone())
    }

    pub fn dct2_node(&self, graph: &mut Graph, image: NodeId) -> Result<NodeId> {
        self.check(graph.value(image), "dct2")?;
        graph.bilinear(image, self.basis_row.clone(), self.basis_col_t.clone())
    }
}

/// Gradient of the summed loss with respect to DCT coefficients, obtained by
/// differentiating `J(IDCT(z))` through the graph.
pub fn coefficient_gradient(
    model: &dyn Differentiable,
    plan: &SpectralPlan,
    coeffs: &Tensor,
    labels: &[usize],
) -> Result<(Tensor, crate::model::LossOutput)> {
    let mut g = Graph::new();
    let z = g.input(coeffs.clone())?;
    let x = plan.idct2_node(&mut g, z)?;
    let out = model.build_loss(&mut g, x, labels)?;
    let mut grads = g.backward(out.total)?;
    Ok((grads.take(z), out))
}

/// Agreement between the two routes to the frequency-domain gradient.
#[derive(Clone, Debug)]
pub struct TransportReport {
    /// `‖a − b‖∞ / ‖b‖∞` between the graph route `a` and the transported route `b`.
    pub max_rel_error: f64,
    /// The same quantity after scaling both routes by `scaled_by`.
    pub scaled_rel_error: f64,
    pub scaled_by: f64,
}

/// Step size used for the scaled comparison; the SPGD step size
/// conventionally used on 0–255 CIFAR-10 data.
pub const LARGE_STEP: f64 = 75_000_000.0;

/// Compares `∇_z J(IDCT(z))` from the graph against `DCT(∇_x J(x))` at
/// `z = DCT(input)`, `x = IDCT(z)`.
pub fn verify_gradient_transport(
    model: &dyn Differentiable,
    plan: &SpectralPlan,
    input: &Tensor,
    labels: &[usize],
) -> Result<TransportReport> {
    let coeffs = plan.dct2(input)?;
    let (via_graph, _) = coefficient_gradient(model, plan, &coeffs, labels)?;

    // Both routes run at x̃ = IDCT(z). x̃ differs from `input` by rounding,
    // which is enough to flip exact max-pool ties on flat MNIST background.
    let at = plan.idct2(&coeffs)?;
    let pixel = crate::model::input_gradient(model, &at, labels)?;
    let transported = plan.dct2(&pixel)?;

    let max_rel_error = relative_linf_error(&via_graph, &transported)?;
    let scaled_rel_error = relative_linf_error(&via_graph.scale(LARGE_STEP), &transported.scale(LARGE_STEP))?;
    Ok(TransportReport {
        max_rel_error,
        scaled_rel_error,
        scaled_by: LARGE_STEP,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LinearScore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct evaluation of the DCT-II sum, independent of the matrix route.
    fn dct_by_definition(x: &[f64], h: usize, w: usize) -> Vec<f64> {
        let s = |k: usize, n: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        let mut z = vec![0.0; h * w];
        for k1 in 0..h {
            for k2 in 0..w {
                let mut acc = 0.0;
                for n1 in 0..h {
                    for n2 in 0..w {
                        acc += x[n1 * w + n2]
                            * (PI * (2 * n1 + 1) as f64 * k1 as f64 / (2 * h) as f64).cos()
                            * (PI * (2 * n2 + 1) as f64 * k2 as f64 / (2 * w) as f64).cos();
                    }
                }
                z[k1 * w + k2] = s(k1, h) * s(k2, w) * acc;
            }
        }
        z
    }

    #[test]
    fn constant_channel_has_only_dc() {
        let plan = SpectralPlan::new(4, 4);
        let z = plan.dct2(&Tensor::full(vec![1, 4, 4], 1.0)).unwrap();
        assert!((z.data()[0] - 4.0).abs() < 1e-12);
        assert!(z.data()[1..].iter().all(|v| v.abs() < 1e-12));
        let mut dc = Tensor::zeros(vec![1, 4, 4]);
        dc.data_mut()[0] = 4.0;
        let x = plan.idct2(&dc).unwrap();
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn two_point_transform() {
        let b = dct_basis(2);
        // x = [1, 0] → column 0 of the basis.
        assert!((b.data()[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((b.data()[2] - (PI / 4.0).cos()).abs() < 1e-15);
        let plan = SpectralPlan::new(1, 2);
        let z = plan.dct2(&Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!((z.data()[0] - 0.7071067811865476).abs() < 1e-12);
        assert!((z.data()[1] - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_summation() {
        let x = random(&[1, 6, 5], 3);
        let plan = SpectralPlan::new(6, 5);
        let z = plan.dct2(&x).unwrap();
        let oracle = dct_by_definition(x.data(), 6, 5);
        for (a, b) in z.data().iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let plan = SpectralPlan::new(32, 32);
        let x = random(&[3, 32, 32], 11);
        let z = plan.dct2(&x).unwrap();
        assert!(plan.idct2(&z).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
        assert!(plan.dct2(&plan.idct2(&z).unwrap()).unwrap().max_abs_diff(&z).unwrap() < 1e-10);
        assert!((z.norm2() - x.norm2()).abs() / x.norm2() < 1e-10);
        let zr = random(&[3, 32, 32], 12);
        assert!((plan.idct2(&zr).unwrap().norm2() - zr.norm2()).abs() < 1e-10);
    }

    #[test]
    fn bases_are_orthogonal() {
        for n in 1..=64 {
            assert!(orthogonality_error(&dct_basis(n)) < 1e-12, "N = {n}");
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let plan = SpectralPlan::new(4, 4);
        assert!(plan.dct2(&Tensor::zeros(vec![1, 4, 5])).is_err());
        assert!(plan.idct2(&Tensor::zeros(vec![4])).is_err());
    }

    #[test]
    fn corrupted_basis_fails_orthogonality() {
        let mut b = dct_basis(8);
        b.data_mut()[9] += 1e-3;
        let plan = SpectralPlan::from_bases(b, dct_basis(8));
        assert!(plan.orthogonality_error() > 1e-4);
    }

    #[test]
    fn linear_transport_is_exact() {
        let w = random(&[1, 6, 6], 5);
        let model = LinearScore::new(w);
        let plan = SpectralPlan::new(6, 6);
        let x = random(&[2, 1, 6, 6], 8);
        let report = verify_gradient_transport(&model, &plan, &x, &[0, 0]).unwrap();
        assert!(report.max_rel_error < 1e-12, "{report:?}");
        assert!(report.scaled_rel_error < 1e-12);
    }
}
