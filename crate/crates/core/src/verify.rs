//! Numerical checks of the DCT, gradient transport, the SPGD / sign-free
//! PGD equivalence and the autodiff engine, bundled into one report.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attacks::{run_attack, AttackConfig, Method};
use crate::error::{invalid, Result};
use crate::gradcheck::{check_input_gradient, check_parameter_gradient};
use crate::model::Model;
use crate::spectral::{dct_basis, verify_gradient_transport, SpectralPlan};
use crate::tensor::Tensor;

pub const ORTHOGONALITY_THRESHOLD: f64 = 1e-12;
pub const ROUND_TRIP_THRESHOLD: f64 = 1e-10;
pub const PARSEVAL_THRESHOLD: f64 = 1e-10;
pub const TRANSPORT_THRESHOLD: f64 = 1e-8;
pub const EQUIVALENCE_THRESHOLD: f64 = 1e-6;
pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub max_error: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.max_error < self.threshold
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn get(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "check,max_error,threshold,status,detail")?;
        for c in &self.checks {
            writeln!(
                f,
                "{},{},{},{},{}",
                c.name,
                crate::report::format_g17(c.max_error),
                crate::report::format_g17(c.threshold),
                if c.passed() { "pass" } else { "FAIL" },
                c.detail
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Attack whose SPGD and sign-free runs are compared; its method is ignored.
    pub attack: AttackConfig,
    /// Input coordinates probed per image by the finite-difference check.
    pub gradcheck_coords: usize,
    /// Parameter coordinates probed per tensor.
    pub gradcheck_params: usize,
    /// Replace the row basis with a perturbed one (negative control).
    pub corrupt_basis: bool,
    pub seed: u64,
}

/// A DCT matrix with one entry nudged by 1e-3, no longer orthogonal.
pub fn corrupted_plan(h: usize, w: usize) -> SpectralPlan {
    let mut b = dct_basis(h);
    b.data_mut()[0] += 1e-3;
    SpectralPlan::from_bases(b, dct_basis(w))
}

/// Runs every check on `images` `[N, C, H, W]` with `labels`.
pub fn run_verification(model: &Model, images: &Tensor, labels: &[usize], opts: &VerifyOptions) -> Result<VerifyReport> {
    if images.rank() != 4 || images.batch_len() != labels.len() || labels.is_empty() {
        return Err(invalid(format!("need a non-empty [N, C, H, W] batch with labels, got {:?}", images.shape())));
    }
    let (h, w) = (images.shape()[2], images.shape()[3]);
    let plan = if opts.corrupt_basis { corrupted_plan(h, w) } else { SpectralPlan::new(h, w) };
    let mut report = VerifyReport::default();

    report.checks.push(Check {
        name: "dct_orthogonality",
        max_error: plan.orthogonality_error(),
        threshold: ORTHOGONALITY_THRESHOLD,
        detail: format!("max |B Bᵀ - I| for {h}x{w} bases"),
    });

    let coeffs = plan.dct2(images)?;
    report.checks.push(Check {
        name: "dct_round_trip",
        max_error: plan.idct2(&coeffs)?.max_abs_diff(images)?,
        threshold: ROUND_TRIP_THRESHOLD,
        detail: "max |idct2(dct2(x)) - x|".into(),
    });
    let parseval = (0..labels.len())
        .map(|i| {
            let x = images.slice_batch(i, i + 1)?;
            let z = coeffs.slice_batch(i, i + 1)?;
            let (ex, ez) = (x.dot(&x)?, z.dot(&z)?);
            Ok(if ex == 0.0 { ez } else { (ez - ex).abs() / ex })
        })
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    report.checks.push(Check {
        name: "dct_parseval",
        max_error: parseval,
        threshold: PARSEVAL_THRESHOLD,
        detail: "max | ||z||² - ||x||² | / ||x||²".into(),
    });

    let mut transport = 0.0f64;
    let mut scaled = 0.0f64;
    for i in 0..labels.len() {
        let r = verify_gradient_transport(model, &plan, &images.slice_batch(i, i + 1)?, &labels[i..=i])?;
        transport = transport.max(r.max_rel_error);
        scaled = scaled.max(r.scaled_rel_error);
    }
    report.checks.push(Check {
        name: "gradient_transport",
        max_error: transport,
        threshold: TRANSPORT_THRESHOLD,
        detail: format!("{} images; after scaling by 7.5e7: {}", labels.len(), crate::report::format_g17(scaled)),
    });

    let base = opts.attack.clone().with_seed(opts.seed);
    let spgd = run_attack(model, images, labels, &base.clone().with_method(Method::Spgd), Some(&plan))?;
    let nosign = run_attack(model, images, labels, &base.clone().with_method(Method::NosignPgd), None)?;
    let mut traj = 0.0f64;
    for k in 1..=spgd.len() {
        traj = traj.max(spgd.adversarial(k).max_abs_diff(nosign.adversarial(k))?);
    }
    let denom = if base.epsilon > 0.0 { base.epsilon } else { 1.0 };
    report.checks.push(Check {
        name: "spgd_nosign_equivalence",
        max_error: traj / denom,
        threshold: EQUIVALENCE_THRESHOLD,
        detail: format!("max |x_spgd - x_nosign| / eps over {} steps", spgd.len()),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let per_image = images.len() / labels.len();
    let mut input_check = crate::gradcheck::GradCheck::default();
    for i in 0..labels.len() {
        let x = images.slice_batch(i, i + 1)?;
        let coords: Vec<usize> = (0..opts.gradcheck_coords).map(|_| rng.random_range(0..per_image)).collect();
        input_check = input_check.merge(&check_input_gradient(model, &x, &labels[i..=i], GRADCHECK_STEP, &coords)?);
    }
    report.checks.push(Check {
        name: "input_gradcheck",
        max_error: input_check.max_rel_error,
        threshold: GRADCHECK_THRESHOLD,
        detail: format!("{} coordinates; {} skipped at kinks", input_check.checked, input_check.skipped),
    });
    let n = labels.len().min(4);
    let params = check_parameter_gradient(
        model,
        &images.slice_batch(0, n)?,
        &labels[..n],
        GRADCHECK_STEP,
        opts.gradcheck_params,
        opts.seed,
    )?;
    report.checks.push(Check {
        name: "parameter_gradcheck",
        max_error: params.max_rel_error,
        threshold: GRADCHECK_THRESHOLD,
        detail: format!("{} coordinates; {} skipped at kinks", params.checked, params.skipped),
    });
    Ok(report)
}
