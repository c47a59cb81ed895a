//! End-to-end acceptance runs on MNIST. Prints one line per criterion and
//! exits non-zero if any fails.
//!
//! Trained models are cached under the cargo target tmpdir, keyed by their
//! training configuration, together with the wall time the training took.
//! Set `SADV_FRESH=1` to retrain. `MNIST_DIR` overrides the data location.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadv::analysis::{component_histograms, fraction_below, labelled_step_table, security_curve, DEFAULT_BINS};
use sadv::attacks::{run_attack, AttackConfig, Method, PerturbationTrace};
use sadv::autodiff::{Graph, NodeId, Reduction};
use sadv::data::{load_mnist_split, subset, Dataset};
use sadv::gradcheck::{check_graph_function, check_input_gradient, check_parameter_gradient, GradCheck};
use sadv::report::{histograms_csv, step_table_csv};
use sadv::seed::derive;
use sadv::spectral::{dct_basis, orthogonality_error, verify_gradient_transport, SpectralPlan};
use sadv::training::{evaluate, train_adversarial, train_standard, EvalResult, TrainConfig};
use sadv::{Architecture, Model, Tensor, ValueRange};

const SEED: u64 = 20_240_601;
const EPS: f64 = 0.3;
const TRAIN_SIZE: usize = 10_000;
const EVAL_SIZE: usize = 1_000;

const STD_EPOCHS: usize = 10;
const STD_BATCH: usize = 50;
const ADV_EPOCHS: usize = 12;
const ADV_BATCH: usize = 16;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

struct Line {
    id: String,
    passed: bool,
    detail: String,
    secs: f64,
}

struct Runner {
    lines: Vec<Line>,
}

impl Runner {
    fn run(&mut self, id: &str, f: impl FnOnce() -> sadv::Result<(bool, String)>) {
        let t = Instant::now();
        let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        let line = Line {
            id: id.to_string(),
            passed,
            detail,
            secs: t.elapsed().as_secs_f64(),
        };
        println!("{}", render(&line));
        self.lines.push(line);
    }
}

fn render(l: &Line) -> String {
    format!("{:<14} {}  {}  [{:.1}s]", l.id, if l.passed { "PASS" } else { "FAIL" }, l.detail, l.secs)
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn cache_dir() -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&d).expect("cache dir");
    d
}

struct Trained {
    model: Model,
    train_secs: f64,
    cached: bool,
}

/// Trains (or reloads) a model for `cfg` on `train`.
fn trained(tag: &str, train: &Dataset, cfg: &TrainConfig) -> sadv::Result<Trained> {
    let mut h = DefaultHasher::new();
    format!("{cfg:?}|{}|{}|{}", train.len(), SEED, Architecture::mnist_cnn().descriptor(ValueRange::UNIT)).hash(&mut h);
    train.labels.hash(&mut h);
    let key = format!("{tag}-{:016x}", h.finish());
    let (ckpt, secs_file) = (cache_dir().join(format!("{key}.ckpt")), cache_dir().join(format!("{key}.secs")));
    let fresh = std::env::var_os("SADV_FRESH").is_some();
    if !fresh && ckpt.exists() && secs_file.exists() {
        if let Ok(secs) = fs::read_to_string(&secs_file).unwrap_or_default().trim().parse::<f64>() {
            return Ok(Trained {
                model: sadv::checkpoint::load(&ckpt)?,
                train_secs: secs,
                cached: true,
            });
        }
    }
    let mut model = Model::new(Architecture::mnist_cnn(), ValueRange::UNIT, derive(SEED, 1))?;
    let t = Instant::now();
    let report = if cfg.attack.is_some() {
        train_adversarial(&mut model, train, None, cfg)?
    } else {
        train_standard(&mut model, train, None, cfg)?
    };
    let secs = t.elapsed().as_secs_f64();
    for e in &report.epochs {
        eprintln!("  [{tag}] epoch {} loss {:.4} acc {:.4}", e.epoch, e.train_loss, e.train_accuracy);
    }
    sadv::checkpoint::save(&model, &ckpt)?;
    fs::write(&secs_file, format!("{secs}\n"))?;
    Ok(Trained {
        model,
        train_secs: secs,
        cached: false,
    })
}

fn origin(t: &Trained) -> String {
    if t.cached {
        format!("cached; trained in {:.0}s", t.train_secs)
    } else {
        format!("trained in {:.0}s", t.train_secs)
    }
}

fn spgd(steps: usize) -> AttackConfig {
    AttackConfig::spgd(EPS, 100.0, steps, 0.75, ValueRange::UNIT).with_seed(derive(SEED, 30))
}

fn nosign(steps: usize) -> AttackConfig {
    AttackConfig::nosign_pgd(EPS, 100.0, steps, 0.75, ValueRange::UNIT).with_seed(derive(SEED, 30))
}

fn pgd(step_size: f64, steps: usize) -> AttackConfig {
    AttackConfig::pgd(EPS, step_size, steps, ValueRange::UNIT).with_seed(derive(SEED, 31))
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sq_norm(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

fn criterion_3() -> sadv::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(SEED, 40));
    let (mut round_trip, mut parseval) = (0.0f64, 0.0f64);
    for shape in [[1usize, 28, 28], [3, 32, 32]] {
        let plan = SpectralPlan::new(shape[1], shape[2]);
        for _ in 0..100 {
            let x = random_tensor(shape.to_vec(), &mut rng);
            let z = plan.dct2(&x)?;
            round_trip = round_trip.max(max_abs_diff(&plan.idct2(&z)?, &x));
            let (ex, ez) = (sq_norm(&x), sq_norm(&z));
            parseval = parseval.max((ex - ez).abs() / ex);
        }
    }
    let ortho = (2..=64).map(|n| orthogonality_error(&dct_basis(n))).fold(0.0, f64::max);
    Ok((
        round_trip < 1e-10 && parseval < 1e-10 && ortho < 1e-12,
        format!("round-trip {round_trip:.2e} (<1e-10), Parseval {parseval:.2e} (<1e-10), orthogonality {ortho:.2e} (<1e-12)"),
    ))
}

fn contract(g: &mut Graph, node: NodeId) -> sadv::Result<NodeId> {
    let shape = g.value(node).shape().to_vec();
    let w = g.constant(Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.37).sin()))?;
    let p = g.mul(node, w)?;
    g.sum(p)
}

type Builder = Box<dyn Fn(&mut Graph, &[NodeId]) -> sadv::Result<NodeId>>;

fn criterion_4(images: &Dataset) -> sadv::Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(SEED, 41));
    let labels = vec![1usize, 4, 0];
    let basis = std::sync::Arc::new(dct_basis(5));
    let basis_t = std::sync::Arc::new(dct_basis(6));
    let primitives: Vec<(&str, Builder, Vec<Vec<usize>>)> = vec![
        ("add", Box::new(|g, x| { let y = g.add(x[0], x[1])?; contract(g, y) }), vec![vec![3, 4], vec![3, 4]]),
        ("scale", Box::new(|g, x| { let y = g.scale(x[0], -1.7)?; contract(g, y) }), vec![vec![3, 4]]),
        ("mul", Box::new(|g, x| { let y = g.mul(x[0], x[1])?; contract(g, y) }), vec![vec![3, 4], vec![3, 4]]),
        ("matmul", Box::new(|g, x| { let y = g.matmul(x[0], x[1])?; contract(g, y) }), vec![vec![3, 5], vec![5, 2]]),
        ("conv2d p0", Box::new(|g, x| { let y = g.conv2d(x[0], x[1], 0)?; contract(g, y) }), vec![vec![2, 2, 6, 6], vec![3, 2, 3, 3]]),
        ("conv2d p2", Box::new(|g, x| { let y = g.conv2d(x[0], x[1], 2)?; contract(g, y) }), vec![vec![2, 2, 6, 6], vec![3, 2, 5, 5]]),
        ("bias_add", Box::new(|g, x| { let y = g.bias_add(x[0], x[1])?; contract(g, y) }), vec![vec![2, 3, 2, 2], vec![3]]),
        ("relu", Box::new(|g, x| { let y = g.relu(x[0])?; contract(g, y) }), vec![vec![4, 6]]),
        ("max_pool2", Box::new(|g, x| { let y = g.max_pool2(x[0])?; contract(g, y) }), vec![vec![2, 2, 6, 4]]),
        ("reshape", Box::new(|g, x| { let y = g.reshape(x[0], vec![6, 4])?; contract(g, y) }), vec![vec![2, 3, 4]]),
        ("sum", Box::new(|g, x| g.sum(x[0])), vec![vec![3, 3]]),
        ("bilinear", Box::new(move |g, x| { let y = g.bilinear(x[0], basis.clone(), basis_t.clone())?; contract(g, y) }), vec![vec![2, 5, 6]]),
        ("cross_entropy mean", Box::new({ let l = labels.clone(); move |g, x| g.cross_entropy(x[0], &l, Reduction::Mean) }), vec![vec![3, 5]]),
        ("cross_entropy sum", Box::new(move |g, x| g.cross_entropy(x[0], &labels, Reduction::Sum)), vec![vec![3, 5]]),
    ];
    let mut worst = (0.0f64, "");
    let mut total = GradCheck::default();
    for (name, build, shapes) in &primitives {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random_tensor(s.clone(), &mut rng)).collect();
        let r = check_graph_function(build, &inputs, H)?;
        if r.max_rel_error >= worst.0 {
            worst = (r.max_rel_error, name);
        }
        total = total.merge(&r);
    }

    // Full network: untrained weights, every input coordinate of two test
    // images, and sampled coordinates of every parameter tensor.
    let model = Model::new(Architecture::mnist_cnn(), ValueRange::UNIT, derive(SEED, 42))?;
    let batch = images.head(2)?;
    let all: Vec<usize> = (0..batch.images.len()).collect();
    let input = check_input_gradient(&model, &batch.images, &batch.labels, H, &all)?;
    let params = check_parameter_gradient(&model, &batch.images, &batch.labels, H, 20, derive(SEED, 43))?;
    let net = input.max_rel_error.max(params.max_rel_error);
    Ok((
        worst.0 < GRAD_TOL && net < GRAD_TOL && input.checked > 0 && params.checked > 0,
        format!(
            "primitives max {:.2e} ({}; {} coords, {} kinks skipped), CNN input {:.2e} ({} coords, {} skipped), CNN params {:.2e} ({} coords, {} skipped), tol 1e-4",
            worst.0, worst.1, total.checked, total.skipped, input.max_rel_error, input.checked, input.skipped,
            params.max_rel_error, params.checked, params.skipped
        ),
    ))
}

fn criterion_1(model: &Model, test: &Dataset) -> sadv::Result<(bool, String)> {
    let sample = subset(test, 100, derive(SEED, 50))?;
    let plan = SpectralPlan::new(28, 28);
    let mut worst = 0.0f64;
    for i in 0..sample.len() {
        let one = sample.select(&[i])?;
        let r = verify_gradient_transport(model, &plan, &one.images, &one.labels)?;
        worst = worst.max(r.max_rel_error).max(r.scaled_rel_error);
    }
    Ok((worst < 1e-8, format!("max relative error {worst:.2e} over 100 images (<1e-8)")))
}

fn equivalence_csv(model: &Model, eval: &Dataset) -> sadv::Result<(String, f64, f64)> {
    let table = labelled_step_table(model, eval, &[("spgd".into(), spgd(20)), ("nosign_pgd".into(), nosign(20))])?;
    let (mut acc, mut loss) = (0.0f64, 0.0f64);
    for k in 1..=20 {
        let (a, b) = (table.get("spgd", k).expect("row"), table.get("nosign_pgd", k).expect("row"));
        acc = acc.max((a.accuracy - b.accuracy).abs());
        loss = loss.max((a.loss - b.loss).abs());
    }
    Ok((step_table_csv(&table), acc, loss))
}

fn early_step_csv(model: &Model, eval: &Dataset) -> sadv::Result<(String, [f64; 4])> {
    let table = labelled_step_table(model, eval, &[("spgd".into(), spgd(20)), ("pgd".into(), pgd(EPS / 4.0, 20))])?;
    let (s, p) = (table.get("spgd", 1).expect("row"), table.get("pgd", 1).expect("row"));
    Ok((step_table_csv(&table), [s.loss, p.loss, s.accuracy, p.accuracy]))
}

struct HistogramOutcome {
    csv: String,
    spgd_small: f64,
    pgd_small: f64,
    off_grid: usize,
    interior: usize,
}

fn histogram_run(model: &Model, test: &Dataset) -> sadv::Result<HistogramOutcome> {
    let sample = subset(test, 10, derive(SEED, 60))?;
    let plan = SpectralPlan::new(28, 28);
    let s = run_attack(model, &sample.images, &sample.labels, &spgd(1), Some(&plan))?;
    let p = run_attack(model, &sample.images, &sample.labels, &pgd(EPS, 1), None)?;

    let alpha = EPS / 4.0;
    let q = run_attack(model, &sample.images, &sample.labels, &pgd(alpha, 1).with_random_init(false), None)?;
    let a = alpha.min(EPS);
    let (mut off_grid, mut interior) = (0, 0);
    for (&x, &adv) in q.natural.data().iter().zip(q.adversarial(1).data()) {
        // Only components the value-range clamp cannot touch. The grid is
        // checked on x′ itself since x′ − x carries rounding.
        if x >= a && x <= 1.0 - a {
            interior += 1;
            if ![x - a, x, x + a].contains(&adv) {
                off_grid += 1;
            }
        }
    }

    let small = |t: &PerturbationTrace| fraction_below(&t.perturbation(1).data().iter().map(|v| v.abs()).collect::<Vec<_>>(), 0.5 * EPS);
    let mut hists = component_histograms(&s, DEFAULT_BINS)?;
    hists.extend(component_histograms(&p, DEFAULT_BINS)?);
    hists.extend(component_histograms(&q, DEFAULT_BINS)?);
    Ok(HistogramOutcome {
        csv: histograms_csv(&hists),
        spgd_small: small(&s),
        pgd_small: small(&p),
        off_grid,
        interior,
    })
}

fn threat_model(model: &Model, test: &Dataset) -> sadv::Result<(bool, String)> {
    let sample = subset(test, 20, derive(SEED, 70))?;
    let plan = SpectralPlan::new(28, 28);
    let mut violations = 0;
    let mut examples = 0;
    let methods = [Method::Fgsm, Method::Pgd, Method::MomentumPgd, Method::Spgd, Method::NosignPgd];
    for method in methods {
        for s in 0..10u64 {
            let seed = derive(SEED, 100 + s);
            let cfg = match method {
                Method::Fgsm => AttackConfig::fgsm(EPS, EPS, ValueRange::UNIT),
                Method::Pgd => AttackConfig::pgd(EPS, 0.05, 20, ValueRange::UNIT),
                Method::MomentumPgd => AttackConfig::momentum_pgd(EPS, 0.05, 20, 0.9, ValueRange::UNIT),
                Method::Spgd => AttackConfig::spgd(EPS, 100.0, 20, 0.75, ValueRange::UNIT),
                Method::NosignPgd => AttackConfig::nosign_pgd(EPS, 100.0, 20, 0.75, ValueRange::UNIT),
            }
            .with_seed(seed);
            let trace = run_attack(model, &sample.images, &sample.labels, &cfg, Some(&plan))?;
            violations += trace.violations(ValueRange::UNIT, 1e-9);
            examples += trace.len() * sample.len();
        }
    }
    Ok((violations == 0, format!("{violations} violations over {examples} adversarial examples (5 methods x 10 seeds)")))
}

fn main() {
    let mut r = Runner { lines: Vec::new() };
    let start = Instant::now();
    println!("acceptance: seed {SEED}, MNIST from {}", mnist_dir().display());

    r.run("criterion 3", criterion_3);

    let data = load_mnist_split(mnist_dir(), "train").and_then(|train| Ok((train, load_mnist_split(mnist_dir(), "t10k")?)));
    let (train_full, test_full) = match data {
        Ok(d) => d,
        Err(e) => {
            for id in [1, 2, 4, 5, 6, 7, 8, 9, 10] {
                r.run(&format!("criterion {id}"), || Ok((false, format!("MNIST unavailable: {e}"))));
            }
            finish(&r, start);
        }
    };
    let train = subset(&train_full, TRAIN_SIZE, derive(SEED, 3)).expect("train subset");
    let eval = subset(&test_full, EVAL_SIZE, derive(SEED, 4)).expect("eval subset");
    drop(train_full);

    r.run("criterion 4", || criterion_4(&eval));

    let std_cfg = TrainConfig {
        epochs: STD_EPOCHS,
        batch_size: STD_BATCH,
        seed: derive(SEED, 2),
        ..TrainConfig::default()
    };
    let adv_cfg = |attack: AttackConfig| TrainConfig {
        epochs: ADV_EPOCHS,
        batch_size: ADV_BATCH,
        attack: Some(attack.with_seed(derive(SEED, 5))),
        seed: derive(SEED, 2),
        ..TrainConfig::default()
    };
    let spgd_train = AttackConfig::spgd(EPS, 100.0, 20, 0.75, ValueRange::UNIT);
    let pgd_train = AttackConfig::pgd(EPS, 0.01, 20, ValueRange::UNIT);

    let standard = trained("standard", &train, &std_cfg);
    let pgd_model = trained("pgd20", &train, &adv_cfg(pgd_train));
    let spgd_model = trained("spgd20", &train, &adv_cfg(spgd_train));

    let (standard, pgd_model, spgd_model) = match (standard, pgd_model, spgd_model) {
        (Ok(a), Ok(b), Ok(c)) => (a, b, c),
        (a, b, c) => {
            let msg = [a.err(), b.err(), c.err()].into_iter().flatten().map(|e| e.to_string()).collect::<Vec<_>>().join("; ");
            r.run("training", || Ok((false, msg)));
            finish(&r, start);
        }
    };

    r.run("criterion 1", || criterion_1(&standard.model, &test_full));

    let mut csvs = Vec::new();
    r.run("criterion 2", || {
        let (csv, acc, loss) = equivalence_csv(&pgd_model.model, &eval)?;
        csvs.push(("equivalence", csv));
        Ok((acc <= 0.005 && loss <= 0.005, format!("max per-step gap: accuracy {:.3} pp (<=0.5), loss {loss:.2e} (<=0.005)", acc * 100.0)))
    });

    r.run("criterion 5", || threat_model(&pgd_model.model, &test_full));

    r.run("criterion 6", || {
        let (csv, [sl, pl, sa, pa]) = early_step_csv(&pgd_model.model, &eval)?;
        csvs.push(("early_step", csv));
        Ok((sl > pl && sa < pa, format!("step 1 loss SPGD {sl:.4} vs PGD(eps/4) {pl:.4}, accuracy {:.2}% vs {:.2}%", sa * 100.0, pa * 100.0)))
    });

    r.run("criterion 7", || {
        let t = Instant::now();
        let attack = pgd(0.01, 100);
        let res = |m: &Model| -> sadv::Result<(EvalResult, EvalResult)> { Ok((evaluate(m, &eval, None)?, evaluate(m, &eval, Some(&attack))?)) };
        let (sn, sr) = res(&spgd_model.model)?;
        let (pn, pr) = res(&pgd_model.model)?;
        let total = spgd_model.train_secs + pgd_model.train_secs + t.elapsed().as_secs_f64();
        Ok((
            sr.accuracy >= pr.accuracy && sn.accuracy >= 0.97 && pn.accuracy >= 0.97 && total <= 3600.0,
            format!(
                "PGD-100 robust SPGD-trained {:.2}% vs PGD-trained {:.2}%; natural {:.2}% / {:.2}% (>=97%); {total:.0}s incl. training (<=3600s; {}, {})",
                sr.accuracy * 100.0, pr.accuracy * 100.0, sn.accuracy * 100.0, pn.accuracy * 100.0, origin(&spgd_model), origin(&pgd_model)
            ),
        ))
    });

    r.run("criterion 8", || {
        let h = histogram_run(&pgd_model.model, &test_full)?;
        csvs.push(("histograms", h.csv));
        Ok((
            h.spgd_small > h.pgd_small && h.off_grid == 0 && h.interior > 0,
            format!(
                "fraction |d|<eps/2 SPGD {:.4} vs PGD(alpha=eps) {:.4}; {} of {} interior no-init PGD components off the sign grid",
                h.spgd_small, h.pgd_small, h.off_grid, h.interior
            ),
        ))
    });

    r.run("criterion 9", || {
        let half = eval.head(500)?;
        let grid = [0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let curve = security_curve(&pgd_model.model, "pgd20", &half, &pgd(0.01, 100), &grid)?;
        let natural = evaluate(&pgd_model.model, &half, None)?.accuracy;
        let pts = curve.accuracies.iter().map(|a| format!("{:.1}", a * 100.0)).collect::<Vec<_>>().join(" ");
        Ok((
            curve.max_increase() <= 0.01 && curve.accuracies[0] == natural,
            format!("max increase {:.2} pp (<=1), eps=0 point {} natural; curve % [{pts}]", curve.max_increase() * 100.0, if curve.accuracies[0] == natural { "==" } else { "!=" }),
        ))
    });

    r.run("criterion 10", || {
        let out = cache_dir().join("csv");
        let (eq, _, _) = equivalence_csv(&pgd_model.model, &eval)?;
        let (early, _) = early_step_csv(&pgd_model.model, &eval)?;
        let hist = histogram_run(&pgd_model.model, &test_full)?.csv;
        let again = [("equivalence", eq), ("early_step", early), ("histograms", hist)];
        let mut same = csvs.len() == again.len();
        for ((name, a), (_, b)) in csvs.iter().zip(&again) {
            fs::create_dir_all(&out)?;
            fs::write(out.join(format!("{name}_1.csv")), a)?;
            fs::write(out.join(format!("{name}_2.csv")), b)?;
            same &= a.as_bytes() == b.as_bytes();
        }
        Ok((same, format!("{} CSVs from criteria 2, 6, 8 byte-identical on rerun: {same}", csvs.len())))
    });

    r.run("supplement a", || {
        let acc = evaluate(&standard.model, &eval, None)?.accuracy;
        Ok((acc >= 0.97, format!("standard training, {STD_EPOCHS} epochs: natural {:.2}% (>=97%; {})", acc * 100.0, origin(&standard))))
    });

    r.run("supplement b", || {
        let attack = pgd(0.01, 20);
        let (adv, std) = (evaluate(&pgd_model.model, &eval, Some(&attack))?, evaluate(&standard.model, &eval, Some(&attack))?);
        Ok((
            adv.accuracy >= std.accuracy,
            format!("PGD-20 at eps 0.3: adversarially trained {:.2}% >= standard {:.2}%", adv.accuracy * 100.0, std.accuracy * 100.0),
        ))
    });

    finish(&r, start);
}

fn finish(r: &Runner, start: Instant) -> ! {
    let failed = r.lines.iter().filter(|l| !l.passed).count();
    println!();
    for l in &r.lines {
        println!("{}", render(l));
    }
    println!("acceptance: {} passed, {failed} failed in {:.0}s", r.lines.len() - failed, start.elapsed().as_secs_f64());
    std::process::exit(if failed == 0 { 0 } else { 1 });
}
