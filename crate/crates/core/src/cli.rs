//! `sadv` command line: train, attack, eval, verify and report from one
//! config file.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 a verification check exceeded its threshold.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{labelled_step_table, band_energies, component_histograms, gradient_heatmaps, security_curve};
use crate::attacks::{run_attack, AttackConfig};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::report::{self, format_g17, write_artifact};
use crate::spectral::SpectralPlan;
use crate::training::{evaluate, train_adversarial, train_standard};
use crate::verify::{run_verification, VerifyOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sadv", version, about = "Spectral and pixel-domain l-infinity attacks and adversarial training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(Common),
    /// Run the configured attacks and write a step table and traces.
    Attack(Common),
    /// Natural and adversarial accuracy of a checkpoint.
    Eval(Common),
    /// Numerical checks of the DCT, gradient transport and autodiff.
    Verify(Common),
    /// Step tables, security curves, histograms and heatmaps.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to read (or, for `train`, to write).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory; overrides `report.out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

enum Failure {
    Config(String),
    Runtime(String),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            EXIT_VERIFY
        }
    }
}

struct Context {
    cfg: RunConfig,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
}

fn prepare(c: Common) -> Result<Context, Failure> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(t) = c.threads.or(cfg.threads) {
        if t == 0 {
            return Err(Failure::Config("--threads must be at least 1".into()));
        }
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let out = c.out.unwrap_or_else(|| cfg.resolve(&cfg.report.out_dir));
    Ok(Context {
        cfg,
        checkpoint: c.checkpoint,
        out,
    })
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(c) => cmd_train(&prepare(c)?),
        Command::Attack(c) => cmd_attack(&prepare(c)?),
        Command::Eval(c) => cmd_eval(&prepare(c)?),
        Command::Verify(c) => cmd_verify(&prepare(c)?),
        Command::Report(c) => cmd_report(&prepare(c)?),
    }
}

fn load_model(ctx: &Context) -> Result<Model, Failure> {
    let path = ctx
        .checkpoint
        .as_ref()
        .ok_or_else(|| Failure::Config("--checkpoint is required for this command".into()))?;
    Ok(checkpoint::load(path)?)
}

fn test_head(test: &Dataset, n: usize) -> Result<Dataset> {
    test.head(n.min(test.len()))
}

fn cmd_train(ctx: &Context) -> Result<(), Failure> {
    let (train, test) = ctx.cfg.load_data()?;
    let mut model = Model::new(ctx.cfg.architecture()?, train.value_range, ctx.cfg.model_seed())?;
    let ckpt = ctx.checkpoint.clone().unwrap_or_else(|| ctx.out.join("model.ckpt"));
    let tc = ctx.cfg.train_config(Some(ckpt.clone()));
    let validation = ctx.cfg.train.validate.then_some(&test);
    let report = if tc.attack.is_some() {
        train_adversarial(&mut model, &train, validation, &tc)?
    } else {
        train_standard(&mut model, &train, validation, &tc)?
    };
    // Zero epochs still leave a loadable checkpoint.
    checkpoint::save(&model, &ckpt)?;
    write_artifact(ctx.out.join("training.csv"), &report::training_csv(&report))?;
    if let Some(last) = report.epochs.last() {
        println!("epoch {} train accuracy {:.4}", last.epoch, last.train_accuracy);
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_attack(ctx: &Context) -> Result<(), Failure> {
    let model = load_model(ctx)?;
    let (_, test) = ctx.cfg.load_data()?;
    let names = &ctx.cfg.attack.attacks;
    let cfgs = named_attacks(&ctx.cfg, names)?;
    let table = labelled_step_table(&model, &test, &cfgs)?;
    write_artifact(ctx.out.join("step_table.csv"), &report::step_table_csv(&table))?;
    let sample = test_head(&test, ctx.cfg.attack.trace_images)?;
    let plan = plan_for(&sample);
    for (name, cfg) in &cfgs {
        let trace = run_attack(&model, &sample.images, &sample.labels, cfg, Some(&plan))?;
        if cfg.epsilon > 0.0 {
            let hists = component_histograms(&trace, ctx.cfg.report.bins)?;
            write_artifact(ctx.out.join(format!("trace_{name}.csv")), &report::histograms_csv(&hists))?;
        }
        if let Some(last) = table.rows_of(name).last() {
            println!("{name}: accuracy {:.4} loss {:.4} after {} steps", last.accuracy, last.loss, last.step);
        }
    }
    Ok(())
}

fn named_attacks(cfg: &RunConfig, names: &[String]) -> Result<Vec<(String, AttackConfig)>> {
    names.iter().map(|n| Ok((n.clone(), cfg.attack_config(n)?))).collect()
}

fn plan_for(ds: &Dataset) -> SpectralPlan {
    let [_, h, w] = ds.sample_shape();
    SpectralPlan::new(h, w)
}

fn cmd_eval(ctx: &Context) -> Result<(), Failure> {
    let model = load_model(ctx)?;
    let (_, test) = ctx.cfg.load_data()?;
    let mut csv = String::from("attack,accuracy,mean_loss\n");
    let natural = evaluate(&model, &test, None)?;
    writeln!(csv, "natural,{},{}", format_g17(natural.accuracy), format_g17(natural.mean_loss)).unwrap();
    println!("natural: accuracy {:.4}", natural.accuracy);
    for name in &ctx.cfg.eval.attacks {
        let r = evaluate(&model, &test, Some(&ctx.cfg.attack_config(name)?))?;
        writeln!(csv, "{name},{},{}", format_g17(r.accuracy), format_g17(r.mean_loss)).unwrap();
        println!("{name}: accuracy {:.4}", r.accuracy);
    }
    write_artifact(ctx.out.join("eval.csv"), &csv)?;
    Ok(())
}

fn cmd_verify(ctx: &Context) -> Result<(), Failure> {
    let (_, test) = ctx.cfg.load_data()?;
    let model = match &ctx.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => Model::new(ctx.cfg.architecture()?, test.value_range, ctx.cfg.model_seed())?,
    };
    let v = &ctx.cfg.verify;
    let attack = match &v.attack {
        Some(name) => ctx.cfg.attack_config(name)?,
        None => crate::attacks::AttackConfig::spgd(
            crate::attacks::defaults::MNIST_EPSILON,
            crate::attacks::defaults::MNIST_SPGD_STEP,
            crate::attacks::defaults::EVALUATION_STEPS,
            crate::attacks::defaults::SPGD_MOMENTUM,
            test.value_range,
        ),
    };
    let sample = test_head(&test, v.images)?;
    let opts = VerifyOptions {
        attack,
        gradcheck_coords: v.gradcheck_coords,
        gradcheck_params: v.gradcheck_params,
        corrupt_basis: v.corrupt_basis,
        seed: ctx.cfg.seed,
    };
    let rep = run_verification(&model, &sample.images, &sample.labels, &opts)?;
    let text = rep.to_string();
    write_artifact(ctx.out.join("verify.csv"), &text)?;
    print!("{text}");
    if rep.passed() {
        Ok(())
    } else {
        let failed: Vec<_> = rep.checks.iter().filter(|c| !c.passed()).map(|c| c.name).collect();
        Err(Failure::Verify(failed.join(", ")))
    }
}

fn cmd_report(ctx: &Context) -> Result<(), Failure> {
    let model = load_model(ctx)?;
    let (_, test) = ctx.cfg.load_data()?;
    let r = &ctx.cfg.report;
    let out = &ctx.out;
    if !r.step_table.is_empty() {
        let table = labelled_step_table(&model, &test, &named_attacks(&ctx.cfg, &r.step_table)?)?;
        write_artifact(out.join("step_table.csv"), &report::step_table_csv(&table))?;
    }
    if !r.security_curve.is_empty() {
        let label = ctx
            .checkpoint
            .as_deref()
            .and_then(Path::file_stem)
            .map(|s| s.to_string_lossy().replace(',', "_"))
            .unwrap_or_else(|| "model".into());
        let curves = r
            .security_curve
            .iter()
            .map(|n| {
                let mut c = security_curve(&model, &label, &test, &ctx.cfg.attack_config(n)?, &r.epsilons)?;
                c.attack = n.clone();
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        write_artifact(out.join("security_curve.csv"), &report::security_curves_csv(&curves))?;
    }
    let sample = test_head(&test, r.histogram_images)?;
    let plan = plan_for(&test);
    let mut all = Vec::new();
    for name in &r.histograms {
        let cfg = ctx.cfg.attack_config(name)?;
        let trace = run_attack(&model, &sample.images, &sample.labels, &cfg, Some(&plan))?;
        let hists = component_histograms(&trace, r.bins)?;
        for h in &hists {
            write_artifact(out.join(format!("hist_{name}_step{:02}.svg", h.step)), &report::histogram_svg(h))?;
        }
        all.extend(hists);
    }
    if !all.is_empty() {
        write_artifact(out.join("histograms.csv"), &report::histograms_csv(&all))?;
    }
    if r.heatmap_images > 0 {
        let maps = test_head(&test, r.heatmap_images)?;
        let mut bands = String::from("image,label,band1,band2,band3,band4\n");
        for i in 0..maps.len() {
            let x = maps.images.slice_batch(i, i + 1)?;
            let h = gradient_heatmaps(&model, &x, maps.labels[i], &plan)?;
            write_artifact(out.join(format!("heatmap_{i}_pixel.svg")), &report::heatmap_svg(&h.pixel_grad, "pixel gradient")?)?;
            write_artifact(out.join(format!("heatmap_{i}_freq.svg")), &report::heatmap_svg(&h.freq_grad, "DCT gradient")?)?;
            let e = band_energies(&h.freq_grad)?;
            writeln!(bands, "{i},{},{}", maps.labels[i], e.map(format_g17).join(",")).unwrap();
        }
        write_artifact(out.join("band_energy.csv"), &bands)?;
    }
    println!("reports written to {}", out.display());
    Ok(())
}
