//! `mmseg`: generate synthetic data, train, evaluate, export and run the
//! toy-scale experiments. Set `RUST_LOG=info` (or `debug`) for progress.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mmseg_autodiff::{suite, GradCheck};
use mmseg_core::gradsuite;
use mmseg_core::synthdata::{load_dataset, make_unpaired_dataset, DatasetSpec, Split, MANIFEST};
use mmseg_core::train::experiments::{self, Protocol};
use mmseg_core::train::strip::removable_count;
use mmseg_core::train::{self, strip_eam, Checkpoint, TrainConfig, TrainVariant};

#[derive(Parser)]
#[command(name = "mmseg", version, about = "Unpaired multi-modal segmentation with a shared transformer U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic bimodal dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Samples per modality (split 70/10/20).
        #[arg(long, default_value_t = 20)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model.
    Train(TrainArgs),
    /// Evaluate a checkpoint or stripped model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for metrics.csv and metrics.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export an inference model without the external attention branch.
    Strip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        composite_trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the variant grid over several seeds and print a comparison table.
    Ablate {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated variant labels.
        #[arg(long, value_delimiter = ',', default_value = "joint-v1,joint-v2,joint-v3,joint-v3-cr")]
        variants: Vec<String>,
    },
    /// Consistency loss (and optionally Dice) across temperatures.
    SweepTau {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        taus: Vec<f64>,
        /// Also train the full model at every temperature.
        #[arg(long)]
        train: bool,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CSV loss log path.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Training samples per modality, e.g. `14,1`.
    #[arg(long, value_delimiter = ',')]
    few_shot: Option<Vec<usize>>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 4e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    samples: usize,
}

impl ExperimentArgs {
    fn protocol(&self) -> Protocol {
        let mut base = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            ..Default::default()
        };
        base.optimizer.lr = self.lr;
        Protocol::new(base, self.samples, self.seeds)
    }
}

fn parse_variant(s: &str) -> Result<TrainVariant> {
    TrainVariant::parse(s).with_context(|| {
        let known: Vec<_> = TrainVariant::ALL.iter().map(|v| v.label()).collect();
        format!("unknown variant `{s}` (expected one of {})", known.join(", "))
    })
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(d) = &a.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.checkpoint_path = Some(o.clone());
    }
    if let Some(l) = &a.log {
        cfg.log_path = Some(l.clone());
    }
    if let Some(v) = &a.variant {
        cfg.variant = parse_variant(v)?;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.few_shot.is_some() {
        cfg.few_shot = a.few_shot.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(a)?;
    let started = Instant::now();
    let out = match &a.resume {
        None => train::train(&cfg)?,
        Some(p) => {
            if !cfg.data_dir.join(MANIFEST).exists() {
                bail!("no dataset at {} (run gen-data first)", cfg.data_dir.display());
            }
            let ds = load_dataset(&cfg.data_dir)?;
            train::train_on(&cfg, &ds, Some(Checkpoint::load(p)?))?
        }
    };
    let last = out.log.last().map_or(f64::NAN, |r| r.loss.total);
    println!(
        "trained {} to step {} in {:.1}s, final loss {last:.4}",
        cfg.variant.label(),
        out.checkpoint.step,
        started.elapsed().as_secs_f64()
    );
    if let Some(p) = &cfg.checkpoint_path {
        println!("checkpoint: {}", p.display());
    }
    Ok(())
}

fn run_strip(model: &Path, out: &Path) -> Result<()> {
    let full = Checkpoint::load(model)?;
    let lean = strip_eam(&full)?;
    lean.save(out)?;
    let size = |p: &Path| std::fs::metadata(p).map(|m| m.len()).unwrap_or(0);
    println!(
        "removed {} parameters ({} -> {}), {} -> {} bytes",
        removable_count(&full),
        full.store.param_count(),
        lean.store.param_count(),
        size(model),
        size(out)
    );
    Ok(())
}

fn run_grad_check(trials: usize, composite_trials: usize, seed: u64) -> Result<bool> {
    let check = GradCheck::default();
    let started = Instant::now();
    let mut ok = true;
    println!("{:<26} {:>6} {:>12} {:>7}", "check", "trials", "max rel err", "status");
    for o in suite::run_primitive_suite(trials, seed, &check)? {
        ok &= o.passed();
        let status = if o.passed() { "ok" } else { "FAILED" };
        println!("{:<26} {:>6} {:>12.3e} {:>7}", o.name, o.trials, o.max_rel_error, status);
    }
    for o in gradsuite::run_composite_suite(composite_trials, seed, &check)? {
        ok &= o.passed();
        let status = if o.passed() { "ok" } else { "FAILED" };
        println!("{:<26} {:>6} {:>12.3e} {:>7}", o.name, o.trials, o.max_rel_error, status);
    }
    println!(
        "{} in {:.1}s",
        if ok { "all checks passed" } else { "some checks failed" },
        started.elapsed().as_secs_f64()
    );
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, samples, seed } => {
            let ds = make_unpaired_dataset(&DatasetSpec::bimodal(samples, seed), &out)?;
            println!("wrote {} samples to {}", ds.records.len(), out.display());
        }
        Command::Train(a) => run_train(&a)?,
        Command::Eval { model, data, split, out } => {
            let split = Split::parse(&split).with_context(|| format!("unknown split `{split}`"))?;
            let report = train::evaluate(&model, &data, split, out.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Strip { model, out } => run_strip(&model, &out)?,
        Command::GradCheck {
            trials,
            composite_trials,
            seed,
        } => return run_grad_check(trials, composite_trials, seed),
        Command::Ablate { exp, variants } => {
            let variants = variants.iter().map(|v| parse_variant(v)).collect::<Result<Vec<_>>>()?;
            let rows = experiments::ablate(&exp.protocol(), &variants)?;
            print!("{}", experiments::comparison_table(&rows));
        }
        Command::SweepTau { taus, train, exp } => {
            let protocol = exp.protocol();
            let points = experiments::sweep_tau(&taus, 32, train.then_some(&protocol))?;
            print!("{}", experiments::tau_table(&points));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
