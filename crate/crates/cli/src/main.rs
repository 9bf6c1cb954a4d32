use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use eddyseg_core::checkpoint::{self, InputPipeline};
use eddyseg_core::data::{read_sample, Manifest, Split};
use eddyseg_core::gradsuite::{run_suite, SuiteOptions, OPS};
use eddyseg_core::loss::{argmax_classes, LossKind, LossReport, Metrics};
use eddyseg_core::net::SIZE_MULTIPLE;
use eddyseg_core::synth::{gen_dataset, DatasetConfig, FieldConfig};
use eddyseg_core::train::{evaluate, parse_channels, train_from_manifest, write_history_csv, Dataset, TrainConfig};

mod pgm;

/// Mesoscale eddy segmentation: synthetic data, training and inference.
#[derive(Parser)]
#[command(name = "eddyseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Gen(GenArgs),
    /// Train a network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset; prints JSON.
    Eval(EvalArgs),
    /// Segment one sample into a PGM mask.
    Segment(SegmentArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

fn patch_size(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v == 0 || v % SIZE_MULTIPLE != 0 {
        return Err(format!("must be a positive multiple of {SIZE_MULTIPLE}"));
    }
    Ok(v)
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n_train: u64,
    #[arg(long, default_value_t = 0)]
    n_test: u64,
    #[arg(long, default_value = "64", value_parser = patch_size)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Eddies per 64x64 area, as MIN,MAX.
    #[arg(long, value_parser = parse_range::<usize>)]
    eddies: Option<(usize, usize)>,
    /// Eddy radius range in cells, as MIN,MAX.
    #[arg(long, value_parser = parse_range::<f64>)]
    radius: Option<(f64, f64)>,
    /// SSH amplitude range in metres, as MIN,MAX.
    #[arg(long, value_parser = parse_range::<f64>)]
    amplitude: Option<(f64, f64)>,
    /// Noise std as a fraction of each channel's clean std.
    #[arg(long)]
    noise: Option<f64>,
    /// SST response to SSH, °C per metre.
    #[arg(long)]
    sst_coupling: Option<f64>,
    /// Geostrophic factor relating SSH slope to velocity.
    #[arg(long)]
    geostrophic: Option<f64>,
}

fn parse_range<T: std::str::FromStr>(s: &str) -> Result<(T, T), String>
where
    T::Err: std::fmt::Display,
{
    let (a, b) = s.split_once(',').ok_or("expected MIN,MAX")?;
    let p = |v: &str| v.trim().parse::<T>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Combined,
    Ce,
    Dice,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Combined => LossKind::Combined,
            LossArg::Ce => LossKind::CeOnly,
            LossArg::Dice => LossKind::DiceOnly,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.json
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "combined")]
    loss: LossArg,
    /// Comma-separated subset of ssh, sst, u, v (uv selects both velocity components).
    #[arg(long, default_value = "ssh,sst,uv")]
    channels: String,
    #[arg(long, value_enum, default_value = "on")]
    dilation: Switch,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    epochs: u64,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-30)]
    min_lr: f64,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint path (best validation loss).
    #[arg(long)]
    out: PathBuf,
    /// Defaults to history.csv beside the checkpoint.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    batch: u64,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    instances: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the analytic gradient of one op to check that the suite fails.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Segment(a) => segment(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
    .map(|ok| if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn gen(a: GenArgs) -> Result<bool> {
    let mut field = FieldConfig::default();
    if let Some(r) = a.eddies {
        field.eddies = r;
    }
    if let Some(r) = a.radius {
        field.radius = r;
    }
    if let Some(r) = a.amplitude {
        field.amplitude = r;
    }
    if let Some(n) = a.noise {
        field.noise = [n; 4];
    }
    if let Some(c) = a.sst_coupling {
        field.sst_coupling = c;
    }
    if let Some(c) = a.geostrophic {
        field.geostrophic = c;
    }
    let mut cfg = DatasetConfig::new(a.size, a.n_train as usize, a.n_test as usize, a.seed);
    cfg.field = field.scaled_to(a.size * cfg.parent_scale, a.size * cfg.parent_scale);
    let manifest = gen_dataset(&cfg, &a.out).with_context(|| format!("generating into {}", a.out.display()))?;
    println!(
        "wrote {} train + {} test samples ({}x{}) to {}",
        manifest.splits.train,
        manifest.splits.test,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(true)
}

fn train(a: TrainArgs) -> Result<bool> {
    let cfg = TrainConfig {
        lr0: a.lr,
        min_lr: a.min_lr,
        batch: a.batch as usize,
        epochs: a.epochs as usize,
        loss: a.loss.into(),
        patience: a.patience,
        seed: a.seed,
        channels: parse_channels(&a.channels)?,
        dilation: matches!(a.dilation, Switch::On),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let quiet = a.quiet;
    let (outcome, pipeline) = train_from_manifest(&cfg, &a.data, |r| {
        if !quiet {
            eprintln!(
                "epoch {:>3}/{}  loss {:.4}  ce {:.4}  dice_loss {:.4}  train_acc {:.4}  val_acc {:.4}  lr {:.1e}",
                r.epoch, cfg.epochs, r.loss, r.ce, r.dice_loss, r.train_acc, r.val_acc, r.lr
            );
        }
    })?;
    checkpoint::save(&a.out, &outcome.best, &pipeline)?;
    let history = a
        .history
        .unwrap_or_else(|| a.out.parent().unwrap_or(Path::new(".")).join("history.csv"));
    let mut buf = Vec::new();
    write_history_csv(&outcome.history, &mut buf)?;
    fs::write(&history, buf).with_context(|| format!("writing {}", history.display()))?;
    println!(
        "best validation loss {:.6}; checkpoint {}; history {}",
        outcome.best_val_loss,
        a.out.display(),
        history.display()
    );
    Ok(true)
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    samples: usize,
    majority_baseline: f64,
    #[serde(flatten)]
    metrics: Metrics,
    #[serde(flatten)]
    loss: LossReport,
}

fn eval(a: EvalArgs) -> Result<bool> {
    let (net, pipeline) = checkpoint::load(&a.weights)?;
    let manifest = Manifest::load(&a.data)?;
    let dir = a.data.parent().unwrap_or(Path::new("."));
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let samples = manifest.read_split(dir, split)?;
    let data = Dataset::new(&samples, &pipeline.stats, &pipeline.channels)?;
    let result = evaluate(&net, &data, a.batch as usize, &split.to_string())?;
    let report = EvalReport {
        split: split.to_string(),
        samples: data.len(),
        majority_baseline: data.majority_fraction(),
        metrics: result.metrics,
        loss: result.loss,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(true)
}

fn segment(a: SegmentArgs) -> Result<bool> {
    let (net, InputPipeline { channels, stats }) = checkpoint::load(&a.weights)?;
    let sample = read_sample(&a.input)?;
    let (h, w) = (sample.height(), sample.width());
    if h % SIZE_MULTIPLE != 0 || w % SIZE_MULTIPLE != 0 {
        bail!("{h}x{w} input: height and width must be multiples of {SIZE_MULTIPLE}");
    }
    let data = Dataset::new(std::slice::from_ref(&sample), &stats, &channels)?;
    let (x, _) = data.batch(&[0]);
    let probs = net.predict(&x)?;
    let classes = argmax_classes(&probs);
    let pixels: Vec<u8> = classes.iter().map(|&c| pgm::gray_of_class(c)).collect();
    fs::write(&a.out, pgm::encode(w, h, &pixels)).with_context(|| format!("writing {}", a.out.display()))?;
    let sidecar = a.out.with_extension("json");
    let info = pgm::MaskInfo::new(w, h, &classes);
    fs::write(&sidecar, serde_json::to_string_pretty(&info)? + "\n")
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!("{}", serde_json::to_string(&info.counts)?);
    Ok(true)
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    if let Some(op) = &a.inject_fault {
        if !OPS.contains(&op.as_str()) {
            bail!("unknown op {op:?}; expected one of {}", OPS.join(", "));
        }
    }
    let opts = SuiteOptions {
        instances: a.instances as usize,
        seed: a.seed,
        inject_fault: a.inject_fault,
        ..SuiteOptions::default()
    };
    let report = run_suite(&opts)?;
    println!("{:<18} {:>9} {:>8} {:>12} {:>8}  result", "op", "instances", "checked", "max_rel_err", "tol");
    for r in &report.ops {
        println!(
            "{:<18} {:>9} {:>8} {:>12.3e} {:>8.0e}  {}",
            r.op,
            r.instances,
            r.checked,
            r.max_rel_err,
            r.tol,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    println!("{}", if report.pass { "all ops pass" } else { "gradient check FAILED" });
    Ok(report.pass)
}
