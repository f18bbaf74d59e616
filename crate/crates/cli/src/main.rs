use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use logn_core::bench::{self, BenchConfig, StatsMode, StatsPass, Task};
use logn_core::calibrate::{finalize, BetaMode};
use logn_core::format::{self, read_dataset, read_dump, read_json, write_json, write_text, DumpFormat, StatsFile};
use logn_core::pipeline::{self, apply_to_dump, render_pipeline_table, PipelineConfig};
use logn_core::stats::{DEFAULT_EPS, DEFAULT_MOMENTUM};
use logn_core::synth::{repeat_factor_oversample, SynthSpec};
use logn_core::trainer::{predict_logits, train, ModelParams, OnlineLogn, TrainConfig};
use logn_core::verify;

#[derive(Parser)]
#[command(name = "logn", version, about = "Post-hoc logit normalization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tail dataset
    Gen(GenArgs),
    /// Train a softmax classifier on a dataset
    Train(TrainArgs),
    /// Write a model's logits on a dataset
    Dump(DumpArgs),
    /// Accumulate per-class logit statistics from a dump
    Stats(StatsArgs),
    /// Turn statistics into calibration parameters
    Finalize(FinalizeArgs),
    /// Apply finalized calibration to a dump
    Apply(ApplyArgs),
    /// Finalize and apply in one step
    Calibrate(CalibrateArgs),
    /// Score a dump
    Eval(EvalArgs),
    /// Run the identity and inequality suites
    Verify(VerifyArgs),
    /// Beta-mode and momentum grids on a benchmark, as CSV
    Sweep(SweepArgs),
    /// Run the whole pipeline from a JSON config
    Run {
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Detection,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => Task::Classification,
            TaskArg::Detection => Task::Detection,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Ndjson,
}

fn dump_format(arg: Option<FormatArg>, path: &Path) -> DumpFormat {
    match arg {
        Some(FormatArg::Binary) => DumpFormat::Binary,
        Some(FormatArg::Ndjson) => DumpFormat::Ndjson,
        None => DumpFormat::from_path(path),
    }
}

/// How to read the background slot of NDJSON dumps.
#[derive(Args)]
struct BackgroundArgs {
    /// Background slot of text dumps (binary dumps carry it in the header)
    #[arg(long, default_value_t = 0)]
    bg_index: usize,
    /// Text dumps have no background slot
    #[arg(long, conflicts_with = "bg_index")]
    no_background: bool,
}

impl BackgroundArgs {
    fn get(&self) -> Option<usize> {
        (!self.no_background).then_some(self.bg_index)
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
    task: TaskArg,
    /// Read the generator spec from JSON instead of flags
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    num_classes: usize,
    #[arg(long, default_value_t = 32)]
    feature_dim: usize,
    #[arg(long, default_value_t = 500)]
    max_count: u64,
    #[arg(long, default_value_t = 100.0)]
    imbalance_ratio: f64,
    #[arg(long, default_value_t = 4.0)]
    class_sep: f64,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    /// Background proposals per foreground proposal (detection only)
    #[arg(long, default_value_t = 10.0)]
    bg_multiplier: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    bg_index: usize,
    /// Sample stream; splits share class means
    #[arg(long, default_value_t = 0)]
    split: u64,
    /// Repeat-factor oversampling threshold
    #[arg(long)]
    oversample: Option<f64>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Per-epoch loss CSV
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Width of a ReLU hidden layer
    #[arg(long)]
    hidden: Option<usize>,
    /// Train with the online inverse transform using this beta mode
    #[arg(long)]
    online_beta_mode: Option<BetaMode>,
    #[arg(long, default_value_t = 100)]
    warmup_steps: usize,
    #[arg(long, default_value_t = DEFAULT_MOMENTUM)]
    online_momentum: f64,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    /// Defaults to the output extension (.ndjson/.jsonl for text)
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MOMENTUM)]
    momentum: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// Records per EMA update
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Exact one-pass statistics instead of the EMA
    #[arg(long, conflicts_with = "positive_only")]
    exact: bool,
    /// Each slot's statistics from records labelled with that slot only
    #[arg(long)]
    positive_only: bool,
    #[command(flatten)]
    background: BackgroundArgs,
}

#[derive(Args)]
struct FinalizeOpts {
    /// fg-min, fg-avg, fg-max, bg-mean, const:<v> or none
    #[arg(long, default_value = "fg-min")]
    beta_mode: BetaMode,
    #[arg(long, default_value_t = 1.0)]
    sigma_exponent: f64,
    /// Overrides the eps stored with the statistics
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args)]
struct FinalizeArgs {
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    opts: FinalizeOpts,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Finalized statistics file
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[command(flatten)]
    background: BackgroundArgs,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    dump: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[command(flatten)]
    opts: FinalizeOpts,
    #[command(flatten)]
    background: BackgroundArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dump: PathBuf,
    /// Training dataset; its label counts define the class groups
    #[arg(long)]
    train_data: PathBuf,
    /// Statistics file for the correlation fields
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-class recall/AP CSV
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    background: BackgroundArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Benchmark config JSON; defaults to the reference config of --task
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TaskArg::Detection)]
    task: TaskArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "none,fg-min,fg-avg,fg-max,bg-mean")]
    beta_modes: Vec<BetaMode>,
    #[arg(long, value_delimiter = ',', default_value = "0.001,0.01,0.1,0.5,1")]
    momenta: Vec<f64>,
    /// Beta mode used across the momentum grid
    #[arg(long, default_value = "fg-min")]
    momentum_beta_mode: BetaMode,
    #[arg(long, default_value_t = 1.0)]
    sigma_exponent: f64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Dump(a) => dump(a)?,
        Command::Stats(a) => stats(a)?,
        Command::Finalize(a) => {
            let file: StatsFile = read_json(&a.stats).context("reading statistics")?;
            let (finalized, _) = finalize_file(&file, &a.opts)?;
            write_json(&a.out, &finalized)?;
        }
        Command::Apply(a) => {
            let file: StatsFile = read_json(&a.calibration).context("reading calibration")?;
            let params = file.to_params()?;
            apply(&a.dump, a.background.get(), &params, &a.out, a.format)?;
        }
        Command::Calibrate(a) => {
            let file: StatsFile = read_json(&a.stats).context("reading statistics")?;
            let (_, params) = finalize_file(&file, &a.opts)?;
            apply(&a.dump, a.background.get(), &params, &a.out, a.format)?;
        }
        Command::Eval(a) => eval(a)?,
        Command::Verify(a) => {
            let report = verify::run_all(a.seed);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = &a.out {
                write_json(out, &report)?;
            }
            if !report.passed {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Sweep(a) => sweep(a)?,
        Command::Run { config } => {
            let config = PipelineConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            let report = pipeline::run_pipeline(&config)?;
            print!("{}", render_pipeline_table(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn gen(a: GenArgs) -> Result<()> {
    let task: Task = a.task.into();
    let spec = match &a.spec {
        Some(path) => read_json(path)?,
        None => SynthSpec {
            num_classes: a.num_classes,
            feature_dim: a.feature_dim,
            max_count: a.max_count,
            imbalance_ratio: a.imbalance_ratio,
            class_sep: a.class_sep,
            noise_sigma: a.noise_sigma,
            bg_multiplier: match task {
                Task::Classification => 0.0,
                Task::Detection => a.bg_multiplier,
            },
            seed: a.seed,
            bg_index: a.bg_index,
            split: a.split,
        },
    };
    let mut data = bench::generate(task, &spec)?;
    if let Some(t) = a.oversample {
        data = repeat_factor_oversample(&data, t)?;
    }
    format::write_dataset(&a.out, &data)?;
    eprintln!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data).context("reading dataset")?;
    let config = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        weight_decay: a.weight_decay,
        hidden_units: a.hidden,
        online: a.online_beta_mode.map(|mode| OnlineLogn {
            beta_mode: mode,
            momentum: a.online_momentum,
            eps: DEFAULT_EPS,
            warmup_steps: a.warmup_steps,
        }),
    };
    let (model, log) = train(&data, &config)?;
    write_json(&a.out, &model)?;
    if let Some(path) = &a.log {
        write_text(path, &log.to_csv())?;
    }
    eprintln!("loss {:.4} -> {:.4}", log.initial_loss, log.final_loss());
    Ok(())
}

fn dump(a: DumpArgs) -> Result<()> {
    let model: ModelParams = read_json(&a.model).context("reading model")?;
    let data = read_dataset(&a.data).context("reading dataset")?;
    let logits = predict_logits(&model, &data.features)?;
    let dump = format::Dump::from_matrix(model.layout, &logits, &data.labels)?;
    format::write_dump(&a.out, &dump, dump_format(a.format, &a.out))?;
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let dump = read_dump(&a.dump, a.background.get()).context("reading dump")?;
    let pass = StatsPass {
        mode: if a.exact {
            StatsMode::Exact
        } else if a.positive_only {
            StatsMode::PositiveOnly
        } else {
            StatsMode::Ema
        },
        momentum: a.momentum,
        eps: a.eps,
        batch_size: a.batch_size,
    };
    let stats = bench::gather_stats(&dump.records, dump.layout, &pass)?;
    write_json(&a.out, &StatsFile::from_stats(&stats)?)?;
    Ok(())
}

fn finalize_file(file: &StatsFile, opts: &FinalizeOpts) -> Result<(StatsFile, logn_core::CalibrationParams)> {
    let mut stats = file.to_stats()?;
    if let Some(eps) = opts.eps {
        stats.eps = eps;
    }
    let params = finalize(&stats, opts.beta_mode, opts.sigma_exponent)?;
    Ok((StatsFile::finalized(&stats, opts.beta_mode, &params)?, params))
}

fn apply(
    dump_path: &Path,
    bg: Option<usize>,
    params: &logn_core::CalibrationParams,
    out: &Path,
    format: Option<FormatArg>,
) -> Result<()> {
    let dump = read_dump(dump_path, bg).context("reading dump")?;
    if dump.layout.bg_index() != params.bg_index {
        bail!(
            "dump background slot {:?} differs from calibration's {:?}",
            dump.layout.bg_index(),
            params.bg_index
        );
    }
    let calibrated = apply_to_dump(&dump, params)?;
    format::write_dump(out, &calibrated, dump_format(format, out))?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dump = read_dump(&a.dump, a.background.get()).context("reading dump")?;
    let train_data = read_dataset(&a.train_data).context("reading training dataset")?;
    let dist = bench::foreground_distribution(&train_data)?;
    let stats = match &a.stats {
        Some(p) => Some(read_json::<StatsFile>(p)?.to_stats()?),
        None => None,
    };
    let report = bench::evaluate(&dump.logits(), &dump.labels(), dump.layout, &dist, stats.as_ref())?;
    print!("{}", report.render_table());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.csv {
        write_text(p, &report.to_csv())?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let config: BenchConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => match a.task.into() {
            Task::Classification => bench::reference_classification(a.seed),
            Task::Detection => bench::reference_detection(a.seed),
        },
    };
    let run = bench::prepare(&config)?;
    let mut rows = run.beta_sweep(&a.beta_modes, a.sigma_exponent)?;
    rows.extend(run.momentum_sweep(&a.momenta, a.momentum_beta_mode)?);
    let csv = bench::sweep_csv(&rows);
    match &a.out {
        Some(p) => write_text(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
