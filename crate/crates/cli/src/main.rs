//! `layermerge` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors. Every run
//! ends with a one-line summary on standard error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use layermerge::alignment::{shared_parameters, AlignmentError, SharedAlignment};
use layermerge::checkpoint::{self, Checkpoint, CheckpointError};
use layermerge::discrepancy::{discrepancy_profile, emit_profile, DiscrepancyError, ProfileFormat, ThresholdMode};
use layermerge::merge::{
    compute_schedule, fisher_merge, isotropic_merge, layerwise_merge, scalar_weighted_merge, score_weights,
    FisherWeights, MergeError, ScheduleParams,
};
use layermerge::toy::{estimate_fisher, run_experiment, sample_domain, DomainShift, ExperimentConfig, HarnessError, ToyModel};

#[derive(Parser)]
#[command(name = "layermerge", version, about = "Merge, compare and inspect model checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Merge checkpoints into one.
    Merge(MergeArgs),
    /// Per-layer discrepancy profile of `b` relative to `a`.
    Profile(ProfileArgs),
    /// Print a header summary of a checkpoint as JSON.
    Inspect {
        path: PathBuf,
    },
    /// Estimate diagonal Fisher weights of a toy model checkpoint.
    Fisher(FisherArgs),
    /// Run a toy experiment from a TOML config.
    Toy {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Strategy {
    Layerwise,
    Isotropic,
    Scalar,
    Fisher,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Anchor model, as an input index or one of the input paths.
    #[arg(long)]
    anchor: Option<String>,
    #[arg(long, value_enum)]
    strategy: Strategy,
    /// Last layer that keeps the first-layer weight (layerwise only).
    #[arg(long = "s")]
    start: Option<usize>,
    /// Non-anchor weight on the first layers (layerwise only).
    #[arg(long)]
    w0: Option<f64>,
    /// Performance scores, one per input (scalar only); read from metadata when omitted.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    perf: Vec<f64>,
    /// Fisher weight files, one per input (fisher only).
    #[arg(long, num_args = 1..)]
    fisher: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Elementwise,
    LayerNorm,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Args)]
struct ProfileArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, required = true)]
    tau: f64,
    #[arg(long, value_enum, default_value = "elementwise")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FisherArgs {
    model: PathBuf,
    /// Seed of the sampled dataset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 600)]
    n: usize,
    /// Class count; defaults to the model's output width.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    rotation: f64,
    /// Target-domain translation as `x,y`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    translation: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) => m,
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AlignmentError> for CliError {
    fn from(e: AlignmentError) -> Self {
        match e {
            AlignmentError::AnchorOutOfRange { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<MergeError> for CliError {
    fn from(e: MergeError) -> Self {
        match e {
            MergeError::InvalidSchedule(_) | MergeError::InvalidScores(_) | MergeError::PoolSize { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<DiscrepancyError> for CliError {
    fn from(e: DiscrepancyError) -> Self {
        match e {
            DiscrepancyError::InvalidTau(_) => CliError::Usage(e.to_string()),
            DiscrepancyError::Alignment(a) => a.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            HarnessError::Merge(m) => m.into(),
            HarnessError::Alignment(a) => a.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("layermerge: usage error");
            return ExitCode::from(1);
        }
    };
    match run(cli.command) {
        Ok(summary) => {
            eprintln!("layermerge: {summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let message = e.message();
            let first = message.lines().next().unwrap_or_default();
            if first.len() != message.len() {
                eprintln!("{message}");
            }
            eprintln!("layermerge: error: {first}");
            ExitCode::from(e.code())
        }
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::Merge(args) => run_merge(args),
        Command::Profile(args) => run_profile(args),
        Command::Inspect { path } => run_inspect(&path),
        Command::Fisher(args) => run_fisher(args),
        Command::Toy { config, out } => run_toy(&config, &out),
    }
}

fn resolve_anchor(spec: &str, inputs: &[PathBuf]) -> Result<usize> {
    if let Ok(i) = spec.parse::<usize>() {
        return if i < inputs.len() {
            Ok(i)
        } else {
            Err(CliError::Usage(format!("anchor index {i} out of range for {} inputs", inputs.len())))
        };
    }
    let wanted = Path::new(spec);
    inputs
        .iter()
        .position(|p| p == wanted)
        .or_else(|| {
            let canon = wanted.canonicalize().ok()?;
            inputs.iter().position(|p| p.canonicalize().ok().as_ref() == Some(&canon))
        })
        .ok_or_else(|| CliError::Usage(format!("anchor `{spec}` is neither an index nor one of the inputs")))
}

fn run_merge(args: MergeArgs) -> Result<String> {
    let m = args.inputs.len();
    let anchor = match (&args.anchor, args.strategy) {
        (Some(spec), _) => resolve_anchor(spec, &args.inputs)?,
        (None, Strategy::Layerwise) => {
            return Err(CliError::Usage("layerwise merging requires --anchor".into()));
        }
        (None, _) => 0,
    };
    if args.strategy != Strategy::Layerwise && (args.start.is_some() || args.w0.is_some()) {
        return Err(CliError::Usage("--s and --w0 only apply to the layerwise strategy".into()));
    }
    if args.strategy != Strategy::Scalar && !args.perf.is_empty() {
        return Err(CliError::Usage("--perf only applies to the scalar strategy".into()));
    }
    if args.strategy != Strategy::Fisher && !args.fisher.is_empty() {
        return Err(CliError::Usage("--fisher only applies to the fisher strategy".into()));
    }
    if args.strategy == Strategy::Fisher && args.fisher.len() != m {
        return Err(CliError::Usage(format!("--fisher needs {m} files, got {}", args.fisher.len())));
    }
    if args.strategy == Strategy::Scalar && !args.perf.is_empty() && args.perf.len() != m {
        return Err(CliError::Usage(format!("--perf needs {m} scores, got {}", args.perf.len())));
    }
    if args.w0.is_some() {
        // reject a bad w0 before touching any file
        compute_schedule(m, 1, anchor, ScheduleParams { start: 1, w0: args.w0 })?;
    }

    let ckpts = args.inputs.iter().map(checkpoint::load).collect::<std::result::Result<Vec<_>, _>>()?;
    let alignment = shared_parameters(&ckpts, anchor)?;
    let mut report = alignment_report(&alignment);

    let merged = match args.strategy {
        Strategy::Layerwise => {
            let params = ScheduleParams {
                start: args.start.unwrap_or(1),
                w0: args.w0,
            };
            let schedule = compute_schedule(m, alignment.n_p(), anchor, params)?;
            let _ = writeln!(report, "schedule: start={} w0={}", schedule.start, schedule.w0);
            for j in 1..=schedule.n_p {
                let row: Vec<String> = (0..m).map(|i| format!("{}", schedule.weight(i, j))).collect();
                let _ = writeln!(report, "  layer {j}: {}", row.join(" "));
            }
            layerwise_merge(&ckpts, &schedule, &alignment)?
        }
        Strategy::Isotropic => isotropic_merge(&ckpts, &alignment)?,
        Strategy::Scalar => {
            let perf = if args.perf.is_empty() {
                scores_from_metadata(&ckpts, &args.inputs)?
            } else {
                args.perf.clone()
            };
            let weights = score_weights(&perf)?;
            let shown: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
            let _ = writeln!(report, "weights: {}", shown.join(" "));
            scalar_weighted_merge(&ckpts, &perf, &alignment)?
        }
        Strategy::Fisher => {
            let fishers = args
                .fisher
                .iter()
                .map(|p| Ok(FisherWeights::new(checkpoint::load(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            fisher_merge(&ckpts, &fishers, &alignment)?
        }
    };
    checkpoint::save(&merged, &args.out)?;
    print!("{report}");
    Ok(format!(
        "merged {m} checkpoints, N_p={}, {} shared tensors, {} anchor-only, wrote {}",
        alignment.n_p(),
        alignment.shared_tensor_count(),
        alignment.anchor_only.len(),
        args.out.display()
    ))
}

fn alignment_report(alignment: &SharedAlignment) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "N_p: {}", alignment.n_p());
    let _ = writeln!(out, "shared tensors: {}", alignment.shared_tensor_count());
    let _ = writeln!(out, "anchor-only tensors: {}", alignment.anchor_only.len());
    for name in &alignment.anchor_only {
        let _ = writeln!(out, "  {name} (kept from anchor)");
    }
    out
}

fn scores_from_metadata(ckpts: &[Checkpoint], paths: &[PathBuf]) -> Result<Vec<f64>> {
    ckpts
        .iter()
        .zip(paths)
        .map(|(c, p)| {
            c.performance()?.ok_or_else(|| {
                CliError::Usage(format!("{} has no performance metadata; pass --perf", p.display()))
            })
        })
        .collect()
}

fn run_profile(args: ProfileArgs) -> Result<String> {
    let a = checkpoint::load(&args.a)?;
    let b = checkpoint::load(&args.b)?;
    let mode = match args.mode {
        ModeArg::Elementwise => ThresholdMode::Elementwise,
        ModeArg::LayerNorm => ThresholdMode::LayerNorm,
    };
    let format = match args.format {
        FormatArg::Csv => ProfileFormat::Csv,
        FormatArg::Json => ProfileFormat::Json,
    };
    let profile = discrepancy_profile(&a, &b, args.tau, mode)?;
    let bytes = emit_profile(&profile, format)?;
    match &args.out {
        Some(path) => checkpoint::write_atomic(path, &bytes)?,
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    Ok(format!(
        "profiled {} rows at tau={}, total flagged fraction {}",
        profile.rows.len(),
        args.tau,
        profile.total_fraction()
    ))
}

fn run_inspect(path: &Path) -> Result<String> {
    let summary = checkpoint::inspect(path)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Data(e.to_string()))?;
    println!("{json}");
    Ok(format!(
        "{}: {} tensors, {} parameters",
        path.display(),
        summary.tensors.len(),
        summary.parameter_count
    ))
}

fn run_fisher(args: FisherArgs) -> Result<String> {
    let model = ToyModel::from_checkpoint(&checkpoint::load(&args.model)?)?;
    let classes = args.classes.unwrap_or(model.output_dim());
    let translation = match args.translation.as_slice() {
        [] => [0.0, 0.0],
        [x, y] => [*x, *y],
        _ => return Err(CliError::Usage("--translation takes two values".into())),
    };
    let shift = DomainShift {
        rotation: args.rotation,
        translation,
    };
    let data = sample_domain(args.seed, args.n, classes, shift)?;
    let fisher = estimate_fisher(&model, &data)?;
    checkpoint::save(fisher.as_checkpoint(), &args.out)?;
    Ok(format!(
        "estimated Fisher weights of {} on {} samples, wrote {}",
        args.model.display(),
        data.len(),
        args.out.display()
    ))
}

fn run_toy(config: &Path, out: &Path) -> Result<String> {
    let text = std::fs::read_to_string(config).map_err(|e| CliError::Data(format!("{}: {e}", config.display())))?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let report = run_experiment(&cfg)?;
    checkpoint::write_atomic(out, &report.to_json())?;
    for row in &report.strategies {
        println!(
            "{:<10} source {:.4}  target {:.4}  anchor task {:.4}",
            row.strategy.to_string(),
            row.source_accuracy,
            row.target_accuracy,
            row.anchor_task_accuracy
        );
    }
    Ok(format!(
        "experiment `{}` (seed {}): {} strategies, wrote {}",
        report.name,
        report.seed,
        report.strategies.len(),
        out.display()
    ))
}
