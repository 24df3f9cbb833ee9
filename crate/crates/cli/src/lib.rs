//! Command implementations behind the `aia` binary.

mod plot;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aia_core::aia::{builtin_schedule, rescale_schedule, Provenance, TargetSchedule};
use aia_core::dump::{AttentionDump, Precision};
use aia_core::intensity::{aggregate_profiles, fmt17, layer_intensity, profile_csv, profile_std_scalar};
use aia_core::model::{forward, Checkpoint};
use aia_core::tasks::{check_vocab, sample_from_seed, sample_seed, SampleOptions, Split};
use aia_core::train::{
    evaluate_sequences, model_grad_check, train_in, EvalSamples, Regime, TrainConfig, GRAD_TOLERANCE,
};
use aia_core::{Error, Task};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub use plot::{parse_profile_csv, render_svg, ProfileSeries};

#[derive(Parser, Debug)]
#[command(name = "aia", version, about = "Cross-modal attention intensity profiling and alignment training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Export task samples as JSON lines.
    GenData(GenDataArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Per-layer intensity profile of a checkpoint.
    Profile(ProfileArgs),
    /// Write a checkpoint's attention on eval samples as an ATTD dump.
    Dump(DumpArgs),
    /// Profile CSV from an ATTD attention dump.
    Ingest(IngestArgs),
    /// Print a builtin target schedule, optionally rescaled to a depth.
    Targets(TargetsArgs),
    /// Plot profile CSVs as an SVG.
    Plot(PlotArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Eval,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// TOML config; omitted sections take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Fixed alignment weight.
    #[arg(long, conflicts_with = "ratio")]
    pub lambda: Option<f64>,
    /// NTP:AIA ratio at initialization, e.g. `50:1`.
    #[arg(long)]
    pub ratio: Option<String>,
    #[arg(long, value_parser = parse_regime)]
    pub regime: Option<Regime>,
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    /// Overrides `run.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    /// Eval-split seed.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Writes to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeat the first eval sample `--samples` times.
    #[arg(long, hide = true)]
    pub identical: bool,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F64)]
    pub precision: PrecisionArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TargetsArgs {
    #[arg(long)]
    pub provenance: String,
    #[arg(long, value_parser = parse_task)]
    pub task: Task,
    /// Also emit per-layer targets for a model of this depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Schedule document path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-layer CSV path; defaults to the document path with a `.csv` extension.
    #[arg(long, requires = "depth")]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    #[arg(long = "csv", required = true, num_args = 1..)]
    pub csv: Vec<PathBuf>,
    /// Schedule document drawn as shaded bands, rescaled to the profile depth.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure of a command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Input(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Input(_) => 2,
            CliError::Divergence { .. } => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Divergence { step } => CliError::Divergence { step },
            other => CliError::Input(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, text.as_bytes()),
        None => std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Input(e.to_string())),
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let ckpt = Checkpoint::load(path)?;
    check_vocab(&ckpt.config)?;
    Ok(ckpt)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Profile(a) => profile(a),
        Command::Dump(a) => dump(a),
        Command::Ingest(a) => ingest(a),
        Command::Targets(a) => targets(a),
        Command::Plot(a) => plot(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Eval => Split::Eval,
    };
    let mut out = Vec::new();
    for i in 0..a.count as u64 {
        let seq = sample_from_seed(a.task, sample_seed(split, a.seed, i), SampleOptions::default());
        serde_json::to_writer(&mut out, &seq).expect("sequence serializes");
        out.push(b'\n');
    }
    write_file(&a.out, &out)
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<TrainConfig>(&read_text(p)?)
            .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(l) = a.lambda {
        cfg.aia.weight = l.to_string();
    }
    if let Some(r) = a.ratio {
        cfg.aia.weight = r;
    }
    if let Some(r) = a.regime {
        cfg.run.regime = r;
    }
    if let Some(w) = a.warm_start {
        cfg.run.warm_start = Some(w);
    }
    if let Some(s) = a.steps {
        cfg.run.steps = s;
    }
    cfg.validate()?;
    let (_, log) = train_in(&cfg, Some(&a.out_dir))?;
    println!("lambda {}", log.lambda);
    for task in Task::ALL {
        if let Some(e) = log.final_eval(task) {
            println!("{task}: ntp {:.6} alignment_gap {:.6} scalar_std {:.6}", e.ntp, e.alignment_gap, e.scalar_std);
        }
    }
    Ok(())
}

fn eval_samples(seed: u64, identical: bool) -> EvalSamples {
    if identical {
        EvalSamples::Identical { seed }
    } else {
        EvalSamples::HeldOut { seed }
    }
}

fn profile(a: ProfileArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let seqs = eval_samples(a.seed, a.identical).sequences(a.task, a.samples, SampleOptions::default());
    let e = evaluate_sequences(&ckpt, a.task, seqs)?;
    emit(a.out.as_deref(), &e.to_csv())
}

fn dump(a: DumpArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let seqs = eval_samples(a.seed, false).sequences(a.task, a.samples, SampleOptions::default());
    let records = seqs
        .iter()
        .map(|s| Ok(forward(&ckpt, s, true)?.1.expect("attention requested")))
        .collect::<Result<Vec<_>, Error>>()?;
    let precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F64 => Precision::F64,
    };
    write_file(&a.out, &AttentionDump { records }.to_bytes(precision))
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    let bytes = fs::read(&a.dump).map_err(|e| io_err(&a.dump, e))?;
    let dump = AttentionDump::from_bytes(&bytes)?;
    let roles = dump.roles()?;
    let Some(task) = roles.first().map(|r| r.task) else {
        return Err(CliError::Input("attention dump holds no samples".into()));
    };
    if let Some(i) = roles.iter().position(|r| r.task != task) {
        return Err(CliError::Input(format!("sample {i} is {} but sample 0 is {task}", roles[i].task)));
    }
    let profiles = dump
        .records
        .iter()
        .zip(&roles)
        .map(|(rec, r)| layer_intensity(rec, r))
        .collect::<Result<Vec<_>, Error>>()?;
    let agg = aggregate_profiles(&profiles)?;
    let scalar = if profiles.len() >= 2 { Some(profile_std_scalar(&profiles)?) } else { None };
    emit(a.out.as_deref(), &profile_csv(&agg, scalar))
}

fn targets(a: TargetsArgs) -> Result<(), CliError> {
    let provenance: Provenance = a.provenance.parse()?;
    let schedule = builtin_schedule(provenance, a.task)?;
    emit(a.out.as_deref(), &schedule.to_document())?;
    if let Some(depth) = a.depth {
        let csv = layer_targets_csv(&schedule, depth)?;
        match a.csv.or_else(|| a.out.as_ref().map(|p| p.with_extension("csv"))) {
            Some(p) => write_file(&p, csv.as_bytes())?,
            None => emit(None, &csv)?,
        }
    }
    Ok(())
}

/// `layer,reference_layer,T,delta` rows for a model of `depth` layers.
pub fn layer_targets_csv(schedule: &TargetSchedule, depth: usize) -> Result<String, CliError> {
    let rows = rescale_schedule(schedule, depth)?;
    let mut out = String::from("layer,reference_layer,T,delta\n");
    for (l, t) in rows.iter().enumerate() {
        let reference = l * schedule.reference_depth / depth;
        out.push_str(&format!("{l},{reference},{},{}\n", fmt17(t.target), fmt17(t.delta)));
    }
    Ok(out)
}

fn plot(a: PlotArgs) -> Result<(), CliError> {
    let series = a
        .csv
        .iter()
        .map(|p| {
            let label = p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            parse_profile_csv(&read_text(p)?, label).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bands = match &a.targets {
        Some(p) => {
            let schedule = TargetSchedule::from_document(&read_text(p)?)?;
            let depth = series[0].mean.len();
            if series.iter().any(|s| s.mean.len() != depth) {
                return Err(CliError::Input("target bands need profiles of equal depth".into()));
            }
            Some(rescale_schedule(&schedule, depth)?)
        }
        None => None,
    };
    write_file(&a.out, render_svg(&series, bands.as_deref()).as_bytes())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    if a.depth == 0 || a.heads == 0 || a.dim == 0 || a.dim % a.heads != 0 {
        return Err(CliError::Input("depth, heads and dim must be positive with heads dividing dim".into()));
    }
    let cases = model_grad_check(a.depth, a.heads, a.dim, a.seed, a.corrupt_gradient)?;
    let mut failed = Vec::new();
    for c in &cases {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<9} max_relative_error {:.3e}  checked {:>4}  {verdict}", c.name, c.max_relative_error, c.reports.len());
        if !c.passed() {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check above {GRAD_TOLERANCE:e}: {}", failed.join(", "))))
    }
}
