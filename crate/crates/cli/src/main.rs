//! `calibra`: generate synthetic data, fit and apply temperature models,
//! evaluate calibration, fuse atlases and run the theory checks.
//!
//! Every command prints one JSON document on stdout. Logs and errors go to
//! stderr. Exit codes: 0 ok, 1 runtime failure, 2 usage error.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "calibra", version, about = "Temperature scaling for dense classifiers")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "CALIBRA_THREADS")]
    threads: Option<usize>,

    /// JSON object of flag values; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (or a fusion bench) with known miscalibration.
    Gen(GenArgs),
    /// Fit a calibration model on the validation split.
    Fit(FitArgs),
    /// Write calibrated probabilities and temperature fields for one split.
    Apply(ApplyArgs),
    /// Calibration metrics over the All, Boundary and Local regions.
    Eval(EvalArgs),
    /// Fuse the atlases of a fusion bench.
    Fuse(FuseArgs),
    /// Run the theory suites.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// stripes, nested-squares or voronoi-blobs
    #[arg(long)]
    pub preset: Option<String>,
    /// HxW
    #[arg(long, default_value = "64x64")]
    pub shape: String,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// none, global:K, per-image:LO:HI, spatial:halves:A:B, spatial:ramp:A:B
    #[arg(long, default_value = "none")]
    pub miscal: String,
    /// Confidence reduction near class boundaries, in [0, 1).
    #[arg(long, default_value_t = 0.5)]
    pub rho: f64,
    /// LO:HI range of the confidence strength.
    #[arg(long)]
    pub strength: Option<String>,
    #[arg(long, default_value_t = 30)]
    pub train: usize,
    #[arg(long, default_value_t = 10)]
    pub val: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write a label-fusion bench instead of a dataset.
    #[arg(long)]
    pub fusion_bench: bool,
    #[arg(long, default_value_t = 5)]
    pub atlases: usize,
    /// Atlases (counted from the first) whose errors are shared.
    #[arg(long, default_value_t = 2)]
    pub correlated: usize,
    /// LO:HI range of the atlas correctness probability.
    #[arg(long, default_value = "0.3:0.95")]
    pub correctness: String,
    /// per-atlas:LO:HI or global:T
    #[arg(long, default_value = "per-atlas:0.1:10")]
    pub distortion: String,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct FitArgs {
    /// ts, ibts or lts
    #[arg(long)]
    pub method: String,
    /// Dataset directory holding train.json / val.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Model JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// ts only: bisection or gradient
    #[arg(long, default_value = "bisection")]
    pub solver: String,
    /// full or all
    #[arg(long, default_value = "all")]
    pub mask: String,
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    /// Constant learning rate; replaces --lr-schedule.
    #[arg(long)]
    pub lr: Option<f64>,
    /// EPOCH:LR steps, comma separated.
    #[arg(long, default_value = "0:1e-4,50:1e-5")]
    pub lr_schedule: String,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory or manifest.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Output directory of `apply`; without it the raw softmax is evaluated.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Comma-separated subset of all, boundary, local.
    #[arg(long, default_value = "all,boundary,local")]
    pub regions: String,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long, default_value_t = 10)]
    pub patches: usize,
    #[arg(long, default_value_t = 72)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Full report JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reliability diagram of the All region, pooled over samples.
    #[arg(long)]
    pub diagram: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct FuseArgs {
    #[arg(long)]
    pub bench: PathBuf,
    /// mv, pv, svwv or jlf
    #[arg(long)]
    pub method: String,
    /// true, uncal or calibrated
    #[arg(long, default_value = "true")]
    pub probs: String,
    #[arg(long)]
    pub out: PathBuf,
    /// JLF ridge term relative to the mean pairwise error.
    #[arg(long, default_value_t = 0.01)]
    pub reg_scale: f64,
    /// Fixed JLF ridge term; replaces --reg-scale.
    #[arg(long)]
    pub reg: Option<f64>,
    /// Also write the JLF weights as an (n, H, W) array.
    #[arg(long)]
    pub dump_weights: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct VerifyArgs {
    /// Comma-separated subset of lemma1, thm1, thm3, gradcheck.
    #[arg(long, default_value = "lemma1,thm1,thm3,gradcheck")]
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub corrupt: bool,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<calibra_core::Error> for CliError {
    fn from(e: calibra_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Turns a config object into `--key value` arguments.
fn config_args(path: &PathBuf) -> CliResult<Vec<OsString>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let obj = value
        .as_object()
        .ok_or_else(|| CliError::Usage("config must be a JSON object".into()))?;
    let mut args = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &serde_json::Value| -> CliResult<String> {
            match v {
                serde_json::Value::String(s) => Ok(s.clone()),
                serde_json::Value::Number(n) => Ok(n.to_string()),
                other => Err(CliError::Usage(format!("config key {key:?}: unsupported value {other}"))),
            }
        };
        match v {
            serde_json::Value::Bool(true) => args.push(flag.into()),
            serde_json::Value::Bool(false) | serde_json::Value::Null => {}
            serde_json::Value::Array(items) => {
                let joined = items.iter().map(scalar).collect::<CliResult<Vec<_>>>()?.join(",");
                args.push(flag.into());
                args.push(joined.into());
            }
            other => {
                args.push(flag.into());
                args.push(scalar(other)?.into());
            }
        }
    }
    Ok(args)
}

const SUBCOMMANDS: [&str; 6] = ["gen", "fit", "apply", "eval", "fuse", "verify"];

/// Value of `--config` anywhere in argv.
fn find_config(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Position of the subcommand token, skipping global options and their values.
fn subcommand_index(argv: &[OsString]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let a = argv[i].to_string_lossy();
        if a == "--threads" || a == "--config" {
            i += 2;
            continue;
        }
        if SUBCOMMANDS.contains(&a.as_ref()) {
            return Some(i);
        }
        if !a.starts_with("--") {
            return None;
        }
        i += 1;
    }
    None
}

/// Parses argv, splicing config-file flags in front of the subcommand's own
/// flags so later (command-line) occurrences override them.
fn parse(argv: Vec<OsString>) -> Result<Cli, ExitCode> {
    let argv = match (find_config(&argv), subcommand_index(&argv)) {
        (Some(config), Some(pos)) => {
            let extra = config_args(&config).map_err(|e| report(&e))?;
            let mut spliced = argv[..=pos].to_vec();
            spliced.extend(extra);
            spliced.extend_from_slice(&argv[pos + 1..]);
            spliced
        }
        _ => argv,
    };
    Cli::try_parse_from(&argv).map_err(|e| {
        let _ = e.print();
        ExitCode::from(e.exit_code() as u8)
    })
}

fn report(e: &CliError) -> ExitCode {
    match e {
        CliError::Usage(m) => {
            eprintln!("error: {m}");
            eprintln!("run `calibra --help` for usage");
            ExitCode::from(2)
        }
        CliError::Runtime(m) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match parse(std::env::args_os().collect()) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return report(&CliError::Usage("--threads must be positive".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report(&CliError::Runtime(format!("thread pool: {e}")));
        }
    }
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Fit(a) => commands::fit(a),
        Command::Apply(a) => commands::apply(a),
        Command::Eval(a) => commands::eval(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Verify(a) => commands::verify(a),
    };
    match result {
        Ok(outcome) => {
            let text = serde_json::to_string_pretty(&outcome.json).expect("serializable output");
            // a closed pipe downstream is not our failure
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            if outcome.success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => report(&e),
    }
}
