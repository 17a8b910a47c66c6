mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "fldplus", version, about = "Flow-based likelihood distance for generated images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Images → feature cache.
    Extract(ExtractArgs),
    /// Fit a flow to a real feature cache.
    Train(TrainArgs),
    /// FLD+ of a generated cache against a real cache.
    Score(ScoreArgs),
    /// Write distorted copies of an image directory.
    Distort(DistortArgs),
    /// FLD+ across distortion levels, averaged over seeds.
    Monotonicity(MonotonicityArgs),
    /// Moment-matched mixture study: Fréchet distance vs FLD+.
    Synthetic(SyntheticArgs),
    /// FLD+ mean and spread against subsample size.
    Curve(CurveArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    Avg,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    GaussianNoise,
    GaussianBlur,
    SaltPepper,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    images: PathBuf,
    /// `toy`, `toy-mobile`, `precomputed:<file>` or a JSON descriptor.
    #[arg(long, default_value = "toy")]
    adapter: String,
    #[arg(long, value_enum, default_value = "avg")]
    pool: Pool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FlowArgs {
    /// Coupling layers.
    #[arg(long, default_value_t = 8)]
    layers: usize,
    /// Spline bins K.
    #[arg(long, default_value_t = 8)]
    bins: usize,
    /// Spline tail bound B.
    #[arg(long, default_value_t = 3.0)]
    tail_bound: f64,
    /// Conditioner hidden widths, comma separated.
    #[arg(long, default_value = "512,512", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, value_enum, default_value = "relu")]
    activation: ActivationArg,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 10)]
    patience: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    real: PathBuf,
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Real reference features, ideally held out from training.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    /// Also compute the Fréchet distance between the two sets.
    #[arg(long)]
    fd: bool,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record the wall-clock time (breaks byte-identical reruns).
    #[arg(long)]
    timestamp: bool,
}

#[derive(Args)]
struct DistortArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_enum)]
    kind: Kind,
    /// Comma separated; defaults to the standard grid for the kind.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MonotonicityArgs {
    #[arg(long)]
    model: PathBuf,
    /// Real reference features the levels are scored against.
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value = "toy")]
    adapter: String,
    #[arg(long, value_enum, default_value = "avg")]
    pool: Pool,
    #[arg(long, value_enum)]
    kind: Kind,
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output prefix: writes `<out>.csv`, `<out>.svg` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SyntheticArgs {
    /// Component separation ratio a/σ.
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    /// Ring rotation angles in degrees, ascending.
    #[arg(long, default_value = "0,9,18,27,36,45", value_delimiter = ',')]
    levels: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    bins: usize,
    #[arg(long, default_value = "64,64", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// One flow is trained per seed.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CurveArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    real: PathBuf,
    #[arg(long)]
    gen: PathBuf,
    #[arg(long, default_value = "50,100,200,300,500,1000", value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": { "kind": kind, "message": message } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", error_json("usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<fldplus::Error>().map(|e| e.kind()).unwrap_or("error");
            eprintln!("{}", error_json(kind, &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
