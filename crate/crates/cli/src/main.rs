//! `sqfmt`: quantize tensors into the SQ format, run hybrid GEMM checks,
//! sweep synthetic layers and query the performance model.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sqformat::SqError;

#[derive(Debug, Parser)]
#[command(name = "sqfmt", version, about = "Hybrid sparse-quantized tensor toolkit")]
struct Cli {
    /// Directory for outputs given as bare file names.
    #[arg(long, global = true, env = "SQFMT_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic layer with per-channel activation outliers.
    GenSynth(GenSynthArgs),
    /// Quantize a float weight section into the SQ format.
    QuantizeWeights(QuantizeWeightsArgs),
    /// Build a static activation plan from calibration activations.
    GenActPlan(GenActPlanArgs),
    /// Split activations into high and low precision groups.
    QuantizeActs(QuantizeActsArgs),
    /// Compare a hybrid GEMM against the dequantize-then-float oracle.
    GemmCheck(GemmCheckArgs),
    /// Sweep bank size, sparsity and precision on synthetic layers.
    Sweep(SweepArgs),
    /// Query the analytical performance model.
    Model {
        #[command(subcommand)]
        query: ModelQuery,
    },
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    #[arg(long, default_value_t = 1024)]
    k: usize,
    #[arg(long, default_value_t = 1024)]
    n: usize,
    /// Rows in each of the calibration and evaluation batches.
    #[arg(long, default_value_t = 64)]
    m: usize,
    #[arg(long, default_value_t = 0.01)]
    outlier_frac: f64,
    #[arg(long, default_value_t = 50.0)]
    outlier_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output container; holds sections `w`, `calib` and `eval`.
    #[arg(short, long)]
    output: PathBuf,
}

/// Where the float weights and calibration activations come from.
#[derive(Debug, Args)]
struct LayerInput {
    /// Container holding the weight and calibration sections.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value = "w")]
    weights: String,
    #[arg(long, default_value = "calib")]
    calib: String,
    /// Smoothing migration strength.
    #[arg(long, default_value_t = sqformat::calibration::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct QuantizeWeightsArgs {
    #[command(flatten)]
    layer: LayerInput,
    /// Configuration such as `32-(8/4)-0.75`.
    #[arg(short, long)]
    config: String,
    /// Hessian damping as a fraction of the mean diagonal.
    #[arg(long, default_value_t = sqformat::calibration::DEFAULT_DAMPING)]
    damping: f64,
    /// Output container; holds `w_sq` and `channel_scale`.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct GenActPlanArgs {
    #[command(flatten)]
    layer: LayerInput,
    #[arg(short, long)]
    config: String,
    /// Output container; holds `plan`, `channel_scale` and `calib_stats`.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct QuantizeActsArgs {
    /// Container holding the activations.
    #[arg(short, long)]
    input: PathBuf,
    #[arg(long, default_value = "eval")]
    acts: String,
    /// Plan container from `gen-act-plan`; selects the static split.
    #[arg(long, conflicts_with = "dynamic")]
    plan: Option<PathBuf>,
    /// Per-row magnitude split; requires `--config`.
    #[arg(long, requires = "config")]
    dynamic: bool,
    #[arg(short, long)]
    config: Option<String>,
    /// Output container; holds the dequantized activations as `a_hat`.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Side {
    Weights,
    ActsStatic,
    ActsDynamic,
}

#[derive(Debug, Args)]
struct GemmCheckArgs {
    #[command(flatten)]
    layer: LayerInput,
    #[arg(long, default_value = "eval")]
    acts: String,
    #[arg(short, long)]
    config: String,
    #[arg(long, value_enum, default_value_t = Side::Weights)]
    side: Side,
    /// Bit width of the uniformly quantized operand.
    #[arg(long, default_value_t = 8)]
    uniform_bits: u8,
    #[arg(long, default_value_t = sqformat::calibration::DEFAULT_DAMPING)]
    damping: f64,
    /// Maximum relative Frobenius deviation from the oracle.
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
    bank_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,0.875,0.9375")]
    sparsities: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "8/4,8/3,8/2,4/2")]
    precisions: Vec<String>,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "sq_weights,sq_act_static,sq_act_dynamic,uniform,sparse24"
    )]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Layer shapes as `KxNxM`.
    #[arg(long, value_delimiter = ',', default_value = "512x512x64")]
    shapes: Vec<String>,
    #[arg(long, default_value_t = 0.01)]
    outlier_frac: f64,
    #[arg(long, default_value_t = 50.0)]
    outlier_scale: f64,
    #[arg(long, default_value_t = sqformat::calibration::DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = sqformat::calibration::DEFAULT_DAMPING)]
    damping: f64,
    #[arg(long, default_value_t = 1.92)]
    full_low_speedup: f64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Csv)]
    format: ReportFormat,
    /// Report path; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum ModelQuery {
    /// Equivalent bits per element for weights and activations.
    EqBits {
        #[arg(long)]
        precision: String,
        #[arg(long)]
        sparsity: f64,
    },
    /// Smallest sparsity that hides the high-precision path.
    MinSparsity {
        /// Throughput ratio of the low-precision to the high-precision unit.
        #[arg(long)]
        rate: f64,
    },
    /// Modeled end-to-end speedup of a static split.
    Speedup {
        #[arg(long)]
        sparsity: f64,
        #[arg(long, default_value_t = 1.92)]
        full_low_speedup: f64,
        #[arg(long, default_value_t = 0.0)]
        overhead: f64,
    },
    /// Bytes needed to store static channel masks.
    MaskStorage {
        #[arg(long, value_enum, conflicts_with = "layers")]
        preset: Option<Preset>,
        /// Linear layers as `K:count`.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Llama3_70b,
    Llama3_8b,
}

fn exit_code(err: &SqError) -> u8 {
    match err {
        SqError::Param(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
