use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "pdmr", version, about = "Accelerated MRI reconstruction with an FFT-free data-fidelity unit")]
pub struct Cli {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (falls back to PDMR_THREADS, then the core count).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one undersampled multi-coil slice.
    Simulate(SimulateArgs),
    /// Reconstruct a dataset file.
    Recon(ReconArgs),
    /// Train a regularizer on pipeline iterates.
    Train(TrainArgs),
    /// Quantize float weights to int8.
    Quantize(QuantizeArgs),
    /// Compare backprop gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time reconstruction variants on one slice.
    Bench(BenchArgs),
    /// Compare two images.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomArg {
    SheppLogan,
    Random,
}

#[derive(Debug, Clone, Args)]
pub struct SliceArgs {
    #[arg(long, default_value_t = 64)]
    pub npe: usize,
    #[arg(long, default_value_t = 64)]
    pub nro: usize,
    #[arg(long, default_value_t = 8)]
    pub coils: usize,
    #[arg(long, default_value_t = 4)]
    pub accel: usize,
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    #[arg(long, default_value_t = 0.03)]
    pub sigma: f64,
    #[arg(long, value_enum, default_value_t = PhantomArg::Random)]
    pub phantom: PhantomArg,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub slice: SliceArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Zerofill,
    Cgsense,
    PdaiFft,
    PdaiFftfree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuantArg {
    Fp32,
    Int8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DfArg {
    Cg,
    Direct,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value_t = QuantArg::Fp32)]
    pub quant: QuantArg,
    /// Regularizer weights (required by the pdai methods).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub unrolls: usize,
    /// CG iterations (default 3 for cgsense, 10 inside the pdai methods).
    #[arg(long)]
    pub cg_iters: Option<usize>,
    #[arg(long)]
    pub cg_tol: Option<f64>,
    /// Penalty weight (default: the value stored with the weights, else 0.05).
    #[arg(long)]
    pub mu: Option<f64>,
    /// Data-fidelity solver for pdai-fftfree.
    #[arg(long, value_enum, default_value_t = DfArg::Direct)]
    pub df: DfArg,
    /// Print transform counts.
    #[arg(long)]
    pub count_ops: bool,
    /// Reconstructed image file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV file to append a metrics row to.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SuiteArgs {
    /// Dataset files; when absent a suite is simulated.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Number of simulated slices.
    #[arg(long, default_value_t = 20)]
    pub n_slices: usize,
    #[command(flatten)]
    pub slice: SliceArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub suite: SuiteArgs,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub rounds: usize,
    #[arg(long, default_value_t = 3)]
    pub stride: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub unrolls: usize,
    #[arg(long, default_value_t = 0.05)]
    pub mu: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// CSV loss log (round, epoch, loss).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Float weights.
    #[arg(long)]
    pub weights: PathBuf,
    #[command(flatten)]
    pub suite: SuiteArgs,
    #[arg(long, default_value_t = 10)]
    pub unrolls: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Dataset file; when absent a slice is simulated.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub slice: SliceArgs,
    /// Float weights; when absent a freshly initialized network is used.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub blocks: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, value_delimiter = ',', default_values_t = ["zerofill", "cgsense", "pdai-fft-fp32", "pdai-fftfree-fp32", "pdai-fftfree-int8"].map(String::from))]
    pub variants: Vec<String>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 10)]
    pub unrolls: usize,
    /// CSV output (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference image or dataset file (its ground truth is used).
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub estimate: PathBuf,
}
