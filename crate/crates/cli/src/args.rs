use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hdae", version, about = "Simulate and identify hybrid DAE benchmarks with event-aware gradients")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a model and write the node trajectory as CSV plus an events sidecar.
    Simulate(SimulateArgs),
    /// Compare forward, adjoint and finite-difference gradients at one point.
    Gradcheck(GradcheckArgs),
    /// Identify parameters with Adam from a biased start.
    Identify(IdentifyArgs),
    /// Identify with both gradient routes from the same start and tabulate.
    Compare(CompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelName {
    Cauer,
    Balls,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Fwd,
    Adjoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BlendArg {
    Hard,
    Soft,
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    #[arg(long, value_enum)]
    pub model: ModelName,
    /// Number of balls (balls model).
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub n_balls: u32,
    /// Ball radius (balls model).
    #[arg(long, default_value_t = 0.5, value_parser = positive)]
    pub radius: f64,
    /// Box half width (balls model).
    #[arg(long, default_value_t = 10.0, value_parser = positive)]
    pub half_width: f64,
    /// Horizon; the model default (cauer 20, balls 5) when omitted.
    #[arg(long, value_parser = positive)]
    pub t1: Option<f64>,
    /// Seed for ball placement, data noise and the initial bias.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 1e-8, value_parser = positive)]
    pub rtol: f64,
    #[arg(long, default_value_t = 1e-8, value_parser = positive)]
    pub atol: f64,
    /// Stored nodes per segment.
    #[arg(long, default_value_t = 33, value_parser = clap::value_parser!(u32).range(2..))]
    pub nodes: u32,
    /// Segment capacity.
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u32).range(1..))]
    pub k_max: u32,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Number of uniform targets on (0, T] for synthetic data.
    #[arg(long, default_value_t = 500, value_parser = clap::value_parser!(u32).range(1..))]
    pub targets: u32,
    /// Standard deviation of Gaussian noise added to synthetic data.
    #[arg(long, default_value_t = 0.0, value_parser = nonnegative)]
    pub noise: f64,
    /// CSV with a `t` column and `y*` columns to use instead of synthetic data.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Parameters, comma separated; the built-in truth when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub params: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Route checked against finite differences for the verdict.
    #[arg(long, value_enum, default_value_t = MethodArg::Fwd)]
    pub method: MethodArg,
    /// Evaluation point; the biased start when omitted.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub params: Option<Vec<f64>>,
    /// Log-uniform half width of the bias around truth.
    #[arg(long, default_value_t = 0.03, value_parser = nonnegative)]
    pub bias: f64,
    #[arg(long, value_enum, default_value_t = BlendArg::Hard)]
    pub blend: BlendArg,
    /// Blend sharpness for `--blend soft`.
    #[arg(long, default_value_t = 150.0, value_parser = positive)]
    pub beta: f64,
    /// Relative finite-difference step.
    #[arg(long, default_value_t = 1e-6, value_parser = positive)]
    pub eps_rel: f64,
    /// Fail with exit code 2 when the checked route's largest relative
    /// error exceeds this.
    #[arg(long, value_parser = positive)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-2, value_parser = positive)]
    pub lr: f64,
    /// Log-uniform half width of the initial bias around truth.
    #[arg(long, default_value_t = 0.1, value_parser = nonnegative)]
    pub bias: f64,
    /// Training blend sharpness.
    #[arg(long, default_value_t = 150.0, value_parser = positive)]
    pub beta: f64,
    /// Stop when the largest gradient entry drops below this.
    #[arg(long, default_value_t = 0.0, value_parser = nonnegative)]
    pub grad_tol: f64,
    /// Initial parameters, comma separated; overrides `--bias`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub params: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
pub struct IdentifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, value_enum, default_value_t = MethodArg::Fwd)]
    pub method: MethodArg,
    /// Seed range `a..b` (exclusive) or `a..=b`, run concurrently.
    #[arg(long, value_parser = seed_range)]
    pub seeds: Option<SeedRange>,
    /// Run record JSON; the loss history goes next to it as `.history.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeedRange(pub Vec<u64>);

fn seed_range(s: &str) -> Result<SeedRange, String> {
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        return Err(format!("expected a..b or a..=b, got {s:?}"));
    };
    let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
    let seeds: Vec<u64> = if inclusive { (a..=b).collect() } else { (a..b).collect() };
    if seeds.is_empty() {
        return Err(format!("empty seed range {s:?}"));
    }
    Ok(SeedRange(seeds))
}

fn positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() { Ok(v) } else { Err(format!("must be positive and finite, got {s}")) }
}

fn nonnegative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() { Ok(v) } else { Err(format!("must be nonnegative and finite, got {s}")) }
}
