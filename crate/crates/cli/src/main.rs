use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser, Debug)]
#[command(name = "mcrec", version, about = "Multi-criteria graph recommendation")]
pub struct Cli {
    /// Worker threads for ranking and propagation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a raw rating log and normalize it to TSV.
    Ingest(IngestArgs),
    /// Binarize, filter and split ratings into train/valid/test.
    Split(SplitArgs),
    /// Generate a planted-preference rating log.
    Synth(SynthArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Print the top-K items for one user.
    Recommend(RecommendArgs),
    /// Time one full-batch epoch at increasing graph sizes.
    Bench(BenchArgs),
    /// Per-layer smoothness of a trained model.
    Diagnose(DiagnoseArgs),
    /// Train one model per value of a hyperparameter.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Args, Debug, Clone)]
pub struct SpecArgs {
    /// JSON list of criterion specs (index, name, min, max, rule).
    #[arg(long)]
    pub specs: Option<PathBuf>,
    /// Without --specs: number of side criteria, each rated on --scale.
    #[arg(long, default_value_t = 0)]
    pub criteria: usize,
    /// Without --specs: rating scale as MIN,MAX.
    #[arg(long, default_value = "1,5", value_delimiter = ',', num_args = 2)]
    pub scale: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Ratings as TSV (user, item, criterion, value) or JSON.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub specs: SpecArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// A ratings file, or a directory holding ratings.tsv and specs.json.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub specs: SpecArgs,
    /// Drop users and items with fewer overall positives than this.
    #[arg(long, default_value_t = 1)]
    pub min_interactions: usize,
    #[arg(long, default_value_t = 0.1)]
    pub valid: f64,
    #[arg(long, default_value_t = 0.2)]
    pub test: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// JSON generator config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub criteria: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Use the hotel-review shape (7 partially covered criteria).
    #[arg(long)]
    pub hotel: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model and optimizer settings. Precedence: flags, then --config, then defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// JSON training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// cpa_lgc, lightgcn or lightgcn_mc.
    #[arg(long)]
    pub model: Option<String>,
    /// full, mc_only, no_cp, no_f, or a comma list of switches.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_enum)]
    pub pairnorm: Option<Switch>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Directory written by `split`.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "5,10", value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Independent runs with seeds seed, seed+1, ...; metrics are averaged.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "5,10", value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RecommendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split directory; its train (and valid) items are never recommended.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub user: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Edge counts, strictly increasing.
    #[arg(long, default_value = "10000,100000,1000000", value_delimiter = ',')]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub criteria: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Seed for node subsampling on large graphs.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// layers, dim, alpha or n_criteria.
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MCREC_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
