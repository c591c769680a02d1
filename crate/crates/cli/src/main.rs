use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use crater_core::dataset::{
    DEFAULT_ACCURACY_THRESHOLD, DEFAULT_BLACK_LEVEL, DEFAULT_MAX_BLACK_FRACTION, DEFAULT_MIN_DIAMETER_PX,
};
use crater_core::eval::{DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESHOLD, DEFAULT_TP_IOU};

mod augment;
mod evaluate;
mod io;
mod preprocess;
mod split;
mod toy;

/// A failed pipeline invariant (exit code 1). Every other error is treated
/// as bad input (exit code 2).
#[derive(Debug)]
pub struct Violation(pub String);

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invariant violated: {}", self.0)
    }
}

impl std::error::Error for Violation {}

#[derive(Parser)]
#[command(name = "crater", version, about = "Crater detection pipeline: preprocessing, splits, augmentation, evaluation and toy LoRA training")]
struct Cli {
    /// Seed for every randomized step.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-tile and per-image stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean annotations and cut 2048 px source tiles into 512 px sub-tiles.
    Preprocess(PreprocessArgs),
    /// Assign whole source images to train / validation / test.
    Split(SplitArgs),
    /// Add one augmented copy of every record.
    Augment(AugmentArgs),
    /// Score predictions against ground truth and render a report.
    Eval(EvalArgs),
    /// Train the toy detector's LoRA adapters and write the loss trajectory.
    ToyTrain(ToyTrainArgs),
    /// Compare analytic and finite-difference gradients of the toy detector.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
pub struct PreprocessArgs {
    /// Annotation CSV with header tile_name,cx,cy,r,accuracy.
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory of 2048 x 2048 grayscale PNGs named <tile_name>.png.
    #[arg(long)]
    pub rasters: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Minimum crowd accuracy of a kept annotation.
    #[arg(long, default_value_t = DEFAULT_ACCURACY_THRESHOLD)]
    pub accuracy_threshold: f64,
    /// Intensities below this count as black.
    #[arg(long, default_value_t = DEFAULT_BLACK_LEVEL)]
    pub black_level: u8,
    /// Largest black share of a kept box.
    #[arg(long, default_value_t = DEFAULT_MAX_BLACK_FRACTION)]
    pub max_black_fraction: f64,
    /// Minimum crater diameter in source pixels.
    #[arg(long, default_value_t = DEFAULT_MIN_DIAMETER_PX)]
    pub min_diameter_px: f64,
    /// Tile names to drop entirely, one per line.
    #[arg(long)]
    pub exclusion_list: Option<PathBuf>,
}

#[derive(Args)]
pub struct SplitArgs {
    /// Record JSON-lines file written by `preprocess`.
    #[arg(long)]
    pub records: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
}

#[derive(Args)]
pub struct AugmentArgs {
    /// Record JSON-lines file (usually train.jsonl).
    #[arg(long)]
    pub records: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Policy table `sub_policy | op | probability | range` replacing the built-in one.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Apply this sub-policy (1-based) to every record instead of sampling.
    #[arg(long)]
    pub sub_policy: Option<usize>,
    /// Print the active policy table and exit.
    #[arg(long)]
    pub print_policy: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Prediction JSON-lines file.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground-truth record JSON-lines file.
    #[arg(long)]
    pub ground_truth: PathBuf,
    /// Anchor JSON; when given, every stored score is checked against the
    /// recomputed cosine similarity.
    #[arg(long)]
    pub anchor: Option<PathBuf>,
    /// A match needs IoU strictly above this.
    #[arg(long, default_value_t = DEFAULT_TP_IOU)]
    pub tp_iou: f64,
    /// NMS removes boxes overlapping a kept box by IoU strictly above this.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    /// Predictions scoring below this are ignored.
    #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD, allow_negative_numbers = true)]
    pub score_threshold: f64,
    /// Also write the text table here.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Write the CSV report here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct ToyTrainArgs {
    /// TOML configuration; missing keys take the reference values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trajectory CSV output (step,lr,l_box,l_cls,l_total).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct GradCheckArgs {
    /// TOML configuration; missing keys take the reference values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of random parameter points.
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    /// Largest acceptable relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring worker threads")?;
    match cli.command {
        Command::Preprocess(a) => preprocess::run(&a),
        Command::Split(a) => split::run(&a, cli.seed),
        Command::Augment(a) => augment::run(&a, cli.seed),
        Command::Eval(a) => evaluate::run(&a),
        Command::ToyTrain(a) => toy::train(&a, cli.seed),
        Command::GradCheck(a) => toy::grad_check(&a, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Violation>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
