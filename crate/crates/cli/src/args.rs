use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relate3d::data_io::ScenePattern;

#[derive(Debug, Parser)]
#[command(name = "relate3d", version, about = "Relation-graph refinement experiments for 3D detection proposals")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic frames as JSONL.
    Synth(SynthArgs),
    /// Build the proposal graph of one or all frames.
    Graph(GraphArgs),
    /// Train the relation module and refinement head.
    Train(TrainArgs),
    /// Refine proposals with a trained checkpoint.
    Refine(RefineArgs),
    /// Compute KITTI-style AP of detections against ground truth.
    Eval(EvalArgs),
    /// Run an oracle suite and report the largest error.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum PatternArg {
    ParallelParking,
    MultiLane,
    Mixed,
    Uniform,
}

impl From<PatternArg> for ScenePattern {
    fn from(p: PatternArg) -> Self {
        match p {
            PatternArg::ParallelParking => ScenePattern::ParallelParking,
            PatternArg::MultiLane => ScenePattern::MultiLane,
            PatternArg::Mixed => ScenePattern::Mixed,
            PatternArg::Uniform => ScenePattern::Uniform,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub pattern: PatternArg,
    /// Ground-truth objects per frame.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of frames to write.
    #[arg(long, default_value_t = 1)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    /// Proposal heading noise std-dev (rad).
    #[arg(long, default_value_t = 0.15)]
    pub heading_noise: f64,
    /// Proposal center noise std-dev (m).
    #[arg(long, default_value_t = 0.3)]
    pub center_noise: f64,
    /// Nominal gap between neighbouring cars (m).
    #[arg(long, default_value_t = 6.5)]
    pub spacing: f64,
    /// False proposals added per frame.
    #[arg(long, default_value_t = 2)]
    pub distractors: usize,
    /// Feature observation noise relative to the proposal noise.
    #[arg(long, default_value_t = 1.0)]
    pub feature_noise_scale: f64,
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Knn,
    Radius,
}

#[derive(Debug, Args)]
pub struct GraphArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Knn)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 6.0)]
    pub r: f64,
    /// Only this frame; all frames otherwise.
    #[arg(long)]
    pub frame_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Use the exhaustive reference construction instead of the kd-tree.
    #[arg(long)]
    pub brute_force: bool,
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training frames (JSONL).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Validation frames; without it the last fifth of `--in` is held out.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// RelationConfig JSON; missing fields take the toy defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma list of enabled components: init_box, box_diff, feature_append.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
    #[arg(long)]
    pub metrics_out: PathBuf,
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub node_dim: Option<usize>,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_frames: usize,
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RecallArg {
    R11,
    R40,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Frames carrying ground truth (JSONL).
    #[arg(long)]
    pub gt: PathBuf,
    /// Per-frame detections (JSONL).
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "Car,Pedestrian,Cyclist")]
    pub classes: Vec<String>,
    #[arg(long = "iou-3d")]
    pub iou_3d: Option<f64>,
    #[arg(long = "iou-bev")]
    pub iou_bev: Option<f64>,
    #[arg(long, value_enum, default_value_t = RecallArg::R40)]
    pub recall_mode: RecallArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the interpolated precision/recall samples as CSV.
    #[arg(long)]
    pub pr_out: Option<PathBuf>,
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grad,
    Graph,
    Iou,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances; each suite has its own default.
    #[arg(long)]
    pub trials: Option<usize>,
}
