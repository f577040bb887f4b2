use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::config::{ClassifyLayer, ConfigLayer, PipelineLayer, TrainLayer};

#[derive(Debug, Parser)]
#[command(name = "cropdet", version, about = "Open-vocabulary crop detection, alignment training and evaluation")]
pub struct Cli {
    /// TOML config file; command-line flags take precedence over its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect vocabulary classes in images.
    Detect(DetectArgs),
    /// Classify whole images against the vocabulary.
    Classify(ClassifyArgs),
    /// Train the toy alignment encoders and write the loss trace.
    TrainDssa(TrainArgs),
    /// Score image classifications against labels.
    EvalCls(EvalClsArgs),
    /// Compute AP50/AP75 for a detection document against ground truth.
    EvalDet(EvalDetArgs),
    /// Write one caption-generation prompt per image.
    GenCaptions(GenCaptionsArgs),
    /// Join caption responses into a caption manifest.
    IngestCaptions(IngestCaptionsArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Detect(_) => "detect",
            Command::Classify(_) => "classify",
            Command::TrainDssa(_) => "train-dssa",
            Command::EvalCls(_) => "eval-cls",
            Command::EvalDet(_) => "eval-det",
            Command::GenCaptions(_) => "gen-captions",
            Command::IngestCaptions(_) => "ingest-captions",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for per-image work.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Image files or directories (PNG/JPEG files inside a directory, sorted by name).
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    /// Comma-separated class names, or a file with one class name per line.
    #[arg(long)]
    pub vocab: String,
    /// Backend suite name.
    #[arg(long)]
    pub backends: Option<String>,
    /// File of prompt templates, one per line, each containing `{}`.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    #[arg(long)]
    pub mask_threshold: Option<f64>,
    /// Suppress only within a class (`true`) or across classes (`false`).
    #[arg(long, action = ArgAction::Set)]
    pub class_aware_nms: Option<bool>,
    /// Also write annotated copies of the images.
    #[arg(long)]
    pub render: bool,
    /// Include run-length encoded masks in the output document.
    #[arg(long)]
    pub masks: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifyArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Softmax temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub output: OutputArgs,
    /// Caption manifest; the train split is used.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    pub manifest: Option<PathBuf>,
    /// Directory that manifest image paths are relative to (defaults to the manifest's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Train on the built-in two-cluster task instead of a manifest. Batches hold
    /// one item per cluster; --batch-size is ignored.
    #[arg(long)]
    pub synthetic: bool,
    /// Number of batches in the synthetic task.
    #[arg(long, default_value_t = 20)]
    pub synthetic_batches: usize,
    #[arg(long, default_value_t = cropdet_core::dssa::TOY_EMBED_DIM)]
    pub embed_dim: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub temperature_init: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalClsArgs {
    /// Document written by `classify`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// JSON Lines labels with `image` and `class` (or `species`) fields.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalDetArgs {
    /// Document written by `detect`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Ground-truth annotation file.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenCaptionsArgs {
    /// JSON Lines image index with `image`, `species` and `split` fields.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct IngestCaptionsArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// JSON Lines responses with `image` and `caption` fields.
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of each species drawn into the validation sample.
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl OutputArgs {
    fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            seed: self.seed,
            workers: self.workers,
            ..Default::default()
        }
    }
}

impl ModelArgs {
    fn layer(&self, output: &OutputArgs) -> ConfigLayer {
        ConfigLayer {
            backends: self.backends.clone(),
            prompt_file: self.prompt_file.clone(),
            ..output.layer()
        }
    }
}

impl DetectArgs {
    pub fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            pipeline: PipelineLayer {
                iou_threshold: self.iou_threshold,
                mask_threshold: self.mask_threshold,
                class_aware_nms: self.class_aware_nms,
                ..Default::default()
            },
            ..self.model.layer(&self.output)
        }
    }
}

impl ClassifyArgs {
    pub fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            classify: ClassifyLayer {
                temperature: self.temperature,
            },
            ..self.model.layer(&self.output)
        }
    }
}

impl TrainArgs {
    pub fn layer(&self) -> ConfigLayer {
        ConfigLayer {
            train: TrainLayer {
                epochs: self.epochs,
                learning_rate: self.learning_rate,
                batch_size: self.batch_size,
                temperature_init: self.temperature_init,
            },
            ..self.output.layer()
        }
    }
}
