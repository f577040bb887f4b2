//! Layered run configuration: command-line flags over a TOML file over defaults.

use std::path::{Path, PathBuf};

use cropdet_core::backends::SuiteSpec;
use cropdet_core::dssa::TrainConfig;
use cropdet_core::embeddings::Temperature;
use cropdet_core::pipeline::{EmptyMaskPolicy, PipelineConfig};
use cropdet_core::prompts::PromptEnsemble;
use serde::{Deserialize, Serialize};

use crate::error::{output_error, CliError, CliResult};
use crate::registry::BUILTIN_STUB;

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineLayer {
    pub iou_threshold: Option<f64>,
    pub mask_threshold: Option<f64>,
    pub class_aware_nms: Option<bool>,
    pub empty_mask_policy: Option<EmptyMaskPolicy>,
    pub prompt_ensemble: Option<PromptEnsemble>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainLayer {
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub temperature_init: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyLayer {
    pub temperature: Option<f64>,
}

/// One configuration layer; every field optional. Used for both the config file
/// and the flags given on the command line.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub backends: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub prompt_file: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineLayer,
    #[serde(default)]
    pub train: TrainLayer,
    #[serde(default)]
    pub classify: ClassifyLayer,
}

fn pick<T>(top: Option<T>, bottom: Option<T>) -> Option<T> {
    top.or(bottom)
}

impl ConfigLayer {
    /// Parse a TOML file. A relative `prompt_file` is taken relative to the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut layer: ConfigLayer = toml::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let (Some(p), Some(dir)) = (&layer.prompt_file, path.parent()) {
            if p.is_relative() {
                layer.prompt_file = Some(dir.join(p));
            }
        }
        Ok(layer)
    }

    /// `self` wins wherever it has a value.
    pub fn over(self, below: ConfigLayer) -> ConfigLayer {
        ConfigLayer {
            backends: pick(self.backends, below.backends),
            seed: pick(self.seed, below.seed),
            workers: pick(self.workers, below.workers),
            prompt_file: pick(self.prompt_file, below.prompt_file),
            pipeline: PipelineLayer {
                iou_threshold: pick(self.pipeline.iou_threshold, below.pipeline.iou_threshold),
                mask_threshold: pick(self.pipeline.mask_threshold, below.pipeline.mask_threshold),
                class_aware_nms: pick(self.pipeline.class_aware_nms, below.pipeline.class_aware_nms),
                empty_mask_policy: pick(
                    self.pipeline.empty_mask_policy,
                    below.pipeline.empty_mask_policy,
                ),
                prompt_ensemble: pick(self.pipeline.prompt_ensemble, below.pipeline.prompt_ensemble),
            },
            train: TrainLayer {
                epochs: pick(self.train.epochs, below.train.epochs),
                learning_rate: pick(self.train.learning_rate, below.train.learning_rate),
                batch_size: pick(self.train.batch_size, below.train.batch_size),
                temperature_init: pick(self.train.temperature_init, below.train.temperature_init),
            },
            classify: ClassifyLayer {
                temperature: pick(self.classify.temperature, below.classify.temperature),
            },
        }
    }
}

/// Fully resolved settings for one invocation; written as `run_config.json`
/// beside the outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub backends: String,
    pub suite: Option<SuiteSpec>,
    pub seed: u64,
    pub workers: usize,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub temperature: f64,
    pub prompt_file: Option<PathBuf>,
    pub prompt_templates: Vec<String>,
    pub inputs: Vec<PathBuf>,
    pub output: PathBuf,
}

pub const RUN_CONFIG_FILE: &str = "run_config.json";

impl RunConfig {
    /// Fill every unset value from the defaults and validate the result.
    pub fn resolve(command: &str, layer: ConfigLayer, output: PathBuf) -> CliResult<Self> {
        let pd = PipelineConfig::default();
        let pipeline = PipelineConfig {
            iou_threshold: layer.pipeline.iou_threshold.unwrap_or(pd.iou_threshold),
            mask_threshold: layer.pipeline.mask_threshold.unwrap_or(pd.mask_threshold),
            class_aware_nms: layer.pipeline.class_aware_nms.unwrap_or(pd.class_aware_nms),
            empty_mask_policy: layer.pipeline.empty_mask_policy.unwrap_or(pd.empty_mask_policy),
            prompt_ensemble: layer.pipeline.prompt_ensemble.unwrap_or(pd.prompt_ensemble),
        };
        pipeline.validate()?;
        let seed = layer.seed.unwrap_or(0);
        let td = TrainConfig::default();
        let train = TrainConfig {
            epochs: layer.train.epochs.unwrap_or(td.epochs),
            learning_rate: layer.train.learning_rate.unwrap_or(td.learning_rate),
            batch_size: layer.train.batch_size.unwrap_or(td.batch_size),
            temperature_init: layer.train.temperature_init.unwrap_or(td.temperature_init),
            seed,
        };
        train.validate()?;
        let temperature = layer.classify.temperature.unwrap_or(Temperature::INIT);
        Temperature::new(temperature)?;
        let workers = layer.workers.unwrap_or(1);
        if workers == 0 {
            return Err(CliError::Usage("--workers must be at least 1".into()));
        }
        Ok(Self {
            command: command.to_string(),
            backends: layer.backends.unwrap_or_else(|| BUILTIN_STUB.to_string()),
            suite: None,
            seed,
            workers,
            pipeline,
            train,
            temperature,
            prompt_file: layer.prompt_file,
            prompt_templates: Vec::new(),
            inputs: Vec::new(),
            output,
        })
    }

    pub fn write(&self) -> CliResult<()> {
        let path = self.output.join(RUN_CONFIG_FILE);
        crate::commands::write_json(&path, self)
    }

    pub(crate) fn ensure_output_dir(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.output).map_err(output_error(&self.output))
    }
}
