//! The subcommands. Each returns the document it wrote so callers and tests can
//! inspect it without re-reading the files.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};

use cropdet_core::backends::{BackendSuite, SuiteSpec};
use cropdet_core::data::{
    build_prompt_batch, ingest_responses, load_caption_manifest, load_detection_dataset,
    read_jsonl, save_caption_manifest, stratified_sample, write_jsonl, CaptionResponse,
    ImageEntry, Split,
};
use cropdet_core::dssa::{
    self, synthetic, AlignmentBatch, AlignmentItem, EpochStat, ToyParams, TrainOutcome,
};
use cropdet_core::embeddings::{Temperature, UnitEmbedding};
use cropdet_core::evaluation::{
    classification_report, evaluate_detections, pair_with_ground_truth, ClassificationReport,
    DetectionReport,
};
use cropdet_core::pipeline::{
    classify_with_embeddings, DetectionDocument, Detector, ImageRecord, Stage,
    DETECTION_FORMAT_VERSION,
};
use cropdet_core::prompts::{class_embeddings_with, ClassVocabulary, PromptSet};
use cropdet_core::Error as CoreError;
use image::RgbImage;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::args::{
    ClassifyArgs, Cli, Command, DetectArgs, EvalClsArgs, EvalDetArgs, GenCaptionsArgs,
    IngestCaptionsArgs, TrainArgs,
};
use crate::config::{ConfigLayer, RunConfig};
use crate::error::{output_error, CliError, CliResult};
use crate::{registry, render};

pub const DETECTIONS_FILE: &str = "detections.json";
pub const CLASSIFICATIONS_FILE: &str = "classifications.json";
pub const ANNOTATED_DIR: &str = "annotated";
pub const LOSS_TRACE_FILE: &str = "loss_trace.csv";
pub const PARAMS_FILE: &str = "params.json";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.json";
pub const CLS_REPORT_FILE: &str = "classification_report.json";
pub const CLS_TABLE_FILE: &str = "classification_per_class.csv";
pub const DET_REPORT_FILE: &str = "detection_report.json";
pub const DET_TABLE_FILE: &str = "detection_per_class.csv";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const REJECTED_FILE: &str = "rejected.jsonl";
pub const VALIDATION_FILE: &str = "validation_sample.jsonl";

/// Feature dimension of the synthetic two-cluster task.
pub const SYNTHETIC_FEATURE_DIM: usize = 8;
pub const SYNTHETIC_HELDOUT: usize = 200;
/// Side of the RGB thumbnail used as image features for manifest training.
pub const THUMBNAIL_SIDE: u32 = 4;

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => ConfigLayer::load(p)?,
        None => ConfigLayer::default(),
    };
    match &cli.command {
        Command::Detect(a) => cmd_detect(a, file).map(drop),
        Command::Classify(a) => cmd_classify(a, file).map(drop),
        Command::TrainDssa(a) => cmd_train_dssa(a, file).map(drop),
        Command::EvalCls(a) => cmd_eval_cls(a, file).map(drop),
        Command::EvalDet(a) => cmd_eval_det(a, file).map(drop),
        Command::GenCaptions(a) => cmd_gen_captions(a, file).map(drop),
        Command::IngestCaptions(a) => cmd_ingest_captions(a, file).map(drop),
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CoreError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(output_error(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    if !path.exists() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    serde_json::from_str(&text).map_err(|e| {
        CoreError::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        }
        .into()
    })
}

fn require(path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Files as given; directories expand to their image files sorted by name.
pub fn expand_images(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CoreError::Io {
                    path: p.display().to_string(),
                    source: e,
                })?
                .flatten()
                .map(|e| e.path())
                .filter(|f| f.is_file() && is_image_file(f))
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::MissingInput(p.clone()));
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no input images".into()));
    }
    Ok(out)
}

/// Record key for an image: its file name. Names must be unique within a run.
fn image_keys(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    let mut seen = HashSet::new();
    paths
        .iter()
        .map(|p| {
            let key = p
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| CliError::Usage(format!("unusable image path {}", p.display())))?
                .to_string();
            if !seen.insert(key.clone()) {
                return Err(CliError::Usage(format!("duplicate image file name {key:?}")));
            }
            Ok(key)
        })
        .collect()
}

/// `--vocab`: an existing file is read one class per line, anything else is a
/// comma-separated list.
pub fn load_vocab(arg: &str) -> CliResult<ClassVocabulary> {
    let path = Path::new(arg);
    let vocab = if !arg.contains(',') && path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
            path: arg.to_string(),
            source: e,
        })?;
        ClassVocabulary::from_text(&text)
    } else {
        ClassVocabulary::from_comma_list(arg)
    };
    vocab.map_err(|e| CliError::Usage(format!("--vocab: {e}")))
}

fn load_prompts(path: Option<&Path>) -> CliResult<PromptSet> {
    match path {
        None => Ok(PromptSet::default()),
        Some(p) => {
            require(p)?;
            let set = PromptSet::load(p)?;
            if set.is_empty() {
                return Err(CliError::Usage(format!(
                    "prompt file {} has no templates",
                    p.display()
                )));
            }
            Ok(set)
        }
    }
}

pub fn load_image(path: &Path) -> CliResult<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|source| CliError::Image {
            path: path.to_path_buf(),
            source,
        })
}

fn worker_pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {workers} workers: {e}")))
}

/// Shared setup of `detect` and `classify`.
struct ModelRun {
    cfg: RunConfig,
    images: Vec<PathBuf>,
    keys: Vec<String>,
    vocab: ClassVocabulary,
    prompts: PromptSet,
    spec: SuiteSpec,
    suite: BackendSuite,
}

fn prepare_model_run(
    command: &str,
    model: &crate::args::ModelArgs,
    layer: ConfigLayer,
    out: &Path,
) -> CliResult<ModelRun> {
    let mut cfg = RunConfig::resolve(command, layer, out.to_path_buf())?;
    let vocab = load_vocab(&model.vocab)?;
    let images = expand_images(&model.images)?;
    let keys = image_keys(&images)?;
    let prompts = load_prompts(cfg.prompt_file.as_deref())?;
    let spec = registry::lookup(&cfg.backends)?;
    let suite = spec.build(cfg.seed)?;
    cfg.suite = Some(spec.clone());
    cfg.prompt_templates = prompts.templates().to_vec();
    cfg.inputs = images.clone();
    cfg.ensure_output_dir()?;
    cfg.write()?;
    Ok(ModelRun {
        cfg,
        images,
        keys,
        vocab,
        prompts,
        spec,
        suite,
    })
}

fn in_image(path: &Path) -> impl FnOnce(CliError) -> CliError + '_ {
    move |e| CliError::InImage {
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

/// Settings that determine the content of a detection document.
#[derive(Serialize)]
struct DocumentConfig<'a> {
    backends: &'a str,
    suite: &'a SuiteSpec,
    pipeline: &'a cropdet_core::pipeline::PipelineConfig,
    prompt_templates: &'a [String],
    masks: bool,
}

pub fn cmd_detect(args: &DetectArgs, file: ConfigLayer) -> CliResult<DetectionDocument> {
    let run = prepare_model_run("detect", &args.model, args.layer().over(file), &args.output.out)?;
    let cfg = &run.cfg;
    let detector = Detector::new(run.vocab.clone(), &run.prompts, &run.suite, cfg.pipeline)?;
    let pool = worker_pool(cfg.workers)?;
    let results: Vec<CliResult<(ImageRecord, Option<RgbImage>)>> = pool.install(|| {
        run.images
            .par_iter()
            .zip(run.keys.par_iter())
            .map(|(path, key)| {
                let image = load_image(path)?;
                let dets = detector.detect(&image).map_err(|e| in_image(path)(e.into()))?;
                let mut record = ImageRecord::from_detections(
                    key.clone(),
                    image.width(),
                    image.height(),
                    &dets,
                    &run.vocab,
                    cfg.pipeline.mask_threshold,
                );
                if !args.masks {
                    record.detections.iter_mut().for_each(|d| d.mask = None);
                }
                info!("{}: {} detections", key, record.detections.len());
                Ok((record, args.render.then_some(image)))
            })
            .collect()
    });
    let mut records = Vec::with_capacity(results.len());
    let mut rendered = Vec::new();
    for r in results {
        let (record, image) = r?;
        if let Some(img) = image {
            rendered.push((render::annotate(&img, &record), record.image.clone()));
        }
        records.push(record);
    }
    let doc = DetectionDocument {
        format_version: DETECTION_FORMAT_VERSION,
        seed: cfg.seed,
        config: serde_json::to_value(DocumentConfig {
            backends: &cfg.backends,
            suite: &run.spec,
            pipeline: &cfg.pipeline,
            prompt_templates: &cfg.prompt_templates,
            masks: args.masks,
        })
        .map_err(CoreError::from)?,
        vocabulary: run.vocab.clone(),
        records,
    };
    write_json(&cfg.output.join(DETECTIONS_FILE), &doc)?;
    if args.render {
        let dir = cfg.output.join(ANNOTATED_DIR);
        std::fs::create_dir_all(&dir).map_err(output_error(&dir))?;
        for (img, key) in rendered {
            let stem = Path::new(&key).file_stem().map_or(key.clone(), |s| s.to_string_lossy().into_owned());
            let path = dir.join(format!("{stem}.png"));
            img.save(&path).map_err(|source| CliError::Image { path, source })?;
        }
        let legend: Vec<_> = run
            .vocab
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| serde_json::json!({ "class_name": n, "rgb": render::class_color(i) }))
            .collect();
        write_json(&dir.join("legend.json"), &legend)?;
    }
    Ok(doc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub image: String,
    pub class_index: usize,
    pub class_name: String,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationDocument {
    pub format_version: u32,
    pub seed: u64,
    pub temperature: f64,
    pub vocabulary: ClassVocabulary,
    pub records: Vec<ClassificationRecord>,
}

pub fn cmd_classify(args: &ClassifyArgs, file: ConfigLayer) -> CliResult<ClassificationDocument> {
    let run = prepare_model_run("classify", &args.model, args.layer().over(file), &args.output.out)?;
    let cfg = &run.cfg;
    let tau = Temperature::new(cfg.temperature)?;
    let text: Vec<UnitEmbedding> = class_embeddings_with(
        &run.vocab,
        &run.prompts,
        cfg.pipeline.prompt_ensemble,
        |p| run.suite.encode_text(p),
    )
    .map_err(|e| match e {
        CoreError::Backend(source) => CoreError::Stage {
            stage: Stage::ClassEmbedding,
            source,
        },
        other => other,
    })?;
    let pool = worker_pool(cfg.workers)?;
    let records: Vec<CliResult<ClassificationRecord>> = pool.install(|| {
        run.images
            .par_iter()
            .zip(run.keys.par_iter())
            .map(|(path, key)| {
                let image = load_image(path)?;
                let g = classify_with_embeddings(&image, &text, &run.suite, tau)
                    .map_err(|e| in_image(path)(e.into()))?;
                Ok(ClassificationRecord {
                    image: key.clone(),
                    class_index: g.class_index,
                    class_name: run.vocab.name(g.class_index).to_string(),
                    probabilities: g.probabilities,
                })
            })
            .collect()
    });
    let doc = ClassificationDocument {
        format_version: DETECTION_FORMAT_VERSION,
        seed: cfg.seed,
        temperature: cfg.temperature,
        vocabulary: run.vocab.clone(),
        records: records.into_iter().collect::<CliResult<_>>()?,
    };
    write_json(&cfg.output.join(CLASSIFICATIONS_FILE), &doc)?;
    Ok(doc)
}

/// Flattened `THUMBNAIL_SIDE x THUMBNAIL_SIDE` RGB thumbnail scaled to [0, 1].
pub fn thumbnail_features(image: &RgbImage) -> Vec<f64> {
    image::imageops::resize(
        image,
        THUMBNAIL_SIDE,
        THUMBNAIL_SIDE,
        image::imageops::FilterType::Triangle,
    )
    .pixels()
    .flat_map(|p| p.0)
    .map(|c| f64::from(c) / 255.0)
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_tau: f64,
    /// Nearest-caption accuracy on held-out points (synthetic task only).
    pub heldout_accuracy: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<EpochStat>,
}

fn manifest_batches(
    manifest: &Path,
    image_root: Option<&Path>,
    batch_size: usize,
) -> CliResult<Vec<AlignmentBatch>> {
    require(manifest)?;
    let root = image_root
        .map(Path::to_path_buf)
        .or_else(|| manifest.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    let records = load_caption_manifest(manifest)?;
    let items = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| {
            let path = root.join(&r.image);
            require(&path)?;
            Ok(AlignmentItem {
                features: thumbnail_features(&load_image(&path)?),
                caption: r.caption.clone(),
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    if items.is_empty() {
        return Err(CliError::Core(CoreError::Dataset(format!(
            "{} has no train-split records",
            manifest.display()
        ))));
    }
    items
        .chunks(batch_size)
        .map(|c| AlignmentBatch::new(c.to_vec()).map_err(CliError::from))
        .collect()
}

pub fn cmd_train_dssa(args: &TrainArgs, file: ConfigLayer) -> CliResult<TrainSummary> {
    let mut cfg = RunConfig::resolve("train-dssa", args.layer().over(file), args.output.out.clone())?;
    let (batches, heldout, feature_dim) = if args.synthetic {
        let (b, h) = synthetic::two_cluster_task(
            cfg.seed,
            args.synthetic_batches,
            SYNTHETIC_HELDOUT,
            SYNTHETIC_FEATURE_DIM,
        );
        (b, Some(h), SYNTHETIC_FEATURE_DIM)
    } else {
        let manifest = args.manifest.as_deref().expect("clap requires --manifest");
        cfg.inputs = vec![manifest.to_path_buf()];
        let dim = (THUMBNAIL_SIDE * THUMBNAIL_SIDE * 3) as usize;
        (
            manifest_batches(manifest, args.image_root.as_deref(), cfg.train.batch_size)?,
            None,
            dim,
        )
    };
    cfg.ensure_output_dir()?;
    cfg.write()?;
    let params = ToyParams::init(
        feature_dim,
        args.embed_dim,
        &batches,
        cfg.train.temperature_init,
        cfg.seed,
    )?;
    let outcome: TrainOutcome = dssa::train_toy(&cfg.train, params, &batches)?;
    let trace_path = cfg.output.join(LOSS_TRACE_FILE);
    let mut csv = Vec::new();
    dssa::write_loss_trace(&mut csv, &outcome.trace).map_err(output_error(&trace_path))?;
    std::fs::write(&trace_path, csv).map_err(output_error(&trace_path))?;
    write_json(&cfg.output.join(PARAMS_FILE), &outcome.params)?;
    let summary = TrainSummary {
        steps: outcome.steps,
        initial_loss: outcome.initial_loss(),
        final_loss: outcome.final_loss(),
        final_tau: outcome.params.tau(),
        heldout_accuracy: heldout
            .map(|h| synthetic::nearest_caption_accuracy(&outcome.params, &h))
            .transpose()?,
        trace: outcome.trace,
    };
    write_json(&cfg.output.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// One label line; caption manifests qualify through the `species` alias.
#[derive(Debug, Clone, Deserialize)]
struct LabelRecord {
    image: String,
    #[serde(alias = "species")]
    class: String,
}

#[derive(Debug, Serialize)]
struct NamedClassificationReport<'a> {
    class_names: &'a [String],
    #[serde(flatten)]
    report: &'a ClassificationReport,
}

fn eval_config(command: &str, file: ConfigLayer, out: &Path, inputs: Vec<PathBuf>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::resolve(command, file, out.to_path_buf())?;
    cfg.inputs = inputs;
    Ok(cfg)
}

pub fn cmd_eval_cls(args: &EvalClsArgs, file: ConfigLayer) -> CliResult<ClassificationReport> {
    let cfg = eval_config(
        "eval-cls",
        file,
        &args.out,
        vec![args.predictions.clone(), args.truth.clone()],
    )?;
    let doc: ClassificationDocument = read_json(&args.predictions)?;
    require(&args.truth)?;
    let labels: Vec<LabelRecord> = read_jsonl(&args.truth)?.into_iter().map(|(_, l)| l).collect();
    if labels.len() != doc.records.len() {
        return Err(CoreError::Dataset(format!(
            "{} predictions but {} labels",
            doc.records.len(),
            labels.len()
        ))
        .into());
    }
    let label_of: HashMap<&str, &str> = labels
        .iter()
        .map(|l| (l.image.as_str(), l.class.as_str()))
        .collect();
    let mut predictions = Vec::with_capacity(labels.len());
    let mut truths = Vec::with_capacity(labels.len());
    for r in &doc.records {
        let label = label_of.get(r.image.as_str()).ok_or_else(|| {
            CoreError::Dataset(format!("no label for image {:?}", r.image))
        })?;
        let t = doc.vocabulary.index_of(label).ok_or_else(|| {
            CoreError::Dataset(format!("label {label:?} of {:?} is not in the vocabulary", r.image))
        })?;
        predictions.push(r.class_index);
        truths.push(t);
    }
    let report = classification_report(&predictions, &truths, doc.vocabulary.len())?;
    cfg.ensure_output_dir()?;
    cfg.write()?;
    write_json(
        &cfg.output.join(CLS_REPORT_FILE),
        &NamedClassificationReport {
            class_names: doc.vocabulary.names(),
            report: &report,
        },
    )?;
    let table_path = cfg.output.join(CLS_TABLE_FILE);
    std::fs::write(&table_path, report.per_class_csv(doc.vocabulary.names())?)
        .map_err(output_error(&table_path))?;
    Ok(report)
}

pub fn cmd_eval_det(args: &EvalDetArgs, file: ConfigLayer) -> CliResult<DetectionReport> {
    let cfg = eval_config(
        "eval-det",
        file,
        &args.out,
        vec![args.detections.clone(), args.truth.clone()],
    )?;
    let doc: DetectionDocument = read_json(&args.detections)?;
    require(&args.truth)?;
    let dataset = load_detection_dataset(&args.truth)?;
    let images = pair_with_ground_truth(&doc, &dataset)?;
    let report = evaluate_detections(&images, dataset.vocabulary.names());
    cfg.ensure_output_dir()?;
    cfg.write()?;
    write_json(&cfg.output.join(DET_REPORT_FILE), &report)?;
    let table_path = cfg.output.join(DET_TABLE_FILE);
    std::fs::write(&table_path, report.per_class_csv()?).map_err(output_error(&table_path))?;
    Ok(report)
}

pub fn cmd_gen_captions(
    args: &GenCaptionsArgs,
    file: ConfigLayer,
) -> CliResult<Vec<cropdet_core::data::PromptRequest>> {
    let cfg = eval_config("gen-captions", file, &args.out, vec![args.index.clone()])?;
    require(&args.index)?;
    let entries: Vec<ImageEntry> = read_jsonl(&args.index)?.into_iter().map(|(_, e)| e).collect();
    let batch = build_prompt_batch(&entries)?;
    cfg.ensure_output_dir()?;
    cfg.write()?;
    write_jsonl(cfg.output.join(PROMPTS_FILE), &batch)?;
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub image: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestSummary {
    pub accepted: usize,
    pub rejected: Vec<Rejection>,
    pub validation: usize,
}

pub fn cmd_ingest_captions(args: &IngestCaptionsArgs, file: ConfigLayer) -> CliResult<IngestSummary> {
    let layer = ConfigLayer {
        seed: args.seed,
        ..Default::default()
    }
    .over(file);
    let cfg = eval_config(
        "ingest-captions",
        layer,
        &args.out,
        vec![args.index.clone(), args.responses.clone()],
    )?;
    require(&args.index)?;
    require(&args.responses)?;
    let entries: Vec<ImageEntry> = read_jsonl(&args.index)?.into_iter().map(|(_, e)| e).collect();
    let responses: Vec<CaptionResponse> =
        read_jsonl(&args.responses)?.into_iter().map(|(_, r)| r).collect();
    let outcome = ingest_responses(&entries, &responses)?;
    let validation = if outcome.accepted.is_empty() {
        Vec::new()
    } else {
        stratified_sample(&outcome.accepted, args.validation_fraction, cfg.seed)?
    };
    let rejected: Vec<Rejection> = outcome
        .rejected
        .into_iter()
        .map(|(image, reason)| Rejection { image, reason })
        .collect();
    cfg.ensure_output_dir()?;
    cfg.write()?;
    save_caption_manifest(cfg.output.join(CAPTIONS_FILE), &outcome.accepted)?;
    write_jsonl(cfg.output.join(REJECTED_FILE), &rejected)?;
    save_caption_manifest(cfg.output.join(VALIDATION_FILE), &validation)?;
    Ok(IngestSummary {
        accepted: outcome.accepted.len(),
        rejected,
        validation: validation.len(),
    })
}
