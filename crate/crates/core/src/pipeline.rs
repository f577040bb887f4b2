//! End-to-end open-vocabulary detection.
//!
//! Per image: class text embeddings, both proposal streams, union, crop-and-embed,
//! similarity scoring, mask refinement and box tightening, per-image min-max
//! normalization of the semantic and mask-quality scores, multiplicative fusion
//! and greedy NMS. A separate whole-image path produces a class distribution.

use std::fmt;

use image::RgbImage;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendError, BackendSuite, ImageRegion, Proposal, ProposalSource};
use crate::embeddings::{
    argmax, classify_rows, l2_normalize, similarity_matrix, softmax_classify, Temperature,
    UnitEmbedding,
};
use crate::error::{Error, Result};
use crate::geometry::{
    box_from_mask, clamp_box, nms, BinaryMask, BoundingBox, MaskRle, NmsCandidate,
    DEFAULT_MASK_THRESHOLD,
};
use crate::prompts::{class_embeddings_with, ClassVocabulary, PromptEnsemble, PromptSet};

/// Default suppression threshold.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Pipeline stage, reported with backend failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    ClassEmbedding,
    CanonicalProposals,
    GroundedProposals,
    RegionEmbedding,
    Refinement,
    GlobalEmbedding,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::ClassEmbedding => "class-embedding",
            Stage::CanonicalProposals => "canonical-proposals",
            Stage::GroundedProposals => "grounded-proposals",
            Stage::RegionEmbedding => "region-embedding",
            Stage::Refinement => "refinement",
            Stage::GlobalEmbedding => "global-embedding",
        })
    }
}

fn at(stage: Stage) -> impl Fn(BackendError) -> Error {
    move |source| Error::Stage { stage, source }
}

/// What to do when the refiner returns a mask with no pixel above threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyMaskPolicy {
    /// Keep the proposal box and set the refiner quality to 0.
    #[default]
    FallbackKeep,
    /// Discard the proposal.
    Drop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub iou_threshold: f64,
    pub mask_threshold: f64,
    pub class_aware_nms: bool,
    pub empty_mask_policy: EmptyMaskPolicy,
    pub prompt_ensemble: PromptEnsemble,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            class_aware_nms: true,
            empty_mask_policy: EmptyMaskPolicy::FallbackKeep,
            prompt_ensemble: PromptEnsemble::Mean,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("mask_threshold", self.mask_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A final detection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub proposal: Proposal,
    pub class_index: usize,
    /// Maximum cosine similarity over the vocabulary.
    pub raw_score: f64,
    pub refined_box: BoundingBox,
    pub refiner_quality: f64,
    /// Product of the min-max normalized raw score and refiner quality.
    pub fused_score: f64,
    pub mask: Option<BinaryMask>,
}

/// Concatenate both streams, canonical first. Duplicates are kept; NMS handles them.
pub fn unify_proposals(canonical: Vec<Proposal>, grounded: Vec<Proposal>) -> Vec<Proposal> {
    let mut all = canonical;
    all.extend(grounded);
    all
}

/// A proposal that survived cropping, with its normalized embedding.
#[derive(Debug, Clone)]
pub struct RegionEmbedding {
    pub proposal: Proposal,
    pub embedding: UnitEmbedding,
}

/// Crop, resize and encode every proposal.
///
/// Proposals whose clamped box covers no pixel, or whose encoding has zero norm,
/// are dropped with a warning. Output order follows input order.
pub fn embed_regions(
    image: &RgbImage,
    proposals: &[Proposal],
    suite: &BackendSuite,
) -> Result<Vec<RegionEmbedding>> {
    let embed_one = |p: &Proposal| -> Result<Option<RegionEmbedding>> {
        let Some(region) = ImageRegion::crop(image, &p.bbox) else {
            warn!("dropping zero-area proposal {:?}", p.bbox.to_array());
            return Ok(None);
        };
        let raw = suite
            .encode_region(&region)
            .map_err(at(Stage::RegionEmbedding))?;
        match l2_normalize(&raw) {
            Ok(embedding) => Ok(Some(RegionEmbedding {
                proposal: *p,
                embedding,
            })),
            Err(e) => {
                warn!("dropping proposal {:?}: {e}", p.bbox.to_array());
                Ok(None)
            }
        }
    };
    let results: Vec<Result<Option<RegionEmbedding>>> = if suite.fully_shared() {
        proposals.par_iter().map(embed_one).collect()
    } else {
        proposals.iter().map(embed_one).collect()
    };
    results
        .into_iter()
        .filter_map(|r| r.transpose())
        .collect()
}

/// `(s - min) / (max - min)`; every value maps to 1.0 when `max == min`.
pub fn minmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite score {s}")));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![1.0; scores.len()]);
    }
    Ok(scores
        .iter()
        .map(|s| ((s - min) / span).clamp(0.0, 1.0))
        .collect())
}

pub fn fuse_scores(cl_norm: f64, sam_norm: f64) -> f64 {
    cl_norm * sam_norm
}

/// Runs detection for one vocabulary over any number of images.
///
/// Class embeddings are computed once at construction.
pub struct Detector<'a> {
    vocab: ClassVocabulary,
    suite: &'a BackendSuite,
    config: PipelineConfig,
    class_embeddings: Vec<UnitEmbedding>,
}

impl<'a> Detector<'a> {
    pub fn new(
        vocab: ClassVocabulary,
        prompts: &PromptSet,
        suite: &'a BackendSuite,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let class_embeddings =
            class_embeddings_with(&vocab, prompts, config.prompt_ensemble, |p| {
                suite.encode_text(p)
            })
            .map_err(|e| match e {
                Error::Backend(b) => at(Stage::ClassEmbedding)(b),
                other => other,
            })?;
        Ok(Self {
            vocab,
            suite,
            config,
            class_embeddings,
        })
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn class_embeddings(&self) -> &[UnitEmbedding] {
        &self.class_embeddings
    }

    pub fn detect(&self, image: &RgbImage) -> Result<Vec<ScoredDetection>> {
        let (w, h) = image.dimensions();
        let suite = self.suite;

        let canonical = suite
            .propose_canonical(image)
            .map_err(at(Stage::CanonicalProposals))?;
        let grounded = suite
            .propose_grounded(image, &self.vocab)
            .map_err(at(Stage::GroundedProposals))?;
        let proposals: Vec<Proposal> = unify_proposals(canonical, grounded)
            .into_iter()
            .map(|p| p.clamped(w, h))
            .collect();

        let regions = embed_regions(image, &proposals, suite)?;
        if regions.is_empty() {
            return Ok(Vec::new());
        }
        let visual: Vec<UnitEmbedding> = regions.iter().map(|r| r.embedding.clone()).collect();
        let sims = similarity_matrix(&visual, &self.class_embeddings)?;
        let classified = classify_rows(&sims);

        let refine_one = |r: &RegionEmbedding| suite.refine(image, &r.proposal.bbox);
        let refinements: Vec<_> = if suite.fully_shared() {
            regions.par_iter().map(refine_one).collect()
        } else {
            regions.iter().map(refine_one).collect()
        };

        let mut staged = Vec::with_capacity(regions.len());
        for ((region, (class_index, raw_score)), refined) in
            regions.iter().zip(classified).zip(refinements)
        {
            let refined = refined.map_err(at(Stage::Refinement))?;
            if (refined.mask.width(), refined.mask.height()) != (w, h) {
                return Err(at(Stage::Refinement)(BackendError::new(
                    suite.mask_refiner.name(),
                    format!(
                        "mask is {}x{}, image is {w}x{h}",
                        refined.mask.width(),
                        refined.mask.height()
                    ),
                )));
            }
            let (refined_box, quality, mask) =
                match box_from_mask(&refined.mask, self.config.mask_threshold) {
                    Some(b) => (clamp_box(&b, w, h), refined.quality, Some(refined.mask)),
                    None => match self.config.empty_mask_policy {
                        EmptyMaskPolicy::FallbackKeep => (region.proposal.bbox, 0.0, None),
                        EmptyMaskPolicy::Drop => continue,
                    },
                };
            staged.push(ScoredDetection {
                proposal: region.proposal,
                class_index,
                raw_score,
                refined_box,
                refiner_quality: quality,
                fused_score: 0.0,
                mask,
            });
        }
        if staged.is_empty() {
            return Ok(Vec::new());
        }

        let cl: Vec<f64> = staged.iter().map(|d| d.raw_score).collect();
        let sam: Vec<f64> = staged.iter().map(|d| d.refiner_quality).collect();
        let cl = minmax_normalize(&cl)?;
        let sam = minmax_normalize(&sam)?;
        for (d, (c, s)) in staged.iter_mut().zip(cl.into_iter().zip(sam)) {
            d.fused_score = fuse_scores(c, s);
        }

        let candidates: Vec<NmsCandidate> = staged
            .iter()
            .map(|d| NmsCandidate {
                bbox: d.refined_box,
                score: d.fused_score,
                class_index: d.class_index,
            })
            .collect();
        let keep = nms(
            &candidates,
            self.config.iou_threshold,
            self.config.class_aware_nms,
        );
        let mut slots: Vec<Option<ScoredDetection>> = staged.into_iter().map(Some).collect();
        Ok(keep
            .into_iter()
            .filter_map(|i| slots[i].take())
            .collect())
    }
}

/// Detect every vocabulary class in `image`.
pub fn detect(
    image: &RgbImage,
    vocab: &ClassVocabulary,
    prompts: &PromptSet,
    suite: &BackendSuite,
    config: &PipelineConfig,
) -> Result<Vec<ScoredDetection>> {
    Detector::new(vocab.clone(), prompts, suite, *config)?.detect(image)
}

/// Whole-image class distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalClassification {
    pub class_index: usize,
    pub probabilities: Vec<f64>,
}

/// Classify the whole image against precomputed class embeddings.
pub fn classify_with_embeddings(
    image: &RgbImage,
    class_embeddings: &[UnitEmbedding],
    suite: &BackendSuite,
    tau: Temperature,
) -> Result<GlobalClassification> {
    let raw = suite
        .encode_region(&ImageRegion::whole(image))
        .map_err(at(Stage::GlobalEmbedding))?;
    let v = l2_normalize(&raw)?;
    let probabilities = softmax_classify(&v, class_embeddings, tau)?;
    let (class_index, _) = argmax(&probabilities);
    Ok(GlobalClassification {
        class_index,
        probabilities,
    })
}

/// Scene-level classification; independent of [`detect`].
pub fn classify_image(
    image: &RgbImage,
    vocab: &ClassVocabulary,
    prompts: &PromptSet,
    suite: &BackendSuite,
    tau: Temperature,
    ensemble: PromptEnsemble,
) -> Result<GlobalClassification> {
    let text = class_embeddings_with(vocab, prompts, ensemble, |p| suite.encode_text(p))
        .map_err(|e| match e {
            Error::Backend(b) => at(Stage::ClassEmbedding)(b),
            other => other,
        })?;
    classify_with_embeddings(image, &text, suite, tau)
}

/// Version of the detection output document layout.
pub const DETECTION_FORMAT_VERSION: u32 = 1;

/// Detection output for a batch of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDocument {
    pub format_version: u32,
    pub seed: u64,
    pub config: serde_json::Value,
    pub vocabulary: ClassVocabulary,
    pub records: Vec<ImageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEntry {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_name: String,
    pub class_index: usize,
    pub raw_score: f64,
    pub refiner_quality: f64,
    pub fused_score: f64,
    pub source: ProposalSource,
    pub proposal_box: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskRle>,
}

impl ImageRecord {
    pub fn from_detections(
        image: impl Into<String>,
        width: u32,
        height: u32,
        detections: &[ScoredDetection],
        vocab: &ClassVocabulary,
        mask_threshold: f64,
    ) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            detections: detections
                .iter()
                .map(|d| DetectionEntry {
                    bbox: d.refined_box,
                    class_name: vocab.name(d.class_index).to_string(),
                    class_index: d.class_index,
                    raw_score: d.raw_score,
                    refiner_quality: d.refiner_quality,
                    fused_score: d.fused_score,
                    source: d.proposal.source,
                    proposal_box: d.proposal.bbox,
                    mask: d.mask.as_ref().map(|m| m.to_rle(mask_threshold)),
                })
                .collect(),
        }
    }
}
