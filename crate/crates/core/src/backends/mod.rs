//! Pluggable model interfaces composed by the detection pipeline.
//!
//! Four roles: an image encoder, a text encoder, two proposal streams (a
//! canonical region detector and a text-grounded detector) and a promptable mask
//! refiner. Real-model adapters implement the same traits; the [`stubs`] module
//! provides deterministic weight-free implementations.

use std::sync::{Mutex, MutexGuard};

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::Embedding;
use crate::error::{Error as CoreError, Result};
use crate::geometry::{clamp_box, BinaryMask, BoundingBox};
use crate::prompts::ClassVocabulary;

pub mod spec;
pub mod stubs;

pub use spec::SuiteSpec;

/// Input resolution of the image encoder.
pub const ENCODER_INPUT_SIZE: u32 = 224;

/// Failure inside a model backend.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("backend `{backend}`: {message}")]
pub struct BackendError {
    pub backend: String,
    pub message: String,
}

impl BackendError {
    pub fn new(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            backend: backend.into(),
            message: message.into(),
        }
    }
}

pub type BackendResult<T> = std::result::Result<T, BackendError>;

/// Whether a backend tolerates concurrent calls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Concurrency {
    #[default]
    Shared,
    SingleCaller,
}

/// Which detector stream produced a proposal. Diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProposalSource {
    /// Class-agnostic region from the canonical detector.
    RU,
    /// Known-class region from the canonical detector.
    RK,
    /// Text-grounded region.
    GD,
}

/// A class-free candidate box.
///
/// Detector labels and confidences are discarded before a `Proposal` exists;
/// the type has nowhere to store them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: ProposalSource,
}

impl Proposal {
    pub fn new(bbox: BoundingBox, source: ProposalSource) -> Self {
        Self { bbox, source }
    }

    pub fn clamped(self, width: u32, height: u32) -> Self {
        Self {
            bbox: clamp_box(&self.bbox, width, height),
            ..self
        }
    }
}

/// A crop of the input image resized to the encoder resolution.
#[derive(Debug, Clone)]
pub struct ImageRegion {
    pixels: RgbImage,
    source_box: BoundingBox,
}

impl ImageRegion {
    /// Clamp `bbox` to the image, cut the covered pixels and resize them to
    /// 224x224. Returns `None` when the clamped box covers no pixel.
    pub fn crop(image: &RgbImage, bbox: &BoundingBox) -> Option<Self> {
        let (w, h) = image.dimensions();
        let b = clamp_box(bbox, w, h);
        let x0 = b.x_min().floor() as u32;
        let y0 = b.y_min().floor() as u32;
        let x1 = (b.x_max().ceil() as u32).min(w);
        let y1 = (b.y_max().ceil() as u32).min(h);
        if b.area() <= 0.0 || x1 <= x0 || y1 <= y0 {
            return None;
        }
        let view = imageops::crop_imm(image, x0, y0, x1 - x0, y1 - y0).to_image();
        Some(Self {
            pixels: resize_for_encoder(&view),
            source_box: b,
        })
    }

    /// The whole image, resized.
    pub fn whole(image: &RgbImage) -> Self {
        let (w, h) = image.dimensions();
        Self {
            pixels: resize_for_encoder(image),
            source_box: BoundingBox::new(0.0, 0.0, f64::from(w), f64::from(h))
                .expect("image dimensions form a valid box"),
        }
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn source_box(&self) -> &BoundingBox {
        &self.source_box
    }
}

fn resize_for_encoder(image: &RgbImage) -> RgbImage {
    if image.dimensions() == (ENCODER_INPUT_SIZE, ENCODER_INPUT_SIZE) {
        return image.clone();
    }
    imageops::resize(
        image,
        ENCODER_INPUT_SIZE,
        ENCODER_INPUT_SIZE,
        imageops::FilterType::Triangle,
    )
}

/// Output of the promptable mask refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinementResult {
    pub mask: BinaryMask,
    /// The refiner's own estimate of mask quality.
    pub quality: f64,
}

impl RefinementResult {
    pub fn new(mask: BinaryMask, quality: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&quality) {
            return Err(CoreError::InvalidArgument(format!(
                "refiner quality {quality} outside [0, 1]"
            )));
        }
        Ok(Self { mask, quality })
    }
}

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, region: &ImageRegion) -> BackendResult<Embedding>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait TextEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> BackendResult<Embedding>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// Canonical region detector producing class-agnostic (`RU`) and known-class
/// (`RK`) proposals.
pub trait CanonicalProposer: Send + Sync {
    fn name(&self) -> &str;
    fn propose(&self, image: &RgbImage) -> BackendResult<Vec<Proposal>>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// Text-grounded detector producing `GD` proposals for a vocabulary.
pub trait GroundedProposer: Send + Sync {
    fn name(&self) -> &str;
    fn propose(&self, image: &RgbImage, vocab: &ClassVocabulary) -> BackendResult<Vec<Proposal>>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

pub trait MaskRefiner: Send + Sync {
    fn name(&self) -> &str;
    fn refine(&self, image: &RgbImage, bbox: &BoundingBox) -> BackendResult<RefinementResult>;
    fn concurrency(&self) -> Concurrency {
        Concurrency::Shared
    }
}

/// One implementation of every backend role.
pub struct BackendSuite {
    pub image_encoder: Box<dyn ImageEncoder>,
    pub text_encoder: Box<dyn TextEncoder>,
    pub canonical_proposer: Box<dyn CanonicalProposer>,
    pub grounded_proposer: Box<dyn GroundedProposer>,
    pub mask_refiner: Box<dyn MaskRefiner>,
    serial: Mutex<()>,
}

impl std::fmt::Debug for BackendSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSuite")
            .field("image_encoder", &self.image_encoder.name())
            .field("text_encoder", &self.text_encoder.name())
            .field("canonical_proposer", &self.canonical_proposer.name())
            .field("grounded_proposer", &self.grounded_proposer.name())
            .field("mask_refiner", &self.mask_refiner.name())
            .finish()
    }
}

impl BackendSuite {
    pub fn new(
        image_encoder: Box<dyn ImageEncoder>,
        text_encoder: Box<dyn TextEncoder>,
        canonical_proposer: Box<dyn CanonicalProposer>,
        grounded_proposer: Box<dyn GroundedProposer>,
        mask_refiner: Box<dyn MaskRefiner>,
    ) -> Result<Self> {
        if image_encoder.dim() != text_encoder.dim() {
            return Err(CoreError::DimensionMismatch {
                expected: text_encoder.dim(),
                actual: image_encoder.dim(),
            });
        }
        Ok(Self {
            image_encoder,
            text_encoder,
            canonical_proposer,
            grounded_proposer,
            mask_refiner,
            serial: Mutex::new(()),
        })
    }

    pub fn dim(&self) -> usize {
        self.text_encoder.dim()
    }

    /// True when every backend accepts concurrent calls.
    pub fn fully_shared(&self) -> bool {
        [
            self.image_encoder.concurrency(),
            self.text_encoder.concurrency(),
            self.canonical_proposer.concurrency(),
            self.grounded_proposer.concurrency(),
            self.mask_refiner.concurrency(),
        ]
        .iter()
        .all(|c| *c == Concurrency::Shared)
    }

    /// Lock held around calls to a single-caller backend.
    pub(crate) fn guard(&self, c: Concurrency) -> Option<MutexGuard<'_, ()>> {
        match c {
            Concurrency::Shared => None,
            Concurrency::SingleCaller => {
                Some(self.serial.lock().unwrap_or_else(|e| e.into_inner()))
            }
        }
    }

    pub fn encode_region(&self, region: &ImageRegion) -> BackendResult<Embedding> {
        let _g = self.guard(self.image_encoder.concurrency());
        self.image_encoder.encode(region)
    }

    pub fn encode_text(&self, prompt: &str) -> BackendResult<Embedding> {
        let _g = self.guard(self.text_encoder.concurrency());
        self.text_encoder.encode(prompt)
    }

    pub fn propose_canonical(&self, image: &RgbImage) -> BackendResult<Vec<Proposal>> {
        let _g = self.guard(self.canonical_proposer.concurrency());
        self.canonical_proposer.propose(image)
    }

    pub fn propose_grounded(
        &self,
        image: &RgbImage,
        vocab: &ClassVocabulary,
    ) -> BackendResult<Vec<Proposal>> {
        let _g = self.guard(self.grounded_proposer.concurrency());
        self.grounded_proposer.propose(image, vocab)
    }

    pub fn refine(&self, image: &RgbImage, bbox: &BoundingBox) -> BackendResult<RefinementResult> {
        let _g = self.guard(self.mask_refiner.concurrency());
        self.mask_refiner.refine(image, bbox)
    }
}

#[cfg(test)]
mod tests {
    use super::stubs::*;
    use super::*;
    use image::Rgb;

    #[test]
    fn suite_rejects_dimension_mismatch() {
        let r = BackendSuite::new(
            Box::new(MeanColorEncoder::new(0, 16)),
            Box::new(HashTextEncoder::new(0, 32)),
            Box::new(EmptyProposer),
            Box::new(EmptyProposer),
            Box::new(IdentityRefiner::new(1.0)),
        );
        assert!(matches!(r, Err(CoreError::DimensionMismatch { .. })));
    }

    #[test]
    fn crop_resizes_to_encoder_resolution() {
        let img = RgbImage::from_pixel(40, 30, Rgb([1, 2, 3]));
        let r = ImageRegion::crop(&img, &BoundingBox::new(5.0, 5.0, 15.5, 20.0).unwrap()).unwrap();
        assert_eq!(r.pixels().dimensions(), (224, 224));
        assert_eq!(r.pixels().get_pixel(100, 100), &Rgb([1, 2, 3]));
    }

    #[test]
    fn crop_of_outside_box_is_none() {
        let img = RgbImage::new(8, 8);
        assert!(ImageRegion::crop(&img, &BoundingBox::new(9.0, 9.0, 12.0, 12.0).unwrap()).is_none());
        assert!(ImageRegion::crop(&img, &BoundingBox::new(2.0, 2.0, 2.0, 6.0).unwrap()).is_none());
    }

    #[test]
    fn refinement_quality_is_bounded() {
        let m = BinaryMask::zeros(2, 2).unwrap();
        assert!(RefinementResult::new(m.clone(), 1.2).is_err());
        assert!(RefinementResult::new(m, 0.3).is_ok());
    }
}
