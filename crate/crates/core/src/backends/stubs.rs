//! Deterministic, weight-free backends.
//!
//! Every stub is a pure function of its inputs and a seed, so repeated calls are
//! bitwise identical on any platform.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, BackendResult, CanonicalProposer, GroundedProposer, ImageEncoder, ImageRegion,
    MaskRefiner, Proposal, ProposalSource, RefinementResult, TextEncoder,
};
use crate::embeddings::Embedding;
use crate::geometry::{clamp_box, BinaryMask, BoundingBox};
use crate::prompts::ClassVocabulary;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    seed.to_le_bytes()
        .iter()
        .chain(bytes)
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Pseudo-random vector in `[-1, 1)^dim` keyed by `(seed, key)`.
pub fn keyed_vector(seed: u64, key: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(seed, key.as_bytes()));
    (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Weight of the whole-string component relative to the token bag.
const WHOLE_STRING_WEIGHT: f64 = 0.1;

/// Bag-of-tokens hash encoder.
///
/// The embedding is the sum of one keyed vector per whitespace token plus a
/// small keyed vector of the exact string, so prompts sharing a class name share
/// a large common direction while distinct strings still differ.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    seed: u64,
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        keyed_vector(self.seed, &format!("token:{token}"), self.dim)
    }
}

impl TextEncoder for HashTextEncoder {
    fn name(&self) -> &str {
        "hash"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> BackendResult<Embedding> {
        if prompt.trim().is_empty() {
            return Err(BackendError::new("hash", "empty prompt"));
        }
        let mut v = keyed_vector(self.seed, &format!("text:{prompt}"), self.dim);
        v.iter_mut().for_each(|c| *c *= WHOLE_STRING_WEIGHT);
        for token in prompt.split_whitespace() {
            for (c, t) in v.iter_mut().zip(self.token_vector(token)) {
                *c += t;
            }
        }
        Embedding::new(v).map_err(|e| BackendError::new("hash", e.to_string()))
    }
}

/// Forces regions of a given mean color onto a token's direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorAnchor {
    pub rgb: [u8; 3],
    /// Euclidean distance in 0..=255 RGB space within which the anchor applies.
    pub radius: f64,
    /// Token whose hash-encoder vector the region maps to.
    pub token: String,
}

/// Encodes a region from its mean color.
///
/// Output is `r * B_r + g * B_g + b * B_b + B_0` for mean channel intensities in
/// `[0, 1]` and fixed keyed basis vectors, unless the mean color falls within an
/// anchor's radius, in which case the anchor token's vector is returned.
#[derive(Debug, Clone)]
pub struct MeanColorEncoder {
    seed: u64,
    dim: usize,
    basis: [Vec<f64>; 4],
    anchors: Vec<(ColorAnchor, Vec<f64>)>,
}

impl MeanColorEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        let basis = ["r", "g", "b", "bias"]
            .map(|c| keyed_vector(seed, &format!("mean-color:{c}"), dim));
        Self {
            seed,
            dim,
            basis,
            anchors: Vec::new(),
        }
    }

    /// Anchor token vectors match [`HashTextEncoder::token_vector`] under the same seed.
    pub fn with_anchors(mut self, anchors: Vec<ColorAnchor>) -> Self {
        let text = HashTextEncoder::new(self.seed, self.dim);
        self.anchors = anchors
            .into_iter()
            .map(|a| {
                let v = text.token_vector(&a.token);
                (a, v)
            })
            .collect();
        self
    }

    pub fn mean_color(image: &RgbImage) -> [f64; 3] {
        let mut sums = [0u64; 3];
        for p in image.pixels() {
            for (s, &c) in sums.iter_mut().zip(&p.0) {
                *s += u64::from(c);
            }
        }
        let n = (u64::from(image.width()) * u64::from(image.height())).max(1) as f64;
        sums.map(|s| s as f64 / n)
    }
}

impl ImageEncoder for MeanColorEncoder {
    fn name(&self) -> &str {
        "mean-color"
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, region: &ImageRegion) -> BackendResult<Embedding> {
        let mean = Self::mean_color(region.pixels());
        for (anchor, v) in &self.anchors {
            let d2: f64 = mean
                .iter()
                .zip(anchor.rgb)
                .map(|(m, a)| (m - f64::from(a)).powi(2))
                .sum();
            if d2.sqrt() <= anchor.radius {
                return Embedding::new(v.clone())
                    .map_err(|e| BackendError::new("mean-color", e.to_string()));
            }
        }
        let [r, g, b] = mean.map(|c| c / 255.0);
        let v = (0..self.dim)
            .map(|j| r * self.basis[0][j] + g * self.basis[1][j] + b * self.basis[2][j] + self.basis[3][j])
            .collect();
        Embedding::new(v).map_err(|e| {
            let sb = region.source_box();
            BackendError::new("mean-color", format!("region {:?}: {e}", sb.to_array()))
        })
    }
}

/// Tiles the image into a `rows x cols` grid of proposals.
#[derive(Debug, Clone)]
pub struct GridProposer {
    pub rows: u32,
    pub cols: u32,
    pub source: ProposalSource,
}

impl GridProposer {
    pub fn new(rows: u32, cols: u32, source: ProposalSource) -> Self {
        Self { rows, cols, source }
    }

    fn tiles(&self, image: &RgbImage) -> BackendResult<Vec<Proposal>> {
        if self.rows == 0 || self.cols == 0 {
            return Err(BackendError::new("grid", "grid needs at least one row and column"));
        }
        let (w, h) = image.dimensions();
        let tw = f64::from(w) / f64::from(self.cols);
        let th = f64::from(h) / f64::from(self.rows);
        let mut out = Vec::with_capacity((self.rows * self.cols) as usize);
        for r in 0..self.rows {
            for c in 0..self.cols {
                let b = BoundingBox::new(
                    f64::from(c) * tw,
                    f64::from(r) * th,
                    f64::from(c + 1) * tw,
                    f64::from(r + 1) * th,
                )
                .map_err(|e| BackendError::new("grid", e.to_string()))?;
                out.push(Proposal::new(clamp_box(&b, w, h), self.source));
            }
        }
        Ok(out)
    }
}

impl CanonicalProposer for GridProposer {
    fn name(&self) -> &str {
        "grid"
    }

    fn propose(&self, image: &RgbImage) -> BackendResult<Vec<Proposal>> {
        self.tiles(image)
    }
}

impl GroundedProposer for GridProposer {
    fn name(&self) -> &str {
        "grid"
    }

    fn propose(&self, image: &RgbImage, _vocab: &ClassVocabulary) -> BackendResult<Vec<Proposal>> {
        self.tiles(image)
    }
}

/// Emits a fixed list of boxes, clamped to each image.
#[derive(Debug, Clone, Default)]
pub struct FixedProposer {
    pub proposals: Vec<Proposal>,
}

impl FixedProposer {
    pub fn new(proposals: Vec<Proposal>) -> Self {
        Self { proposals }
    }

    fn emit(&self, image: &RgbImage) -> Vec<Proposal> {
        let (w, h) = image.dimensions();
        self.proposals.iter().map(|p| p.clamped(w, h)).collect()
    }
}

impl CanonicalProposer for FixedProposer {
    fn name(&self) -> &str {
        "fixed"
    }

    fn propose(&self, image: &RgbImage) -> BackendResult<Vec<Proposal>> {
        Ok(self.emit(image))
    }
}

impl GroundedProposer for FixedProposer {
    fn name(&self) -> &str {
        "fixed"
    }

    fn propose(&self, image: &RgbImage, _vocab: &ClassVocabulary) -> BackendResult<Vec<Proposal>> {
        Ok(self.emit(image))
    }
}

/// Proposes nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyProposer;

impl CanonicalProposer for EmptyProposer {
    fn name(&self) -> &str {
        "none"
    }

    fn propose(&self, _image: &RgbImage) -> BackendResult<Vec<Proposal>> {
        Ok(Vec::new())
    }
}

impl GroundedProposer for EmptyProposer {
    fn name(&self) -> &str {
        "none"
    }

    fn propose(&self, _image: &RgbImage, _vocab: &ClassVocabulary) -> BackendResult<Vec<Proposal>> {
        Ok(Vec::new())
    }
}

fn check_prompt_box(name: &str, image: &RgbImage, bbox: &BoundingBox) -> BackendResult<BoundingBox> {
    let (w, h) = image.dimensions();
    let b = clamp_box(bbox, w, h);
    if b.area() <= 0.0 {
        return Err(BackendError::new(
            name,
            format!("degenerate prompt box {:?}", bbox.to_array()),
        ));
    }
    Ok(b)
}

fn mask_result(name: &str, mask: crate::Result<BinaryMask>, quality: f64) -> BackendResult<RefinementResult> {
    mask.and_then(|m| RefinementResult::new(m, quality))
        .map_err(|e| BackendError::new(name, e.to_string()))
}

/// Mask covering the prompt box scaled by `factor` about its center.
#[derive(Debug, Clone)]
pub struct ShrinkRefiner {
    pub factor: f64,
    pub quality: f64,
}

impl ShrinkRefiner {
    pub fn new(factor: f64, quality: f64) -> Self {
        Self { factor, quality }
    }
}

impl Default for ShrinkRefiner {
    fn default() -> Self {
        Self::new(0.9, 0.9)
    }
}

impl MaskRefiner for ShrinkRefiner {
    fn name(&self) -> &str {
        "shrink"
    }

    fn refine(&self, image: &RgbImage, bbox: &BoundingBox) -> BackendResult<RefinementResult> {
        let b = check_prompt_box("shrink", image, bbox)?;
        let (w, h) = image.dimensions();
        let mask = b
            .scaled_about_center(self.factor)
            .and_then(|s| BinaryMask::from_box(&s, h, w));
        mask_result("shrink", mask, self.quality)
    }
}

/// Mask covering exactly the prompt box.
#[derive(Debug, Clone)]
pub struct IdentityRefiner {
    pub quality: f64,
}

impl IdentityRefiner {
    pub fn new(quality: f64) -> Self {
        Self { quality }
    }
}

impl MaskRefiner for IdentityRefiner {
    fn name(&self) -> &str {
        "identity"
    }

    fn refine(&self, image: &RgbImage, bbox: &BoundingBox) -> BackendResult<RefinementResult> {
        let b = check_prompt_box("identity", image, bbox)?;
        let (w, h) = image.dimensions();
        mask_result("identity", BinaryMask::from_box(&b, h, w), self.quality)
    }
}

/// All-zero mask with quality 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct EmptyRefiner;

impl MaskRefiner for EmptyRefiner {
    fn name(&self) -> &str {
        "empty"
    }

    fn refine(&self, image: &RgbImage, bbox: &BoundingBox) -> BackendResult<RefinementResult> {
        check_prompt_box("empty", image, bbox)?;
        let (w, h) = image.dimensions();
        mask_result("empty", BinaryMask::zeros(h, w), 0.0)
    }
}

/// Fails every call with a fixed message.
#[derive(Debug, Clone)]
pub struct FailingRefiner {
    pub message: String,
}

impl MaskRefiner for FailingRefiner {
    fn name(&self) -> &str {
        "failing"
    }

    fn refine(&self, _image: &RgbImage, _bbox: &BoundingBox) -> BackendResult<RefinementResult> {
        Err(BackendError::new("failing", self.message.clone()))
    }
}
