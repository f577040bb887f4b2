//! Serializable description of a stub backend suite.

use serde::{Deserialize, Serialize};

use super::stubs::{
    ColorAnchor, EmptyProposer, EmptyRefiner, FailingRefiner, FixedProposer, GridProposer, HashTextEncoder,
    IdentityRefiner, MeanColorEncoder, ShrinkRefiner,
};
use super::{
    BackendSuite, CanonicalProposer, GroundedProposer, ImageEncoder, MaskRefiner, Proposal,
    ProposalSource, TextEncoder,
};
use crate::embeddings::EMBED_DIM;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ImageEncoderSpec {
    MeanColor {
        #[serde(default)]
        anchors: Vec<ColorAnchor>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TextEncoderSpec {
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub source: ProposalSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProposerSpec {
    Grid {
        rows: u32,
        cols: u32,
        source: ProposalSource,
    },
    Fixed {
        boxes: Vec<FixedBox>,
    },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RefinerSpec {
    Shrink { factor: f64, quality: f64 },
    Identity { quality: f64 },
    Empty,
    Failing { message: String },
}

fn default_dim() -> usize {
    EMBED_DIM
}

/// One selection per backend role; `build` turns it into a [`BackendSuite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    #[serde(default = "default_dim")]
    pub dim: usize,
    pub image_encoder: ImageEncoderSpec,
    pub text_encoder: TextEncoderSpec,
    pub canonical: ProposerSpec,
    pub grounded: ProposerSpec,
    pub refiner: RefinerSpec,
}

impl Default for SuiteSpec {
    /// Mean-color image encoder, hash text encoder, 2x2 grid of `RU` proposals,
    /// no grounded stream, 10% shrink refiner with quality 0.9.
    fn default() -> Self {
        Self {
            dim: EMBED_DIM,
            image_encoder: ImageEncoderSpec::MeanColor {
                anchors: Vec::new(),
            },
            text_encoder: TextEncoderSpec::Hash,
            canonical: ProposerSpec::Grid {
                rows: 2,
                cols: 2,
                source: ProposalSource::RU,
            },
            grounded: ProposerSpec::None,
            refiner: RefinerSpec::Shrink {
                factor: 0.9,
                quality: 0.9,
            },
        }
    }
}

impl ProposerSpec {
    fn canonical(&self) -> Result<Box<dyn CanonicalProposer>> {
        Ok(match self {
            ProposerSpec::Grid { rows, cols, source } => {
                Box::new(GridProposer::new(*rows, *cols, *source))
            }
            ProposerSpec::Fixed { boxes } => Box::new(fixed(boxes)),
            ProposerSpec::None => Box::new(EmptyProposer),
        })
    }

    fn grounded(&self) -> Result<Box<dyn GroundedProposer>> {
        Ok(match self {
            ProposerSpec::Grid { rows, cols, source } => {
                Box::new(GridProposer::new(*rows, *cols, *source))
            }
            ProposerSpec::Fixed { boxes } => Box::new(fixed(boxes)),
            ProposerSpec::None => Box::new(EmptyProposer),
        })
    }
}

fn fixed(boxes: &[FixedBox]) -> FixedProposer {
    FixedProposer::new(
        boxes
            .iter()
            .map(|b| Proposal::new(b.bbox, b.source))
            .collect(),
    )
}

fn check_quality(q: f64) -> Result<()> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "refiner quality {q} outside [0, 1]"
        )))
    }
}

impl SuiteSpec {
    pub fn build(&self, seed: u64) -> Result<BackendSuite> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        let image_encoder: Box<dyn ImageEncoder> = match &self.image_encoder {
            ImageEncoderSpec::MeanColor { anchors } => {
                Box::new(MeanColorEncoder::new(seed, self.dim).with_anchors(anchors.clone()))
            }
        };
        let text_encoder: Box<dyn TextEncoder> = match self.text_encoder {
            TextEncoderSpec::Hash => Box::new(HashTextEncoder::new(seed, self.dim)),
        };
        let mask_refiner: Box<dyn MaskRefiner> = match &self.refiner {
            &RefinerSpec::Shrink { factor, quality } => {
                check_quality(quality)?;
                if !(factor > 0.0 && factor.is_finite()) {
                    return Err(Error::InvalidArgument(format!("shrink factor {factor}")));
                }
                Box::new(ShrinkRefiner::new(factor, quality))
            }
            &RefinerSpec::Identity { quality } => {
                check_quality(quality)?;
                Box::new(IdentityRefiner::new(quality))
            }
            RefinerSpec::Empty => Box::new(EmptyRefiner),
            RefinerSpec::Failing { message } => Box::new(FailingRefiner {
                message: message.clone(),
            }),
        };
        BackendSuite::new(
            image_encoder,
            text_encoder,
            self.canonical.canonical()?,
            self.grounded.grounded()?,
            mask_refiner,
        )
    }
}
