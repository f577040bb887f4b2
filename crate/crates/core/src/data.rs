//! Dataset files: caption manifests, the caption-generation prompt harness,
//! stratified validation sampling and detection ground truth.
//!
//! Caption manifests and prompt/response batches are JSON Lines, one record per
//! line. Detection ground truth uses the `images` / `annotations` / `categories`
//! document layout with boxes stored as `[x, y, width, height]`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::prompts::ClassVocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One image-caption pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image: String,
    pub caption: String,
    pub species: String,
    pub split: Split,
}

impl CaptionRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.image.trim().is_empty() {
            return Err("empty image identifier".into());
        }
        if self.caption.trim().is_empty() {
            return Err("empty caption".into());
        }
        if self.species.trim().is_empty() {
            return Err("empty species".into());
        }
        Ok(())
    }

    /// Automated consistency check: the caption names the species
    /// (case-insensitive substring).
    pub fn mentions_species(&self) -> bool {
        self.caption
            .to_lowercase()
            .contains(&self.species.trim().to_lowercase())
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse JSON Lines; blank lines are skipped, line numbers are 1-based.
pub fn parse_jsonl<T: DeserializeOwned>(text: &str, origin: &str) -> Result<Vec<(usize, T)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map(|v| (i + 1, v))
                .map_err(|e| Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
        })
        .collect()
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<(usize, T)>> {
    let path = path.as_ref();
    parse_jsonl(&read_text(path)?, &path.display().to_string())
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    write_text(path.as_ref(), &to_jsonl(records)?)
}

pub fn parse_caption_manifest(text: &str, origin: &str) -> Result<Vec<CaptionRecord>> {
    parse_jsonl::<CaptionRecord>(text, origin)?
        .into_iter()
        .map(|(line, r)| {
            r.validate().map(|_| r).map_err(|message| Error::Parse {
                path: origin.to_string(),
                line,
                message,
            })
        })
        .collect()
}

pub fn load_caption_manifest(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    parse_caption_manifest(&read_text(path)?, &path.display().to_string())
}

pub fn save_caption_manifest(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    write_jsonl(path, records)
}

const CAPTION_PROMPT_TEMPLATE: &str = "For this [CropName] image, create a caption and include the crop type, number, location in the image, ripeness level, orientation, and other relevant details.";

/// The caption-generation instruction for one species.
pub fn render_caption_prompt(species: &str) -> Result<String> {
    if species.trim().is_empty() {
        return Err(Error::InvalidArgument("species name is empty".into()));
    }
    Ok(CAPTION_PROMPT_TEMPLATE.replacen("[CropName]", species, 1))
}

/// Per-species random sample of `round(fraction * count)` records (at least one per
/// species). Output keeps manifest order.
pub fn stratified_sample(
    records: &[CaptionRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<CaptionRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sample fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut by_species: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_species.entry(r.species.as_str()).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (s_idx, members) in by_species.values().enumerate() {
        let k = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s_idx as u64));
        chosen.extend(
            index::sample(&mut rng, members.len(), k)
                .into_iter()
                .map(|j| members[j]),
        );
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| records[i].clone()).collect())
}

/// Image awaiting a caption.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image: String,
    pub species: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRequest {
    pub image: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionResponse {
    pub image: String,
    pub caption: String,
}

/// One prompt per image.
pub fn build_prompt_batch(entries: &[ImageEntry]) -> Result<Vec<PromptRequest>> {
    let mut seen = HashSet::new();
    entries
        .iter()
        .map(|e| {
            if !seen.insert(e.image.as_str()) {
                return Err(Error::Dataset(format!("duplicate image id {:?}", e.image)));
            }
            Ok(PromptRequest {
                image: e.image.clone(),
                prompt: render_caption_prompt(&e.species)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    /// Records that passed validation and the consistency check, in entry order.
    pub accepted: Vec<CaptionRecord>,
    /// `(image, reason)` for every record that failed.
    pub rejected: Vec<(String, String)>,
}

/// Join responses to their image entries.
///
/// Every entry needs exactly one response; any missing id is an error listing all
/// of them. Responses failing validation or the species-mention check are rejected.
pub fn ingest_responses(
    entries: &[ImageEntry],
    responses: &[CaptionResponse],
) -> Result<IngestOutcome> {
    let mut by_id: HashMap<&str, &CaptionResponse> = HashMap::new();
    for r in responses {
        if by_id.insert(r.image.as_str(), r).is_some() {
            return Err(Error::Dataset(format!(
                "duplicate response for image {:?}",
                r.image
            )));
        }
    }
    let missing: Vec<&str> = entries
        .iter()
        .filter(|e| !by_id.contains_key(e.image.as_str()))
        .map(|e| e.image.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Dataset(format!(
            "missing responses for image ids: {}",
            missing.join(", ")
        )));
    }
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    for e in entries {
        let record = CaptionRecord {
            image: e.image.clone(),
            caption: by_id[e.image.as_str()].caption.clone(),
            species: e.species.clone(),
            split: e.split,
        };
        match record.validate() {
            Err(reason) => rejected.push((e.image.clone(), reason)),
            Ok(()) if !record.mentions_species() => rejected.push((
                e.image.clone(),
                format!("caption does not mention {:?}", e.species),
            )),
            Ok(()) => accepted.push(record),
        }
    }
    Ok(IngestOutcome { accepted, rejected })
}

/// On-disk detection ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDocument {
    pub images: Vec<AnnotatedImage>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]`
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub annotation_id: u64,
    pub bbox: BoundingBox,
    pub class_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    pub truths: Vec<GroundTruth>,
}

/// Validated detection ground truth; class indices follow category order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionDataset {
    pub vocabulary: ClassVocabulary,
    pub category_ids: Vec<u64>,
    pub images: Vec<DatasetImage>,
}

impl DetectionDataset {
    pub fn from_document(doc: AnnotationDocument) -> Result<Self> {
        let vocabulary = ClassVocabulary::new(doc.categories.iter().map(|c| c.name.clone()).collect())?;
        let mut class_of = HashMap::new();
        for (i, c) in doc.categories.iter().enumerate() {
            if class_of.insert(c.id, i).is_some() {
                return Err(Error::Dataset(format!("duplicate category id {}", c.id)));
            }
        }
        let mut image_slot = HashMap::new();
        let mut images: Vec<DatasetImage> = Vec::with_capacity(doc.images.len());
        for img in doc.images {
            if image_slot.insert(img.id, images.len()).is_some() {
                return Err(Error::Dataset(format!("duplicate image id {}", img.id)));
            }
            images.push(DatasetImage {
                id: img.id,
                file_name: img.file_name,
                width: img.width,
                height: img.height,
                truths: Vec::new(),
            });
        }
        let mut seen_ann = HashSet::new();
        for a in doc.annotations {
            if !seen_ann.insert(a.id) {
                return Err(Error::Dataset(format!("duplicate annotation id {}", a.id)));
            }
            let class_index = *class_of.get(&a.category_id).ok_or_else(|| {
                Error::Dataset(format!(
                    "annotation {} references unknown category id {}",
                    a.id, a.category_id
                ))
            })?;
            let slot = *image_slot.get(&a.image_id).ok_or_else(|| {
                Error::Dataset(format!(
                    "annotation {} references unknown image id {}",
                    a.id, a.image_id
                ))
            })?;
            let [x, y, w, h] = a.bbox;
            let bbox = BoundingBox::from_xywh(x, y, w, h)
                .map_err(|e| Error::Dataset(format!("annotation {}: {e}", a.id)))?;
            let img = &mut images[slot];
            if !bbox.within(img.width, img.height) {
                return Err(Error::Dataset(format!(
                    "annotation {} box {:?} exceeds image {} bounds {}x{}",
                    a.id, a.bbox, img.id, img.width, img.height
                )));
            }
            img.truths.push(GroundTruth {
                annotation_id: a.id,
                bbox,
                class_index,
            });
        }
        Ok(Self {
            vocabulary,
            category_ids: doc.categories.iter().map(|c| c.id).collect(),
            images,
        })
    }

    /// Canonical document: images in dataset order, annotations grouped by image.
    pub fn to_document(&self) -> AnnotationDocument {
        AnnotationDocument {
            images: self
                .images
                .iter()
                .map(|i| AnnotatedImage {
                    id: i.id,
                    file_name: i.file_name.clone(),
                    width: i.width,
                    height: i.height,
                })
                .collect(),
            annotations: self
                .images
                .iter()
                .flat_map(|i| {
                    i.truths.iter().map(move |t| Annotation {
                        id: t.annotation_id,
                        image_id: i.id,
                        category_id: self.category_ids[t.class_index],
                        bbox: t.bbox.to_xywh(),
                    })
                })
                .collect(),
            categories: self
                .category_ids
                .iter()
                .zip(self.vocabulary.names())
                .map(|(&id, name)| Category {
                    id,
                    name: name.clone(),
                })
                .collect(),
        }
    }

    pub fn truth_count(&self) -> usize {
        self.images.iter().map(|i| i.truths.len()).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_document())?;
        s.push('\n');
        Ok(s)
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{} images, {} classes, {} objects",
            self.images.len(),
            self.vocabulary.len(),
            self.truth_count()
        );
        s
    }
}

pub fn parse_detection_dataset(text: &str) -> Result<DetectionDataset> {
    DetectionDataset::from_document(serde_json::from_str(text)?)
}

pub fn load_detection_dataset(path: impl AsRef<Path>) -> Result<DetectionDataset> {
    parse_detection_dataset(&read_text(path.as_ref())?)
}

pub fn save_detection_dataset(path: impl AsRef<Path>, dataset: &DetectionDataset) -> Result<()> {
    write_text(path.as_ref(), &dataset.to_json()?)
}
