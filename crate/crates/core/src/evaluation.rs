//! Zero-shot classification metrics and detection average precision.

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::DetectionDataset;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::pipeline::DetectionDocument;

/// Number of recall sample points used by [`average_precision`].
pub const RECALL_POINTS: usize = 101;
pub const AP50_IOU: f64 = 0.5;
pub const AP75_IOU: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_index: usize,
    /// Number of truth instances of this class.
    pub support: usize,
    pub correct: usize,
    /// `None` when the class never occurs among the truths.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub total: usize,
    pub correct: usize,
    pub overall_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
    /// Mean over classes present among the truths.
    pub per_class_mean: f64,
    /// Population standard deviation over classes present among the truths.
    pub per_class_std: f64,
    /// `confusion[truth][prediction]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn classification_report(
    predictions: &[usize],
    truths: &[usize],
    num_classes: usize,
) -> Result<ClassificationReport> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: truths.len(),
            actual: predictions.len(),
        });
    }
    if truths.is_empty() {
        return Err(Error::EmptyInput("classification truths"));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&p, &t) in predictions.iter().zip(truths) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class index {} out of range for {num_classes} classes",
                p.max(t)
            )));
        }
        confusion[t][p] += 1;
    }
    let per_class: Vec<ClassAccuracy> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let support: usize = row.iter().sum();
            ClassAccuracy {
                class_index: c,
                support,
                correct: row[c],
                accuracy: (support > 0).then(|| row[c] as f64 / support as f64),
            }
        })
        .collect();
    let present: Vec<f64> = per_class.iter().filter_map(|c| c.accuracy).collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    let var = present.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / present.len() as f64;
    let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
    Ok(ClassificationReport {
        total: truths.len(),
        correct,
        overall_accuracy: correct as f64 / truths.len() as f64,
        per_class,
        per_class_mean: mean,
        per_class_std: var.sqrt(),
        confusion,
    })
}

impl ClassificationReport {
    /// `class,support,correct,accuracy`; absent classes leave accuracy blank.
    pub fn per_class_csv(&self, names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["class", "support", "correct", "accuracy"])
            .map_err(csv_err)?;
        for c in &self.per_class {
            let name = names.get(c.class_index).map_or("", String::as_str);
            w.write_record([
                name.to_string(),
                c.support.to_string(),
                c.correct.to_string(),
                c.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("csv: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalDetection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub class_index: usize,
}

/// Outcome for one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchFlag {
    pub true_positive: bool,
    /// Index of the matched truth.
    pub truth: Option<usize>,
}

/// Greedy matching within one image.
///
/// Detections are visited by descending score (ties keep input order). Each takes
/// the unmatched same-class truth with the highest IoU, provided that IoU reaches
/// the threshold. Flags are returned in input order.
pub fn match_detections(
    detections: &[EvalDetection],
    truths: &[TruthBox],
    iou_threshold: f64,
) -> Vec<MatchFlag> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut taken = vec![false; truths.len()];
    let mut flags = vec![
        MatchFlag {
            true_positive: false,
            truth: None,
        };
        detections.len()
    ];
    for i in order {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, t) in truths.iter().enumerate() {
            if taken[j] || t.class_index != d.class_index {
                continue;
            }
            let o = iou(&d.bbox, &t.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            flags[i] = MatchFlag {
                true_positive: true,
                truth: Some(j),
            };
        }
    }
    flags
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Raw precision-recall points for score-ranked flags (`true` = TP).
pub fn precision_recall_curve(ranked_flags: &[bool], truth_count: usize) -> Vec<PrPoint> {
    let mut tp = 0usize;
    ranked_flags
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            tp += usize::from(f);
            PrPoint {
                recall: if truth_count == 0 {
                    0.0
                } else {
                    tp as f64 / truth_count as f64
                },
                precision: tp as f64 / (k + 1) as f64,
            }
        })
        .collect()
}

/// 101-point interpolated average precision.
///
/// `ranked_flags` are TP/FP flags in descending score order. Precision is made
/// non-increasing from the right, then sampled at recall 0, 0.01, ..., 1 (the first
/// curve point with recall at or above each level; zero if none).
pub fn average_precision(ranked_flags: &[bool], truth_count: usize) -> f64 {
    if truth_count == 0 {
        return 0.0;
    }
    let mut curve = precision_recall_curve(ranked_flags, truth_count);
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].precision = curve[k].precision.max(curve[k + 1].precision);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while k < curve.len() && curve[k].recall < level {
            k += 1;
        }
        if k < curve.len() {
            sum += curve[k].precision;
        }
    }
    sum / RECALL_POINTS as f64
}

/// Detections and truths for one image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<EvalDetection>,
    pub truths: Vec<TruthBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDetectionResult {
    pub class_name: String,
    pub truths: usize,
    pub detections: usize,
    /// `None` when the class has no truth instances.
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// Raw curve at IoU 0.5.
    pub pr_curve: Vec<PrPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub per_class: Vec<ClassDetectionResult>,
    /// Unweighted mean over classes with truths; `None` if there are none.
    pub mean_ap50: Option<f64>,
    pub mean_ap75: Option<f64>,
}

/// Score-ranked TP/FP flags for one class over the whole dataset.
/// Ties keep image order, then detection order.
pub fn ranked_class_flags(images: &[EvalImage], class_index: usize, iou_threshold: f64) -> Vec<bool> {
    let mut scored: Vec<(f64, bool)> = Vec::new();
    for img in images {
        let flags = match_detections(&img.detections, &img.truths, iou_threshold);
        scored.extend(
            img.detections
                .iter()
                .zip(flags)
                .filter(|(d, _)| d.class_index == class_index)
                .map(|(d, f)| (d.score, f.true_positive)),
        );
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    scored.into_iter().map(|(_, f)| f).collect()
}

fn mean_present(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn evaluate_detections(images: &[EvalImage], class_names: &[String]) -> DetectionReport {
    let per_class: Vec<ClassDetectionResult> = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let truths = images
                .iter()
                .flat_map(|i| &i.truths)
                .filter(|t| t.class_index == c)
                .count();
            let flags50 = ranked_class_flags(images, c, AP50_IOU);
            let flags75 = ranked_class_flags(images, c, AP75_IOU);
            ClassDetectionResult {
                class_name: name.clone(),
                truths,
                detections: flags50.len(),
                ap50: (truths > 0).then(|| average_precision(&flags50, truths)),
                ap75: (truths > 0).then(|| average_precision(&flags75, truths)),
                pr_curve: precision_recall_curve(&flags50, truths),
            }
        })
        .collect();
    DetectionReport {
        mean_ap50: mean_present(per_class.iter().map(|c| c.ap50)),
        mean_ap75: mean_present(per_class.iter().map(|c| c.ap75)),
        per_class,
    }
}

impl DetectionReport {
    /// `class,truths,detections,ap50,ap75`; absent classes leave AP blank.
    pub fn per_class_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(["class", "truths", "detections", "ap50", "ap75"])
            .map_err(csv_err)?;
        for c in &self.per_class {
            let fmt = |v: Option<f64>| v.map(|a| a.to_string()).unwrap_or_default();
            w.write_record([
                c.class_name.clone(),
                c.truths.to_string(),
                c.detections.to_string(),
                fmt(c.ap50),
                fmt(c.ap75),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn base_name(s: &str) -> &str {
    Path::new(s)
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or(s)
}

/// Line up a detection document with ground truth.
///
/// Records are matched to dataset images by file name (exact, then base name).
/// Detections are re-indexed into the dataset's class order by name. Dataset
/// images without a record count as images with no detections.
pub fn pair_with_ground_truth(
    doc: &DetectionDocument,
    dataset: &DetectionDataset,
) -> Result<Vec<EvalImage>> {
    let mut slot_of: HashMap<&str, usize> = HashMap::new();
    for (i, img) in dataset.images.iter().enumerate() {
        slot_of.insert(img.file_name.as_str(), i);
    }
    let mut base_of: HashMap<&str, usize> = HashMap::new();
    for (i, img) in dataset.images.iter().enumerate() {
        base_of.entry(base_name(&img.file_name)).or_insert(i);
    }
    let mut out: Vec<EvalImage> = dataset
        .images
        .iter()
        .map(|img| EvalImage {
            detections: Vec::new(),
            truths: img
                .truths
                .iter()
                .map(|t| TruthBox {
                    bbox: t.bbox,
                    class_index: t.class_index,
                })
                .collect(),
        })
        .collect();
    let mut seen = vec![false; dataset.images.len()];
    for rec in &doc.records {
        let slot = slot_of
            .get(rec.image.as_str())
            .or_else(|| base_of.get(base_name(&rec.image)))
            .copied()
            .ok_or_else(|| {
                Error::Dataset(format!("image {:?} is not in the ground truth", rec.image))
            })?;
        if std::mem::replace(&mut seen[slot], true) {
            return Err(Error::Dataset(format!(
                "image {:?} appears twice in the detections",
                rec.image
            )));
        }
        for d in &rec.detections {
            let class_index = dataset.vocabulary.index_of(&d.class_name).ok_or_else(|| {
                Error::Dataset(format!(
                    "detected class {:?} is not a ground-truth category",
                    d.class_name
                ))
            })?;
            out[slot].detections.push(EvalDetection {
                bbox: d.bbox,
                class_index,
                score: d.fused_score,
            });
        }
    }
    for (img, s) in dataset.images.iter().zip(&seen) {
        if !s {
            warn!("no detections recorded for {}", img.file_name);
        }
    }
    Ok(out)
}
