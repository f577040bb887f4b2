//! Axis-aligned boxes, probability masks, IoU and greedy non-maximum suppression.
//!
//! Coordinates are continuous pixel-space reals. When converting between masks and
//! boxes, pixel index `p` maps to coordinate `p`, so a mask that is hot on columns
//! 3 through 6 (inclusive) produces `x_min = 3`, `x_max = 6`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default probability threshold for turning a mask into a box.
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// `[x_min, y_min, x_max, y_max]` in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min > x_max || y_min > y_max {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from `(x, y, width, height)` storage form.
    pub fn from_xywh(x: f64, y: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(x, y, x + width, y + height)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn to_xywh(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn area(&self) -> f64 {
        box_area(self)
    }

    /// Whether the box lies within `[0, width] x [0, height]`.
    pub fn within(&self, width: u32, height: u32) -> bool {
        self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= f64::from(width)
            && self.y_max <= f64::from(height)
    }

    /// Scale width and height by `factor` about the box center.
    pub fn scaled_about_center(&self, factor: f64) -> Result<Self> {
        let cx = (self.x_min + self.x_max) / 2.0;
        let cy = (self.y_min + self.y_max) / 2.0;
        let hw = self.width() * factor / 2.0;
        let hh = self.height() * factor / 2.0;
        Self::new(cx - hw, cy - hh, cx + hw, cy + hh)
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

pub fn box_area(b: &BoundingBox) -> f64 {
    (b.x_max - b.x_min) * (b.y_max - b.y_min)
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Clip a box into `[0, width] x [0, height]`.
pub fn clamp_box(b: &BoundingBox, width: u32, height: u32) -> BoundingBox {
    let w = f64::from(width);
    let h = f64::from(height);
    BoundingBox {
        x_min: b.x_min.clamp(0.0, w),
        y_min: b.y_min.clamp(0.0, h),
        x_max: b.x_max.clamp(0.0, w),
        y_max: b.y_max.clamp(0.0, h),
    }
}

/// Per-pixel probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    height: u32,
    width: u32,
    values: Vec<f32>,
}

impl BinaryMask {
    pub fn new(height: u32, width: u32, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMask(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height as usize * width as usize {
            return Err(Error::InvalidMask(format!(
                "{height}x{width} mask needs {} values, got {}",
                height as usize * width as usize,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMask(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: u32, width: u32) -> Result<Self> {
        Self::new(height, width, vec![0.0; height as usize * width as usize])
    }

    /// Mask that is 1.0 on every pixel whose index lies inside the box
    /// (indices `ceil(min) ..= floor(max)`, clipped to the mask), 0.0 elsewhere.
    pub fn from_box(b: &BoundingBox, height: u32, width: u32) -> Result<Self> {
        let mut mask = Self::zeros(height, width)?;
        let cols = index_span(b.x_min, b.x_max, width);
        let rows = index_span(b.y_min, b.y_max, height);
        if let (Some((c0, c1)), Some((r0, r1))) = (cols, rows) {
            for r in r0..=r1 {
                let row = r as usize * width as usize;
                for c in c0..=c1 {
                    mask.values[row + c as usize] = 1.0;
                }
            }
        }
        Ok(mask)
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: u32, col: u32) -> f32 {
        self.values[row as usize * self.width as usize + col as usize]
    }

    pub fn count_above(&self, threshold: f64) -> usize {
        self.values
            .iter()
            .filter(|&&v| f64::from(v) > threshold)
            .count()
    }

    /// Run-length encoding of the thresholded mask.
    pub fn to_rle(&self, threshold: f64) -> MaskRle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &v in &self.values {
            let on = f64::from(v) > threshold;
            if on != current {
                counts.push(run);
                run = 0;
                current = on;
            }
            run += 1;
        }
        counts.push(run);
        MaskRle {
            size: [self.height, self.width],
            counts,
        }
    }
}

fn index_span(lo: f64, hi: f64, len: u32) -> Option<(u32, u32)> {
    let first = lo.ceil().max(0.0);
    let last = hi.floor().min(f64::from(len) - 1.0);
    (first <= last).then_some((first as u32, last as u32))
}

/// Row-major run lengths of a binarized mask, starting with a run of zeros
/// (possibly of length 0) and alternating thereafter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl MaskRle {
    pub fn decode(&self) -> Result<BinaryMask> {
        let [h, w] = self.size;
        let mut values = Vec::with_capacity(h as usize * w as usize);
        let mut on = false;
        for &n in &self.counts {
            values.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, n as usize));
            on = !on;
        }
        BinaryMask::new(h, w, values)
    }
}

/// Tight box over every pixel with probability strictly above `threshold`.
///
/// Returns `None` when no pixel exceeds the threshold.
pub fn box_from_mask(mask: &BinaryMask, threshold: f64) -> Option<BoundingBox> {
    let mut x_min = u32::MAX;
    let mut y_min = u32::MAX;
    let mut x_max = 0u32;
    let mut y_max = 0u32;
    let mut any = false;
    for row in 0..mask.height {
        let offset = row as usize * mask.width as usize;
        for col in 0..mask.width {
            if f64::from(mask.values[offset + col as usize]) > threshold {
                any = true;
                x_min = x_min.min(col);
                x_max = x_max.max(col);
                y_min = y_min.min(row);
                y_max = y_max.max(row);
            }
        }
    }
    any.then(|| BoundingBox {
        x_min: f64::from(x_min),
        y_min: f64::from(y_min),
        x_max: f64::from(x_max),
        y_max: f64::from(y_max),
    })
}

/// A scored, classed box entering suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsCandidate {
    pub bbox: BoundingBox,
    pub score: f64,
    pub class_index: usize,
}

/// Greedy non-maximum suppression.
///
/// Returns indices into `candidates` of the kept boxes in descending score order.
/// Equal scores keep input order. A box is dropped when its IoU with an already
/// kept box is strictly greater than `iou_threshold`; with `class_aware`, only
/// boxes of the same class suppress each other.
pub fn nms(candidates: &[NmsCandidate], iou_threshold: f64, class_aware: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let c = &candidates[i];
        let suppressed = kept.iter().any(|&k| {
            let other = &candidates[k];
            (!class_aware || other.class_index == c.class_index)
                && iou(&other.bbox, &c.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(box_area(&bb(0.0, 0.0, 2.0, 2.0)), 4.0);
        assert_eq!(box_area(&bb(1.0, 1.0, 1.0, 5.0)), 0.0);
        assert_eq!(box_area(&bb(0.5, 0.5, 3.5, 2.0)), 4.5);
    }

    #[test]
    fn rejects_inverted_and_non_finite() {
        assert!(BoundingBox::new(2.0, 0.0, 1.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BoundingBox::new(0.0, 0.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bb(0.0, 0.0, 4.0, 4.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(2.0, 2.0, 3.0, 3.0)), 0.0);
        let v = iou(&bb(0.0, 0.0, 2.0, 2.0), &bb(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn iou_of_two_degenerate_boxes_is_zero() {
        let p = bb(1.0, 1.0, 1.0, 1.0);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn mask_to_box_examples() {
        let mut values = vec![0.0f32; 100];
        for r in 2..=4 {
            for c in 3..=6 {
                values[r * 10 + c] = 1.0;
            }
        }
        let m = BinaryMask::new(10, 10, values).unwrap();
        assert_eq!(box_from_mask(&m, 0.5), Some(bb(3.0, 2.0, 6.0, 4.0)));

        let empty = BinaryMask::zeros(10, 10).unwrap();
        assert_eq!(box_from_mask(&empty, 0.5), None);

        let mut values = vec![0.0f32; 100];
        values[5 * 10 + 7] = 0.9;
        let m = BinaryMask::new(10, 10, values).unwrap();
        assert_eq!(box_from_mask(&m, 0.5), Some(bb(7.0, 5.0, 7.0, 5.0)));
    }

    #[test]
    fn mask_threshold_is_strict() {
        let m = BinaryMask::new(1, 2, vec![0.5, 0.51]).unwrap();
        assert_eq!(box_from_mask(&m, 0.5), Some(bb(1.0, 0.0, 1.0, 0.0)));
    }

    #[test]
    fn mask_validation() {
        assert!(BinaryMask::new(2, 2, vec![0.0; 3]).is_err());
        assert!(BinaryMask::new(1, 1, vec![1.5]).is_err());
        assert!(BinaryMask::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(
            clamp_box(&bb(-5.0, -5.0, 10.0, 10.0), 8, 8),
            bb(0.0, 0.0, 8.0, 8.0)
        );
        let inside = bb(1.0, 2.0, 3.0, 4.0);
        assert_eq!(clamp_box(&inside, 8, 8), inside);
        let out = clamp_box(&bb(9.0, 9.0, 12.0, 12.0), 8, 8);
        assert_eq!(out, bb(8.0, 8.0, 8.0, 8.0));
        assert_eq!(out.area(), 0.0);
    }

    #[test]
    fn from_box_round_trips_integer_boxes() {
        let b = bb(3.0, 2.0, 6.0, 4.0);
        let m = BinaryMask::from_box(&b, 10, 10).unwrap();
        assert_eq!(m.count_above(0.5), 12);
        assert_eq!(box_from_mask(&m, 0.5), Some(b));
    }

    #[test]
    fn rle_round_trip() {
        let m = BinaryMask::from_box(&bb(1.0, 1.0, 2.0, 3.0), 4, 5).unwrap();
        let rle = m.to_rle(0.5);
        assert_eq!(rle.counts.iter().sum::<u32>(), 20);
        assert_eq!(rle.decode().unwrap(), m);
        let full = BinaryMask::new(1, 2, vec![1.0, 1.0]).unwrap().to_rle(0.5);
        assert_eq!(full.counts, vec![0, 2]);
    }

    fn cand(b: BoundingBox, score: f64, class_index: usize) -> NmsCandidate {
        NmsCandidate {
            bbox: b,
            score,
            class_index,
        }
    }

    #[test]
    fn nms_examples() {
        let a = bb(0.0, 0.0, 4.0, 4.0);
        assert_eq!(nms(&[cand(a, 0.8, 0), cand(a, 0.9, 0)], 0.5, true), vec![1]);
        let d = bb(10.0, 10.0, 12.0, 12.0);
        assert_eq!(nms(&[cand(a, 0.3, 0), cand(d, 0.7, 0)], 0.5, true), vec![1, 0]);
        assert!(nms(&[], 0.5, true).is_empty());
    }

    #[test]
    fn nms_class_aware_keeps_other_classes() {
        let a = bb(0.0, 0.0, 4.0, 4.0);
        let c = [cand(a, 0.9, 0), cand(a, 0.8, 1)];
        assert_eq!(nms(&c, 0.5, true), vec![0, 1]);
        assert_eq!(nms(&c, 0.5, false), vec![0]);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = bb(0.0, 0.0, 4.0, 4.0);
        let c = [cand(a, 0.5, 0), cand(a, 0.5, 0)];
        assert_eq!(nms(&c, 0.5, true), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(), b in arb_box()) {
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
        }

        #[test]
        fn clamp_is_idempotent(a in arb_box(), w in 1u32..120, h in 1u32..120) {
            let once = clamp_box(&a, w, h);
            prop_assert!(once.within(w, h));
            prop_assert_eq!(clamp_box(&once, w, h), once);
        }

        #[test]
        fn nms_is_idempotent(boxes in prop::collection::vec((arb_box(), 0.0..1.0f64, 0usize..3), 0..24)) {
            let c: Vec<_> = boxes.iter().map(|&(b, s, k)| cand(b, s, k)).collect();
            let kept = nms(&c, 0.5, true);
            let again: Vec<_> = kept.iter().map(|&i| c[i]).collect();
            let kept2 = nms(&again, 0.5, true);
            prop_assert_eq!(kept2, (0..again.len()).collect::<Vec<_>>());
        }
    }
}
