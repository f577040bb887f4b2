//! Annotated-image output: detection boxes drawn over the input image.

use cropdet_core::geometry::BoundingBox;
use cropdet_core::pipeline::ImageRecord;
use image::{Rgb, RgbImage};

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
];

pub fn class_color(class_index: usize) -> [u8; 3] {
    PALETTE[class_index % PALETTE.len()]
}

const THICKNESS: u32 = 2;
const TAG_SIZE: u32 = 6;

fn fill(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..=y1.min(img.height() - 1) {
        for x in x0..=x1.min(img.width() - 1) {
            img.put_pixel(x, y, color);
        }
    }
}

fn draw_box(img: &mut RgbImage, b: &BoundingBox, color: Rgb<u8>) {
    if img.width() == 0 || img.height() == 0 {
        return;
    }
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    let x0 = b.x_min().clamp(0.0, max_x).round() as u32;
    let y0 = b.y_min().clamp(0.0, max_y).round() as u32;
    let x1 = b.x_max().clamp(0.0, max_x).round() as u32;
    let y1 = b.y_max().clamp(0.0, max_y).round() as u32;
    let t = THICKNESS - 1;
    fill(img, x0, y0, x1, y0 + t, color);
    fill(img, x0, y1.saturating_sub(t), x1, y1, color);
    fill(img, x0, y0, x0 + t, y1, color);
    fill(img, x1.saturating_sub(t), y0, x1, y1, color);
    // solid tag in the top-left corner stands in for a text label
    fill(img, x0, y0, x0 + TAG_SIZE, y0 + TAG_SIZE, color);
}

/// Copy of `image` with every detection in `record` outlined in its class color.
pub fn annotate(image: &RgbImage, record: &ImageRecord) -> RgbImage {
    let mut out = image.clone();
    // lowest scores first so the strongest boxes end up on top
    for d in record.detections.iter().rev() {
        draw_box(&mut out, &d.bbox, Rgb(class_color(d.class_index)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use cropdet_core::backends::ProposalSource;
    use cropdet_core::pipeline::DetectionEntry;

    #[test]
    fn draws_outline_only() {
        let img = RgbImage::from_pixel(40, 40, Rgb([0, 0, 0]));
        let b = BoundingBox::new(10.0, 10.0, 30.0, 30.0).unwrap();
        let record = ImageRecord {
            image: "x.png".into(),
            width: 40,
            height: 40,
            detections: vec![DetectionEntry {
                bbox: b,
                class_name: "a".into(),
                class_index: 1,
                raw_score: 0.5,
                refiner_quality: 1.0,
                fused_score: 1.0,
                source: ProposalSource::RU,
                proposal_box: b,
                mask: None,
            }],
        };
        let out = annotate(&img, &record);
        let c = Rgb(class_color(1));
        assert_eq!(*out.get_pixel(20, 10), c);
        assert_eq!(*out.get_pixel(30, 20), c);
        assert_eq!(*out.get_pixel(20, 20), Rgb([0, 0, 0]));
        assert_eq!(*out.get_pixel(5, 5), Rgb([0, 0, 0]));
    }
}
