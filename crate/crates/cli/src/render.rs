//! Prediction overlays.

use image::{Rgb, RgbImage};

use circlesnake::model::InstancePrediction;

/// Outline colors per class index, cycling past the end.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[0, 200, 255], [255, 220, 0], [40, 220, 60], [255, 60, 255]];

pub fn class_color(class_id: usize) -> Rgb<u8> {
    Rgb(CLASS_COLORS[class_id % CLASS_COLORS.len()])
}

fn plot(img: &mut RgbImage, x: f64, y: f64, c: Rgb<u8>) {
    let (xi, yi) = (x.floor(), y.floor());
    if xi >= 0.0 && yi >= 0.0 && (xi as u32) < img.width() && (yi as u32) < img.height() {
        img.put_pixel(xi as u32, yi as u32, c);
    }
}

/// Draws a segment by sampling it at sub-pixel steps.
pub fn draw_line(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], c: Rgb<u8>) {
    let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()) * 2.0).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        plot(img, a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), c);
    }
}

pub fn draw_polygon(img: &mut RgbImage, points: &[[f64; 2]], c: Rgb<u8>) {
    for (i, &p) in points.iter().enumerate() {
        draw_line(img, p, points[(i + 1) % points.len()], c);
    }
}

/// The input with each contour drawn in its class color and the detected
/// circle center marked with a small cross.
pub fn overlay(image: &RgbImage, preds: &[InstancePrediction]) -> RgbImage {
    let mut out = image.clone();
    for p in preds {
        let c = class_color(p.circle.class_id);
        draw_polygon(&mut out, &p.contour.vertices, c);
        let (x, y) = (p.circle.cx, p.circle.cy);
        draw_line(&mut out, [x - 2.0, y], [x + 2.0, y], c);
        draw_line(&mut out, [x, y - 2.0], [x, y + 2.0], c);
    }
    out
}
