//! Benchmark fixtures. The benchmarks live under `benches/`.

use circlesnake::evaluation::{GroundTruth, ImageRecord};
use circlesnake::geometry::{sample_circle_contour, Circle};
use circlesnake::model::InstancePrediction;

/// A grid of `per_side²` circles on a `size × size` image, classes cycling.
pub fn circle_grid(size: f64, per_side: usize) -> Vec<Circle> {
    let step = size / per_side as f64;
    (0..per_side * per_side)
        .map(|k| {
            let (i, j) = (k % per_side, k / per_side);
            Circle::new((i as f64 + 0.5) * step, (j as f64 + 0.5) * step, step * 0.3, k % 4)
        })
        .collect()
}

/// Ground truth paired with predictions shifted by `shift` pixels.
pub fn eval_records(images: usize, per_side: usize, vertices: usize, shift: f64) -> Vec<ImageRecord> {
    let circles = circle_grid(512.0, per_side);
    (0..images as u64)
        .map(|image_id| ImageRecord {
            image_id,
            width: 512,
            height: 512,
            gts: circles
                .iter()
                .map(|&c| GroundTruth { circle: c, contour: sample_circle_contour(&c, vertices).unwrap() })
                .collect(),
            preds: circles
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let p = Circle::new(c.cx + shift, c.cy, c.r, c.class_id).with_score(1.0 - k as f64 * 1e-3);
                    InstancePrediction { circle: p, contour: sample_circle_contour(&p, vertices).unwrap(), score: p.score }
                })
                .collect(),
        })
        .collect()
}
