//! Ground-truth encoding into per-class center heatmaps with radius and
//! sub-cell offset targets, and decoding of network maps back into circles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Circle;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_DOWNSAMPLE: usize = 4;
/// Peak threshold used while training and for validation.
pub const TRAIN_CT_SCORE: f64 = 0.05;
/// Peak threshold of the evaluation runs.
pub const EVAL_CT_SCORE: f64 = 0.2;
/// Minimum overlap of the keypoint radius rule that sets the Gaussian spread.
pub const GAUSSIAN_MIN_OVERLAP: f64 = 0.7;
/// Gaussians are rendered out to this many standard deviations.
pub const GAUSSIAN_TRUNCATION: f64 = 3.0;

/// One supervised center cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterTarget {
    pub class_id: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    /// Radius in output-grid units (`r / R`).
    pub radius: f64,
    /// `p/R − ⌊p/R⌋` per axis.
    pub offset: [f64; 2],
    /// Index of the source circle in the encoded list.
    pub source: usize,
}

/// Encoded training targets of one image.
#[derive(Clone, Debug)]
pub struct DetectionTargets {
    /// `[C, h, w]`, values in `[0, 1]`.
    pub heatmap: Tensor<f64>,
    /// `[1, h, w]`, radius in grid units at center cells, 0 elsewhere.
    pub radius_map: Tensor<f64>,
    /// `[2, h, w]`, sub-cell offsets at center cells, 0 elsewhere.
    pub offset_map: Tensor<f64>,
    /// `[C, h, w]`, set at ground-truth center cells.
    pub center_mask: Vec<bool>,
    pub centers: Vec<CenterTarget>,
    pub object_count: usize,
    pub downsample: usize,
}

impl DetectionTargets {
    pub fn classes(&self) -> usize {
        self.heatmap.shape()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.heatmap.shape()[1], self.heatmap.shape()[2])
    }
}

/// Keypoint radius rule: the largest corner displacement that keeps a box of
/// `height × width` above `min_overlap` IoU with the ground truth.
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (height, width, min_overlap);
    let b1 = h + w;
    let c1 = w * h * (1.0 - o) / (1.0 + o);
    let r1 = (b1 + (b1 * b1 - 4.0 * c1).max(0.0).sqrt()) / 2.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - o) * w * h;
    let r2 = (b2 + (b2 * b2 - 16.0 * c2).max(0.0).sqrt()) / 2.0;
    let a3 = 4.0 * o;
    let b3 = -2.0 * o * (h + w);
    let c3 = (o - 1.0) * w * h;
    let r3 = (b3 + (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt()) / 2.0;
    r1.min(r2).min(r3)
}

/// Standard deviation of the center Gaussian for an object of radius
/// `radius_grid` in output-grid units.
pub fn gaussian_sigma(radius_grid: f64) -> f64 {
    let d = 2.0 * radius_grid;
    (gaussian_radius(d, d, GAUSSIAN_MIN_OVERLAP) / 3.0).max(1.0)
}

/// Output grid size for an input extent.
pub fn grid_extent(input: usize, downsample: usize) -> usize {
    input.div_ceil(downsample)
}

/// Renders ground-truth circles into heatmap, radius and offset targets.
pub fn encode_targets(
    gts: &[Circle],
    input_w: usize,
    input_h: usize,
    downsample: usize,
    classes: usize,
) -> Result<DetectionTargets> {
    if downsample == 0 || classes == 0 {
        return Err(Error::contract("downsample factor and class count must be positive"));
    }
    let bad: Vec<String> = gts
        .iter()
        .enumerate()
        .filter(|(_, c)| {
            !(c.cx >= 0.0 && c.cy >= 0.0 && c.cx < input_w as f64 && c.cy < input_h as f64 && c.r > 0.0)
                || c.class_id >= classes
        })
        .map(|(i, c)| format!("#{i} ({:.2}, {:.2}, r={:.2}, class {})", c.cx, c.cy, c.r, c.class_id))
        .collect();
    if !bad.is_empty() {
        return Err(Error::contract(format!(
            "ground truth outside the {input_w}x{input_h} image or class range: {}",
            bad.join(", ")
        )));
    }
    let (w, h) = (grid_extent(input_w, downsample), grid_extent(input_h, downsample));
    let rf = downsample as f64;
    let mut heat = vec![0.0f64; classes * h * w];
    let mut radius = vec![0.0f64; h * w];
    let mut offset = vec![0.0f64; 2 * h * w];
    let mut mask = vec![false; classes * h * w];
    let mut centers: Vec<CenterTarget> = Vec::with_capacity(gts.len());

    for (i, c) in gts.iter().enumerate() {
        let (px, py) = (c.cx / rf, c.cy / rf);
        let (cx, cy) = (px.floor() as usize, py.floor() as usize);
        let sigma = gaussian_sigma(c.r / rf);
        let reach = (GAUSSIAN_TRUNCATION * sigma).floor() as isize;
        let plane = &mut heat[c.class_id * h * w..(c.class_id + 1) * h * w];
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (cx as isize + dx, cy as isize + dy);
                if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                    continue;
                }
                let d2 = (dx * dx + dy * dy) as f64;
                if d2 > (GAUSSIAN_TRUNCATION * sigma).powi(2) {
                    continue;
                }
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = &mut plane[y as usize * w + x as usize];
                *cell = cell.max(v);
            }
        }
        let cell = cy * w + cx;
        radius[cell] = c.r / rf;
        offset[cell] = px - cx as f64;
        offset[h * w + cell] = py - cy as f64;
        mask[c.class_id * h * w + cell] = true;
        let target = CenterTarget {
            class_id: c.class_id,
            cell_x: cx,
            cell_y: cy,
            radius: c.r / rf,
            offset: [px - cx as f64, py - cy as f64],
            source: i,
        };
        match centers.iter_mut().find(|t| t.class_id == c.class_id && t.cell_x == cx && t.cell_y == cy) {
            Some(slot) => *slot = target,
            None => centers.push(target),
        }
    }
    let object_count = centers.len();
    Ok(DetectionTargets {
        heatmap: Tensor::new(vec![classes, h, w], heat)?,
        radius_map: Tensor::new(vec![1, h, w], radius)?,
        offset_map: Tensor::new(vec![2, h, w], offset)?,
        center_mask: mask,
        centers,
        object_count,
        downsample,
    })
}

/// A heatmap local maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Cells equal to the maximum of their 3×3 neighbourhood, best `top_n` first.
/// Equal scores keep scan order (class, then row, then column).
pub fn extract_peaks<T: Real>(heatmap: &Tensor<T>, top_n: usize) -> Result<Vec<Peak>> {
    let s = heatmap.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("heatmap must be [C,h,w], got {s:?}")));
    }
    let (classes, h, w) = (s[0], s[1], s[2]);
    let d = heatmap.data();
    let mut peaks = Vec::new();
    for c in 0..classes {
        let plane = &d[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x];
                let mut is_peak = true;
                'scan: for ny in y.saturating_sub(1)..(y + 2).min(h) {
                    for nx in x.saturating_sub(1)..(x + 2).min(w) {
                        if plane[ny * w + nx] > v {
                            is_peak = false;
                            break 'scan;
                        }
                    }
                }
                if is_peak {
                    peaks.push(Peak { class_id: c, x, y, score: v.as_f64() });
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.score.total_cmp(&a.score));
    peaks.truncate(top_n);
    Ok(peaks)
}

/// Scored circles decoded from one image's head maps, in input coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionOutput {
    pub circles: Vec<Circle>,
}

/// Decodes circles: center `((x̂ + δx̂)·R, (ŷ + δŷ)·R)`, radius `R̂(x̂,ŷ)·R`.
pub fn decode_circles<T: Real>(
    heatmap: &Tensor<T>,
    radius_map: &Tensor<T>,
    offset_map: &Tensor<T>,
    top_n: usize,
    ct_score: f64,
    downsample: usize,
) -> Result<DetectionOutput> {
    let hs = heatmap.shape();
    if hs.len() != 3
        || radius_map.shape() != [1, hs[1], hs[2]]
        || offset_map.shape() != [2, hs[1], hs[2]]
    {
        return Err(Error::contract(format!(
            "head maps disagree: heatmap {:?}, radius {:?}, offset {:?}",
            hs,
            radius_map.shape(),
            offset_map.shape()
        )));
    }
    let (h, w) = (hs[1], hs[2]);
    let rf = downsample as f64;
    let rd = radius_map.data();
    let od = offset_map.data();
    let circles = extract_peaks(heatmap, top_n)?
        .into_iter()
        .filter(|p| p.score >= ct_score)
        .map(|p| {
            let cell = p.y * w + p.x;
            let cx = (p.x as f64 + od[cell].as_f64()) * rf;
            let cy = (p.y as f64 + od[h * w + cell].as_f64()) * rf;
            Circle { cx, cy, r: rd[cell].as_f64() * rf, class_id: p.class_id, score: p.score }
        })
        .collect();
    Ok(DetectionOutput { circles })
}

/// Result of [`roundtrip_check`].
#[derive(Clone, Debug)]
pub struct RoundtripReport {
    /// Decoded circle matched to each ground truth, by index.
    pub recovered: Vec<Option<Circle>>,
    /// Decoded circles that matched no ground truth.
    pub spurious: Vec<Circle>,
}

impl RoundtripReport {
    pub fn all_recovered(&self) -> bool {
        self.recovered.iter().all(Option::is_some)
    }
}

/// Encodes `gts`, decodes the targets as if they were predictions, and pairs
/// decoded circles with ground truth (same class, center within 0.5 px,
/// radius within `R/2`).
///
/// Ground truth must be separated by more than `2R` pixels; closer objects
/// can share an output cell and encoding is lossy there.
pub fn roundtrip_check(
    gts: &[Circle],
    input_w: usize,
    input_h: usize,
    downsample: usize,
    classes: usize,
    top_n: usize,
    ct_score: f64,
) -> Result<RoundtripReport> {
    let rf = downsample as f64;
    for i in 0..gts.len() {
        for j in i + 1..gts.len() {
            let (a, b) = (&gts[i], &gts[j]);
            let same_cell = (a.cx / rf).floor() == (b.cx / rf).floor() && (a.cy / rf).floor() == (b.cy / rf).floor();
            if same_cell && a.class_id == b.class_id {
                return Err(Error::contract(format!(
                    "circles #{i} and #{j} (class {}) collide in output cell ({}, {})",
                    a.class_id,
                    (a.cx / rf).floor(),
                    (a.cy / rf).floor()
                )));
            }
            let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
            if d <= 2.0 * rf {
                return Err(Error::contract(format!(
                    "circles #{i} and #{j} are {d:.2} px apart; round trips need more than {} px",
                    2.0 * rf
                )));
            }
        }
    }
    let t = encode_targets(gts, input_w, input_h, downsample, classes)?;
    let out = decode_circles(&t.heatmap, &t.radius_map, &t.offset_map, top_n, ct_score, downsample)?;
    let mut recovered = vec![None; gts.len()];
    let mut spurious = Vec::new();
    for c in out.circles {
        let hit = gts.iter().enumerate().position(|(i, g)| {
            recovered[i].is_none()
                && g.class_id == c.class_id
                && ((g.cx - c.cx).powi(2) + (g.cy - c.cy).powi(2)).sqrt() <= 0.5
                && (g.r - c.r).abs() <= rf / 2.0
        });
        match hit {
            Some(i) => recovered[i] = Some(c),
            None => spurious.push(c),
        }
    }
    Ok(RoundtripReport { recovered, spurious })
}
