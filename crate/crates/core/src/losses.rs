//! Detection and contour objectives.
//!
//! Every loss is normalized by the number of supervised objects, floored at 1
//! so background-only batches stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Contour;
use crate::heatmap::DetectionTargets;
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_radius: f64,
    pub lambda_off: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_radius: 0.1, lambda_off: 1.0, alpha: 2.0, beta: 4.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_radius, self.lambda_off, self.alpha, self.beta];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::contract(format!("loss weights must be positive: {self:?}")))
        }
    }
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Summed over classes.
    pub l_focal: f64,
    pub l_radius: f64,
    pub l_offset: f64,
    /// `l_focal + λ_radius·l_radius + λ_off·l_offset`.
    pub l_det: f64,
    /// Summed over deformation iterations.
    pub l_iter: f64,
}

impl LossBreakdown {
    pub fn compose(l_focal: f64, l_radius: f64, l_offset: f64, l_iter: f64, w: &LossWeights) -> Self {
        let l_det = l_focal + w.lambda_radius * l_radius + w.lambda_off * l_offset;
        Self { l_focal, l_radius, l_offset, l_det, l_iter }
    }

    pub fn total(&self) -> f64 {
        self.l_det + self.l_iter
    }

    pub fn is_finite(&self) -> bool {
        [self.l_focal, self.l_radius, self.l_offset, self.l_det, self.l_iter].iter().all(|v| v.is_finite())
    }
}

fn object_norm<T: Real>(targets: &[&DetectionTargets]) -> T {
    T::of(targets.iter().map(|t| t.object_count).sum::<usize>().max(1) as f64)
}

fn check_batch(g_shape: &[usize], targets: &[&DetectionTargets], channels: usize, what: &str) -> Result<(usize, usize)> {
    let Some(first) = targets.first() else {
        return Err(Error::contract(format!("{what}: empty batch")));
    };
    let (h, w) = first.grid();
    if g_shape != [targets.len(), channels, h, w] || targets.iter().any(|t| t.grid() != (h, w)) {
        return Err(Error::contract(format!(
            "{what}: prediction {g_shape:?} does not match {} targets of {channels}x{h}x{w}",
            targets.len()
        )));
    }
    Ok((h, w))
}

/// Focal loss of `pred: [B,C,h,w]` probabilities against the encoded heatmaps.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[&DetectionTargets],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    let classes = targets.first().map_or(0, |t| t.classes());
    check_batch(g.shape(pred), targets, classes, "focal_loss")?;
    if let Some(i) = g.data(pred).iter().position(|&p| !(p > T::zero() && p < T::one())) {
        return Err(Error::contract(format!(
            "focal_loss: prediction {} at index {i} is outside (0, 1)",
            g.data(pred)[i].as_f64()
        )));
    }
    let target: Vec<T> = targets.iter().flat_map(|t| t.heatmap.data().iter().map(|&v| T::of(v))).collect();
    g.focal(pred, &target, object_norm(targets), T::of(alpha), T::of(beta))
}

/// Mean absolute radius error at ground-truth centers of `pred: [B,1,h,w]`.
pub fn radius_loss<T: Real>(g: &mut Graph<T>, pred: Var, targets: &[&DetectionTargets]) -> Result<Var> {
    let (h, w) = check_batch(g.shape(pred), targets, 1, "radius_loss")?;
    let mut index = Vec::new();
    let mut value = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for c in &t.centers {
            index.push(b * h * w + c.cell_y * w + c.cell_x);
            value.push(T::of(c.radius));
        }
    }
    g.masked_l1(pred, &index, &value, object_norm(targets))
}

/// Mean L1 sub-cell offset error at ground-truth centers of `pred: [B,2,h,w]`,
/// both axes summed per object.
pub fn offset_loss<T: Real>(g: &mut Graph<T>, pred: Var, targets: &[&DetectionTargets]) -> Result<Var> {
    let (h, w) = check_batch(g.shape(pred), targets, 2, "offset_loss")?;
    let mut index = Vec::new();
    let mut value = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for c in &t.centers {
            let cell = c.cell_y * w + c.cell_x;
            for axis in 0..2 {
                index.push((b * 2 + axis) * h * w + cell);
                value.push(T::of(c.offset[axis]));
            }
        }
    }
    g.masked_l1(pred, &index, &value, object_norm(targets))
}

/// `focal + λ_radius·radius + λ_off·offset`.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    focal: Var,
    radius: Var,
    offset: Var,
    w: &LossWeights,
) -> Result<Var> {
    let r = g.scale(radius, T::of(w.lambda_radius));
    let o = g.scale(offset, T::of(w.lambda_off));
    let fr = g.add(focal, r)?;
    g.add(fr, o)
}

/// Vertex layout shared by the contour network: `[I, 2, N]`, x row then y row.
pub fn contours_to_rows(contours: &[&Contour]) -> Vec<f64> {
    let mut out = Vec::with_capacity(contours.iter().map(|c| 2 * c.len()).sum());
    for c in contours {
        out.extend(c.vertices.iter().map(|v| v[0]));
        out.extend(c.vertices.iter().map(|v| v[1]));
    }
    out
}

/// `(1/N)·Σ_i (|Δx_i| + |Δy_i|)` averaged over the instances of
/// `deformed: [I,2,N]`.
pub fn iter_loss<T: Real>(g: &mut Graph<T>, deformed: Var, gt: &[&Contour]) -> Result<Var> {
    let s = g.shape(deformed).to_vec();
    if s.len() != 3 || s[1] != 2 || s[0] != gt.len() {
        return Err(Error::contract(format!("iter_loss: deformed {s:?} does not hold {} contours", gt.len())));
    }
    if let Some(c) = gt.iter().find(|c| c.len() != s[2]) {
        return Err(Error::contract(format!("iter_loss: {} deformed vertices against {} target vertices", s[2], c.len())));
    }
    let target: Vec<T> = contours_to_rows(gt).into_iter().map(T::of).collect();
    g.l1(deformed, &target, T::of((gt.len() * s[2]).max(1) as f64))
}
