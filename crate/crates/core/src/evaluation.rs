//! COCO-style detection and segmentation metrics for circle or contour
//! predictions.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{bounds, circle_iou, rasterize_polygon, shoelace, Circle, Contour, Mask};
use crate::model::InstancePrediction;

/// Detections kept per image and class, highest scores first.
pub const MAX_DETECTIONS: usize = 100;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;
const RECALL_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// IoU of the predicted and ground-truth circles.
    Circle,
    /// IoU of the rasterized contours.
    Segm,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Circle => "circle",
            EvalMode::Segm => "segm",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segm" => Ok(EvalMode::Segm),
            "circle" | "bbox" => Ok(EvalMode::Circle),
            other => Err(Error::Config(format!("unknown evaluation mode `{other}` (segm, circle or bbox)"))),
        }
    }
}

/// `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub circle: Circle,
    pub contour: Contour,
}

impl GroundTruth {
    pub fn class_id(&self) -> usize {
        self.circle.class_id
    }
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug)]
pub struct ImageRecord {
    pub image_id: u64,
    pub width: usize,
    pub height: usize,
    pub gts: Vec<GroundTruth>,
    pub preds: Vec<InstancePrediction>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub class_names: Vec<String>,
    /// Threshold for per-class AP; `None` averages over all thresholds.
    pub per_class_threshold: Option<f64>,
    pub max_detections: usize,
}

impl EvalConfig {
    pub fn new(mode: EvalMode, class_names: Vec<String>) -> Self {
        Self { mode, class_names, per_class_threshold: None, max_detections: MAX_DETECTIONS }
    }
}

/// Greedy same-class matching of score-sorted predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// `(prediction, ground truth, IoU)`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// `ious[p][g]` is the IoU of prediction `p` and ground truth `g`.
/// Predictions must be in descending score order. Each prediction takes the
/// highest-IoU unmatched ground truth of its class with IoU ≥ `threshold`.
pub fn match_detections(
    ious: &[Vec<f64>],
    pred_classes: &[usize],
    gt_classes: &[usize],
    threshold: f64,
) -> Matching {
    let ignore = vec![false; gt_classes.len()];
    let assigned = greedy_match(ious, pred_classes, gt_classes, &ignore, threshold);
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    let mut taken = vec![false; gt_classes.len()];
    for (p, m) in assigned.iter().enumerate() {
        match m {
            Some(g) => {
                pairs.push((p, *g, ious[p][*g]));
                taken[*g] = true;
            }
            None => unmatched_preds.push(p),
        }
    }
    let unmatched_gts = (0..gt_classes.len()).filter(|&g| !taken[g]).collect();
    Matching { pairs, unmatched_preds, unmatched_gts }
}

/// Ignored ground truth is only matched when no regular one qualifies.
fn greedy_match(
    ious: &[Vec<f64>],
    pred_classes: &[usize],
    gt_classes: &[usize],
    gt_ignore: &[bool],
    threshold: f64,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt_classes.len()];
    let mut out = Vec::with_capacity(pred_classes.len());
    for (p, &pc) in pred_classes.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for pass_ignored in [false, true] {
            for (g, &gc) in gt_classes.iter().enumerate() {
                if taken[g] || gc != pc || gt_ignore[g] != pass_ignored {
                    continue;
                }
                let iou = ious[p][g];
                if iou >= threshold && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if best.is_some() {
                break;
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        out.push(best.map(|(g, _)| g));
    }
    out
}

/// 101-point interpolated AP of `(score, is_true_positive)` detections
/// against `gt_count` ground-truth objects. `None` when there is nothing to
/// find.
pub fn average_precision(detections: &[(f64, bool)], gt_count: usize) -> Option<f64> {
    if gt_count == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    // stable: equal scores keep their input order
    order.sort_by(|&a, &b| detections[b].0.total_cmp(&detections[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    for &i in &order {
        if detections[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / gt_count as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        let at = recall.partition_point(|&x| x < r);
        if at < precision.len() {
            sum += precision[at];
        }
    }
    Some(sum / RECALL_POINTS as f64)
}

/// Match counts at one IoU threshold over all sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchCounts {
    pub threshold_percent: u32,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Metrics are `None` when not applicable (no ground truth in scope).
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub ap_s: Option<f64>,
    pub ap_m: Option<f64>,
    pub class_names: Vec<String>,
    pub per_class: Vec<Option<f64>>,
    pub per_class_threshold: Option<f64>,
    /// Mean Dice of the contour masks of pairs matched at IoU 0.5.
    pub dice: Option<f64>,
    pub dice_pairs: usize,
    pub diagnostics: Vec<MatchCounts>,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("-1".to_string(), |v| format!("{v:.6}"))
}

fn mean(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    pub fn per_class_label(&self) -> String {
        match self.per_class_threshold {
            Some(t) => format!("per-class AP at IoU {t:.2}"),
            None => "per-class AP averaged over IoU 0.50:0.95".to_string(),
        }
    }

    /// Human-readable table.
    pub fn render_table(&self) -> String {
        let mut s = format!("mode {}; {}; n/a = no ground truth in scope\n", self.mode.name(), self.per_class_label());
        let cell = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(s, "{:>7} {:>7} {:>7} {:>7} {:>7}", "AP", "AP50", "AP75", "AP_S", "AP_M");
        let _ = writeln!(
            s,
            "{:>7} {:>7} {:>7} {:>7} {:>7}",
            cell(self.ap),
            cell(self.ap50),
            cell(self.ap75),
            cell(self.ap_s),
            cell(self.ap_m)
        );
        let width = self.class_names.iter().map(|n| n.len() + 4).max().unwrap_or(0).max(7);
        let _ = writeln!(
            s,
            "{}",
            self.class_names.iter().map(|n| format!("{:>width$}", format!("AP({n})"))).collect::<Vec<_>>().join(" ")
        );
        let _ = writeln!(
            s,
            "{}",
            self.per_class.iter().map(|v| format!("{:>width$}", cell(*v))).collect::<Vec<_>>().join(" ")
        );
        if let Some(d) = self.dice {
            let _ = writeln!(s, "Dice {d:.3} over {} matched pairs", self.dice_pairs);
        }
        s
    }

    /// `key=value` lines; not-applicable metrics are `-1`.
    pub fn render_kv(&self) -> String {
        let mut s = format!("mode={}\n", self.mode.name());
        for (k, v) in [("AP", self.ap), ("AP50", self.ap50), ("AP75", self.ap75), ("AP_S", self.ap_s), ("AP_M", self.ap_m)] {
            let _ = writeln!(s, "{k}={}", fmt_metric(v));
        }
        for (n, v) in self.class_names.iter().zip(&self.per_class) {
            let _ = writeln!(s, "AP({n})={}", fmt_metric(*v));
        }
        let _ = writeln!(s, "dice={}", fmt_metric(self.dice));
        let _ = writeln!(s, "dice_pairs={}", self.dice_pairs);
        for c in &self.diagnostics {
            let t = c.threshold_percent;
            let _ = writeln!(s, "tp@{t}={}\nfp@{t}={}\nfn@{t}={}", c.tp, c.fp, c.fn_);
        }
        s
    }

    /// Every applicable headline and per-class metric.
    pub fn metrics(&self) -> Vec<f64> {
        [self.ap, self.ap50, self.ap75, self.ap_s, self.ap_m].into_iter().chain(self.per_class.iter().copied()).flatten().collect()
    }
}

/// Geometry of one instance in the evaluated mode.
struct Shape {
    class_id: usize,
    area: f64,
    circle: Circle,
    mask: Mask,
    mask_area: usize,
    window: [f64; 4],
}

impl Shape {
    fn new(circle: &Circle, contour: &Contour, mode: EvalMode, w: usize, h: usize, need_mask: bool) -> Self {
        let mask = if need_mask { rasterize_polygon(&contour.vertices, w, h) } else { Mask::empty() };
        let area = match mode {
            EvalMode::Circle => circle.area(),
            EvalMode::Segm => shoelace(&contour.vertices).abs(),
        };
        let window = if contour.vertices.is_empty() { [0.0; 4] } else { bounds(&contour.vertices) };
        Self { class_id: circle.class_id, area, circle: *circle, mask_area: mask.area(), mask, window }
    }

    fn mask_iou(&self, o: &Shape) -> f64 {
        let [ax0, ay0, ax1, ay1] = self.window;
        let [bx0, by0, bx1, by1] = o.window;
        if ax1 < bx0 || bx1 < ax0 || ay1 < by0 || by1 < ay0 {
            return 0.0;
        }
        let inter = self.mask.intersection(&o.mask) as f64;
        let union = (self.mask_area + o.mask_area) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn mask_dice(&self, o: &Shape) -> f64 {
        let total = (self.mask_area + o.mask_area) as f64;
        if total == 0.0 {
            0.0
        } else {
            2.0 * self.mask.intersection(&o.mask) as f64 / total
        }
    }
}

/// Per-image, per-class state prepared once for all thresholds and buckets.
struct ClassImage {
    scores: Vec<f64>,
    pred_area: Vec<f64>,
    gt_area: Vec<f64>,
    /// `ious[p][g]`, predictions in descending score order.
    ious: Vec<Vec<f64>>,
    pred_idx: Vec<usize>,
    gt_idx: Vec<usize>,
}

fn in_range(a: f64, range: (f64, f64)) -> bool {
    a >= range.0 && a < range.1
}

/// Evaluates predictions against ground truth over IoU 0.50:0.95.
pub fn evaluate(images: &[ImageRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    let classes = cfg.class_names.len();
    for im in images {
        let bad = im
            .gts
            .iter()
            .map(|g| g.class_id())
            .chain(im.preds.iter().map(|p| p.circle.class_id))
            .find(|&c| c >= classes);
        if let Some(c) = bad {
            return Err(Error::contract(format!("image {}: class {c} outside the {classes} evaluated classes", im.image_id)));
        }
    }
    let thresholds = iou_thresholds();
    let ranges = [(0.0, f64::INFINITY), (0.0, SMALL_AREA), (SMALL_AREA, MEDIUM_AREA)];

    // dice always compares masks, whatever the matching mode
    let mut per_image: Vec<Vec<ClassImage>> = Vec::with_capacity(images.len());
    let mut dice_sum = 0.0;
    let mut dice_pairs = 0usize;
    for im in images {
        let gts: Vec<Shape> =
            im.gts.iter().map(|g| Shape::new(&g.circle, &g.contour, cfg.mode, im.width, im.height, true)).collect();
        let preds: Vec<Shape> = im
            .preds
            .iter()
            .map(|p| Shape::new(&p.circle, &p.contour, cfg.mode, im.width, im.height, true))
            .collect();
        let mut by_class = Vec::with_capacity(classes);
        for c in 0..classes {
            let gt_idx: Vec<usize> = (0..gts.len()).filter(|&g| gts[g].class_id == c).collect();
            let mut pred_idx: Vec<usize> = (0..preds.len()).filter(|&p| preds[p].class_id == c).collect();
            pred_idx.sort_by(|&a, &b| im.preds[b].score.total_cmp(&im.preds[a].score));
            pred_idx.truncate(cfg.max_detections);
            let ious: Vec<Vec<f64>> = pred_idx
                .iter()
                .map(|&p| {
                    gt_idx
                        .iter()
                        .map(|&g| match cfg.mode {
                            EvalMode::Circle => circle_iou(&preds[p].circle, &gts[g].circle),
                            EvalMode::Segm => preds[p].mask_iou(&gts[g]),
                        })
                        .collect()
                })
                .collect();
            let ci = ClassImage {
                scores: pred_idx.iter().map(|&p| im.preds[p].score).collect(),
                pred_area: pred_idx.iter().map(|&p| preds[p].area).collect(),
                gt_area: gt_idx.iter().map(|&g| gts[g].area).collect(),
                ious,
                pred_idx,
                gt_idx,
            };
            let m = match_detections(&ci.ious, &vec![c; ci.pred_idx.len()], &vec![c; ci.gt_idx.len()], 0.5);
            for (p, g, _) in m.pairs {
                dice_sum += preds[ci.pred_idx[p]].mask_dice(&gts[ci.gt_idx[g]]);
                dice_pairs += 1;
            }
            by_class.push(ci);
        }
        per_image.push(by_class);
    }

    // ap[range][threshold][class]
    let mut ap = vec![vec![vec![None; classes]; thresholds.len()]; ranges.len()];
    let mut diagnostics = Vec::with_capacity(thresholds.len());
    for (ri, &range) in ranges.iter().enumerate() {
        for (ti, &t) in thresholds.iter().enumerate() {
            let (mut tp_all, mut fp_all, mut fn_all) = (0, 0, 0);
            for c in 0..classes {
                let mut dets = Vec::new();
                let mut gt_count = 0;
                for img in &per_image {
                    let ci = &img[c];
                    let ignore: Vec<bool> = ci.gt_area.iter().map(|&a| !in_range(a, range)).collect();
                    gt_count += ignore.iter().filter(|&&i| !i).count();
                    let n = ci.pred_idx.len();
                    let assigned = greedy_match(&ci.ious, &vec![c; n], &vec![c; ci.gt_idx.len()], &ignore, t);
                    let mut matched = 0;
                    for (p, m) in assigned.iter().enumerate() {
                        match m {
                            Some(g) if ignore[*g] => {}
                            Some(_) => {
                                dets.push((ci.scores[p], true));
                                matched += 1;
                            }
                            None if !in_range(ci.pred_area[p], range) => {}
                            None => dets.push((ci.scores[p], false)),
                        }
                    }
                    if ri == 0 {
                        tp_all += matched;
                        fp_all += n - matched;
                        fn_all += ci.gt_idx.len() - matched;
                    }
                }
                ap[ri][ti][c] = average_precision(&dets, gt_count);
            }
            if ri == 0 {
                diagnostics.push(MatchCounts {
                    threshold_percent: (t * 100.0).round() as u32,
                    tp: tp_all,
                    fp: fp_all,
                    fn_: fn_all,
                });
            }
        }
    }
    let all = &ap[0];
    let at = |v: f64| thresholds.iter().position(|&t| (t - v).abs() < 1e-9);
    let per_class = (0..classes)
        .map(|c| match cfg.per_class_threshold {
            None => mean(all.iter().map(|row| row[c])),
            Some(v) => at(v).and_then(|ti| all[ti][c]),
        })
        .collect();
    Ok(EvalReport {
        mode: cfg.mode,
        ap: mean(all.iter().flatten().copied()),
        ap50: mean(all[0].iter().copied()),
        ap75: mean(all[5].iter().copied()),
        ap_s: mean(ap[1].iter().flatten().copied()),
        ap_m: mean(ap[2].iter().flatten().copied()),
        class_names: cfg.class_names.clone(),
        per_class,
        per_class_threshold: cfg.per_class_threshold,
        dice: (dice_pairs > 0).then(|| dice_sum / dice_pairs as f64),
        dice_pairs,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::sample_circle_contour;

    fn gt(cx: f64, cy: f64, r: f64, c: usize) -> GroundTruth {
        let circle = Circle::new(cx, cy, r, c);
        GroundTruth { contour: sample_circle_contour(&circle, 64).unwrap(), circle }
    }

    fn pred(g: &GroundTruth, score: f64) -> InstancePrediction {
        InstancePrediction { circle: g.circle.with_score(score), contour: g.contour.clone(), score }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn matching_examples() {
        let m = match_detections(&[vec![0.8]], &[0], &[0], 0.5);
        assert_eq!(m.pairs.len(), 1);
        let m = match_detections(&[vec![0.8]], &[0], &[0], 0.9);
        assert_eq!((m.pairs.len(), m.unmatched_preds.len(), m.unmatched_gts.len()), (0, 1, 1));
        let m = match_detections(&[vec![0.7], vec![0.9]], &[0, 0], &[0], 0.5);
        assert_eq!((m.pairs[0].0, m.unmatched_preds.clone()), (0, vec![1]));
        let m = match_detections(&[vec![0.9]], &[1], &[0], 0.5);
        assert!(m.pairs.is_empty());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[(0.9, true)], 1), Some(1.0));
        assert_eq!(average_precision(&[], 1), Some(0.0));
        assert_eq!(average_precision(&[(0.9, true), (0.8, false)], 1), Some(1.0));
        assert_eq!(average_precision(&[], 0), None);
        // FP first: precision 1/2 everywhere on the recall grid
        assert!((average_precision(&[(0.8, true), (0.9, false)], 1).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn replayed_ground_truth_is_perfect() {
        let gts = vec![gt(40.0, 40.0, 10.0, 0), gt(120.0, 60.0, 40.0, 1), gt(60.0, 150.0, 12.0, 1)];
        let preds = gts.iter().map(|g| pred(g, 0.9)).collect();
        let im = ImageRecord { image_id: 1, width: 256, height: 256, gts, preds };
        for mode in [EvalMode::Circle, EvalMode::Segm] {
            let r = evaluate(std::slice::from_ref(&im), &EvalConfig::new(mode, names(3))).unwrap();
            assert!(r.metrics().iter().all(|&m| m == 1.0), "{r:?}");
            assert_eq!(r.per_class[2], None);
            assert_eq!(r.dice, Some(1.0));
            assert!(r.render_kv().contains("AP(c2)=-1"));
        }
    }

    #[test]
    fn empty_predictions_score_zero() {
        let im = ImageRecord { image_id: 1, width: 128, height: 128, gts: vec![gt(40.0, 40.0, 10.0, 0)], preds: vec![] };
        let r = evaluate(&[im], &EvalConfig::new(EvalMode::Segm, names(1))).unwrap();
        assert!(r.metrics().iter().all(|&m| m == 0.0));
        assert_eq!(r.ap_m, None);
        assert_eq!(r.dice, None);
    }

    #[test]
    fn class_outside_universe_is_rejected() {
        let im = ImageRecord { image_id: 1, width: 64, height: 64, gts: vec![gt(20.0, 20.0, 5.0, 3)], preds: vec![] };
        assert!(evaluate(&[im], &EvalConfig::new(EvalMode::Circle, names(2))).is_err());
    }

    #[test]
    fn ignored_ground_truth_does_not_count() {
        // a medium object detected perfectly; the small bucket sees nothing
        let g = gt(64.0, 64.0, 30.0, 0);
        let im = ImageRecord { image_id: 1, width: 128, height: 128, preds: vec![pred(&g, 0.8)], gts: vec![g] };
        let r = evaluate(&[im], &EvalConfig::new(EvalMode::Circle, names(1))).unwrap();
        assert_eq!((r.ap_s, r.ap_m), (None, Some(1.0)));
    }
}
