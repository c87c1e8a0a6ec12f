mod common;

use circlesnake::data::{
    annotations_to_patches, apportion, clip_polygon, read_coco, split_catalog, tile_grid, write_coco, CocoAnnotation,
    CocoDocument, CocoImage, SourceAnnotation, Split,
};
use circlesnake::evaluation::{average_precision, evaluate, EvalConfig, EvalMode, GroundTruth, ImageRecord};
use circlesnake::geometry::{
    circle_iou, rasterize_contour, resample_polygon, sample_circle_contour, shoelace, Circle, Contour,
};
use circlesnake::heatmap::{decode_circles, encode_targets, extract_peaks, gaussian_sigma, GAUSSIAN_TRUNCATION};
use circlesnake::losses::{focal_loss, iter_loss, offset_loss, radius_loss, LossBreakdown, LossWeights};
use circlesnake::model::{CircleSnake, InstancePrediction, ModelConfig, PredictOptions};
use circlesnake::nn::Ctx;
use circlesnake::snake::gcn_forward;
use circlesnake::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn circle() -> impl Strategy<Value = Circle> {
    (0.0..200.0f64, 0.0..200.0f64, 0.5..60.0f64, 0..4usize).prop_map(|(x, y, r, c)| Circle::new(x, y, r, c))
}

fn cfg(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(cfg(256))]

    #[test]
    fn circle_iou_is_symmetric_and_bounded(a in circle(), b in circle()) {
        let (ab, ba) = (circle_iou(&a, &b), circle_iou(&b, &a));
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((circle_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn circle_iou_falls_with_distance(a in circle(), r2 in 0.5..60.0f64, d in 0.0..150.0f64, step in 0.01..20.0f64) {
        let at = |d: f64| circle_iou(&a, &Circle::new(a.cx + d, a.cy, r2, a.class_id));
        prop_assert!(at(d + step) <= at(d) + 1e-12);
    }

    #[test]
    fn resampling_a_sampled_circle_is_identity(c in circle(), n in 8..160usize) {
        let ring = sample_circle_contour(&c, n).unwrap();
        let again = resample_polygon(&ring.vertices, n, c.class_id).unwrap();
        for (p, q) in ring.vertices.iter().zip(&again.vertices) {
            prop_assert!((p[0] - q[0]).abs() < 1e-6 * c.r.max(1.0) && (p[1] - q[1]).abs() < 1e-6 * c.r.max(1.0));
        }
    }

    #[test]
    fn rasterized_circle_area_is_close(cx in 60.0..140.0f64, cy in 60.0..140.0f64, r in 8.0..55.0f64) {
        let c = Circle::new(cx, cy, r, 0);
        let m = rasterize_contour(&sample_circle_contour(&c, 128).unwrap(), 200, 200);
        let rel = (m.area() as f64 - c.area()).abs() / c.area();
        prop_assert!(rel < 0.05, "relative area error {rel}");
    }

    #[test]
    fn clipping_inside_the_rectangle_changes_nothing(c in circle()) {
        let ring = sample_circle_contour(&c, 32).unwrap();
        let rect = [c.cx - c.r - 1.0, c.cy - c.r - 1.0, c.cx + c.r + 1.0, c.cy + c.r + 1.0];
        let clipped = clip_polygon(&ring.vertices, rect);
        prop_assert!((shoelace(&clipped) - shoelace(&ring.vertices)).abs() < 1e-6 * c.r * c.r);
    }
}

fn scene() -> impl Strategy<Value = Vec<Circle>> {
    prop::collection::vec((2.0..126.0f64, 2.0..94.0f64, 1.0..30.0f64, 0..3usize), 0..8)
        .prop_map(|v| v.into_iter().map(|(x, y, r, c)| Circle::new(x, y, r, c)).collect())
}

proptest! {
    #![proptest_config(cfg(128))]

    #[test]
    fn heatmap_is_bounded_peaked_and_local(gts in scene()) {
        let t = encode_targets(&gts, 128, 96, 4, 3).unwrap();
        let (h, w) = t.grid();
        prop_assert_eq!((h, w), (24, 32));
        let d = t.heatmap.data();
        prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        for c in &gts {
            let (x, y) = ((c.cx / 4.0).floor() as usize, (c.cy / 4.0).floor() as usize);
            prop_assert_eq!(d[c.class_id * h * w + y * w + x], 1.0);
        }
        for k in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let reached = gts.iter().filter(|c| c.class_id == k).any(|c| {
                        let (dx, dy) = (x as f64 - (c.cx / 4.0).floor(), y as f64 - (c.cy / 4.0).floor());
                        dx.hypot(dy) <= GAUSSIAN_TRUNCATION * gaussian_sigma(c.r / 4.0) + 1e-9
                    });
                    if !reached {
                        prop_assert_eq!(d[k * h * w + y * w + x], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn peaks_are_capped_and_sorted(values in prop::collection::vec(0.0..1.0f64, 2 * 10 * 12), top_n in 1..40usize) {
        let hm = Tensor::new(vec![2, 10, 12], values).unwrap();
        let peaks = extract_peaks(&hm, top_n).unwrap();
        prop_assert!(peaks.len() <= top_n);
        prop_assert!(peaks.windows(2).all(|p| p[0].score >= p[1].score));
    }

    #[test]
    fn decoded_centers_stay_on_the_grid(
        hm in prop::collection::vec(0.0..1.0f64, 2 * 8 * 9),
        off in prop::collection::vec(0.0..0.999f64, 2 * 8 * 9),
        rad in prop::collection::vec(0.0..10.0f64, 8 * 9),
    ) {
        let out = decode_circles(
            &Tensor::new(vec![2, 8, 9], hm).unwrap(),
            &Tensor::new(vec![1, 8, 9], rad).unwrap(),
            &Tensor::new(vec![2, 8, 9], off).unwrap(),
            100,
            0.0,
            4,
        )
        .unwrap();
        for c in &out.circles {
            prop_assert!(c.cx >= 0.0 && c.cx < 36.0 && c.cy >= 0.0 && c.cy < 32.0 && c.r >= 0.0);
        }
    }
}

fn loss_case() -> impl Strategy<Value = (Vec<Circle>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec((1.0..31.0f64, 1.0..31.0f64, 1.0..8.0f64, 0..2usize), 0..4),
        prop::collection::vec(1e-4..0.9999f64, 128),
        prop::collection::vec(-5.0..5.0f64, 64),
        prop::collection::vec(-1.0..2.0f64, 128),
    )
        .prop_map(|(c, h, r, o)| (c.into_iter().map(|(x, y, r, k)| Circle::new(x, y, r, k)).collect(), h, r, o))
}

proptest! {
    #![proptest_config(cfg(128))]

    #[test]
    fn losses_are_nonnegative_and_recompose((gts, hm, rad, off) in loss_case(), lr in 0.01..2.0f64, lo in 0.01..2.0f64) {
        let t = encode_targets(&gts, 32, 32, 4, 2).unwrap();
        let mut g = Graph::<f64>::new();
        let p = g.constant(vec![1, 2, 8, 8], hm).unwrap();
        let f = focal_loss(&mut g, p, &[&t], 2.0, 4.0).unwrap();
        let p = g.constant(vec![1, 1, 8, 8], rad).unwrap();
        let r = radius_loss(&mut g, p, &[&t]).unwrap();
        let p = g.constant(vec![1, 2, 8, 8], off).unwrap();
        let o = offset_loss(&mut g, p, &[&t]).unwrap();
        let vals: Vec<f64> = [f, r, o].iter().map(|&v| g.value(v).item()).collect();
        prop_assert!(vals.iter().all(|v| *v >= 0.0 && v.is_finite()));
        let w = LossWeights { lambda_radius: lr, lambda_off: lo, ..LossWeights::default() };
        let b = LossBreakdown::compose(vals[0], vals[1], vals[2], 0.5, &w);
        prop_assert!((b.l_det - (b.l_focal + lr * b.l_radius + lo * b.l_offset)).abs() < 1e-12);
        prop_assert!((b.total() - b.l_det - b.l_iter).abs() < 1e-12);
    }

    #[test]
    fn focal_falls_as_the_center_prediction_rises(x in 2.0..30.0f64, y in 2.0..30.0f64, p in 0.01..0.98f64, dp in 0.001..0.01f64) {
        let t = encode_targets(&[Circle::new(x, y, 4.0, 0)], 32, 32, 4, 1).unwrap();
        let cell = t.centers[0].cell_y * 8 + t.centers[0].cell_x;
        let focal = |v: f64| {
            let mut hm = vec![0.1; 64];
            hm[cell] = v;
            let mut g = Graph::<f64>::new();
            let pv = g.constant(vec![1, 1, 8, 8], hm).unwrap();
            let l = focal_loss(&mut g, pv, &[&t], 2.0, 4.0).unwrap();
            g.value(l).item()
        };
        prop_assert!(focal(p + dp) < focal(p));
    }

    #[test]
    fn contour_loss_vanishes_only_at_the_target(c in circle(), shift in -3.0..3.0f64) {
        let gt = sample_circle_contour(&c, 16).unwrap();
        let moved = gt.translated(shift, 0.0);
        let mut g = Graph::<f64>::new();
        let rows = circlesnake::losses::contours_to_rows(&[&moved]);
        let v = g.constant(vec![1, 2, 16], rows).unwrap();
        let l = iter_loss(&mut g, v, &[&gt]).unwrap();
        prop_assert!((g.value(l).item() - shift.abs()).abs() < 1e-9);
    }
}

fn ring_conv_values(x: &[f64], w: &[f64], ci: usize, co: usize, n: usize, k: usize) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let xv = g.constant(vec![1, ci, n], x.to_vec()).unwrap();
    let wv = g.constant(vec![co, ci, k], w.to_vec()).unwrap();
    let out = g.ring_conv(xv, wv, None).unwrap();
    g.data(out).to_vec()
}

fn rotate_channels(x: &[f64], channels: usize, n: usize, s: usize) -> Vec<f64> {
    x.chunks(n).take(channels).flat_map(|c| common::rotate(c, s)).collect()
}

proptest! {
    #![proptest_config(cfg(128))]

    #[test]
    fn ring_conv_commutes_with_rotation(seed in any::<u64>(), n in 9..40usize, s in 0..40usize) {
        let mut r = common::rng(seed);
        let (ci, co, k) = (3, 2, 9);
        let x = common::uniform(&mut r, ci * n, -1.0, 1.0);
        let w = common::uniform(&mut r, co * ci * k, -1.0, 1.0);
        let s = s % n;
        let a = rotate_channels(&ring_conv_values(&x, &w, ci, co, n, k), co, n, s);
        let b = ring_conv_values(&rotate_channels(&x, ci, n, s), &w, ci, co, n, k);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(cfg(16))]

    #[test]
    fn contour_network_maps_vertices_to_offsets(seed in 0..1000u64, instances in 1..4usize, n in 10..40usize) {
        let (store, net) = common::small_snake(seed);
        let mut r = common::rng(seed);
        let mut g = Graph::<f64>::new();
        let x = g.constant(vec![instances, 5, n], common::uniform(&mut r, instances * 5 * n, -1.0, 1.0)).unwrap();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let out = gcn_forward(&mut ctx, &net, x).unwrap();
        prop_assert_eq!(g.shape(out), &[instances, 2, n]);
        prop_assert!(g.data(out).iter().all(|v| v.is_finite()));
    }
}

fn tiny_model() -> CircleSnake<f32> {
    let mut cfg = ModelConfig::default();
    cfg.backbone.widths = [4, 4, 4];
    cfg.backbone.head_conv = 4;
    cfg.vertices = 16;
    cfg.snake_width = 4;
    cfg.snake_fusion = 4;
    cfg.snake_head = [4, 4];
    CircleSnake::new(cfg).unwrap()
}

proptest! {
    #![proptest_config(cfg(12))]

    #[test]
    fn forward_pass_accepts_any_size(h in 1..70usize, w in 1..70usize) {
        let model = tiny_model();
        let image = Tensor::<f32>::full(vec![3, h, w], 0.3);
        let opts = PredictOptions { ct_score: 0.0, top_n: 5, deform: true };
        let (maps, preds) = model.predict(&image, &opts).unwrap();
        let (gh, gw) = (h.div_ceil(16) * 4, w.div_ceil(16) * 4);
        prop_assert_eq!(maps.heatmap.shape(), &[4, gh, gw]);
        prop_assert_eq!(maps.radius.shape(), &[1, gh, gw]);
        prop_assert_eq!(maps.offset.shape(), &[2, gh, gw]);
        prop_assert!(preds.len() <= 5);
        prop_assert!(preds.iter().all(|p| p.contour.len() == 16));
    }
}

proptest! {
    #![proptest_config(cfg(64))]

    #[test]
    fn tiles_cover_every_pixel(w in 1..1500usize, h in 1..1500usize, tile in 64..600usize, frac in 0.0..0.9f64) {
        let overlap = (tile as f64 * frac) as usize;
        let grid = tile_grid(w, h, tile, overlap).unwrap();
        let step = 7;
        for y in (0..h).step_by(step).chain([h - 1]) {
            for x in (0..w).step_by(step).chain([w - 1]) {
                prop_assert!(grid.tiles_containing(x, y).next().is_some(), "({x}, {y}) uncovered");
            }
        }
        for &(ox, oy) in &grid.origins {
            prop_assert!(ox + tile <= w.max(tile) && oy + tile <= h.max(tile));
        }
    }

    #[test]
    fn disjoint_tiles_conserve_area(
        nx in 1..4usize,
        ny in 1..4usize,
        shapes in prop::collection::vec((0.0..1.0f64, 0.0..1.0f64, 2.0..80.0f64, 3..12usize), 1..6),
    ) {
        let tile = 128;
        let (w, h) = (nx * tile, ny * tile);
        let anns: Vec<SourceAnnotation> = shapes
            .iter()
            .map(|&(fx, fy, r, n)| {
                let c = Circle::new(fx * w as f64, fy * h as f64, r, 0);
                let ring = sample_circle_contour(&c, n).unwrap();
                let inside = clip_polygon(&ring.vertices, [0.0, 0.0, w as f64, h as f64]);
                SourceAnnotation { class_id: 0, points: inside }
            })
            .filter(|a| a.points.len() >= 3 && shoelace(&a.points).abs() > 1e-6)
            .collect();
        let grid = tile_grid(w, h, tile, 0).unwrap();
        let patches = annotations_to_patches(&anns, &grid, 0.0);
        for (i, a) in anns.iter().enumerate() {
            let pieces: f64 = patches
                .iter()
                .flat_map(|p| p.annotations.iter())
                .filter(|pa| pa.source == i)
                .map(|pa| shoelace(&pa.points).abs())
                .sum();
            let full = shoelace(&a.points).abs();
            prop_assert!((pieces - full).abs() < 1e-6 * full.max(1.0), "{pieces} vs {full}");
        }
    }

    #[test]
    fn splits_are_exhaustive_and_disjoint(n in 3..200usize, seed in any::<u64>(), a in 0.1..10.0f64, b in 0.1..10.0f64, c in 0.1..10.0f64) {
        let ids: Vec<String> = (0..n).map(|i| format!("WSI_{i}")).collect();
        let cat = split_catalog(&ids, [a, b, c], seed).unwrap();
        prop_assert_eq!(cat.assignment.len(), n);
        prop_assert!(ids.iter().all(|i| cat.split_of(i).is_some()));
        let counts = cat.counts();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        prop_assert_eq!(counts.to_vec(), apportion(n, &[a, b, c]).unwrap());
        let members: usize = Split::ALL.iter().map(|&s| cat.members(s).len()).sum();
        prop_assert_eq!(members, n);
    }
}

fn coco_document() -> impl Strategy<Value = CocoDocument> {
    let polygon = prop::collection::vec((0.0..1000.0f64, 0.0..1000.0f64), 3..9);
    let ann = (0..4u64, prop::collection::vec(polygon, 1..3));
    prop::collection::vec((1..2000u32, 1..2000u32, prop::collection::vec(ann, 0..5)), 0..4).prop_map(|images| {
        let mut doc = CocoDocument::with_default_categories();
        let mut next = 1;
        for (k, (w, h, anns)) in images.into_iter().enumerate() {
            let image_id = k as u64 + 1;
            doc.images.push(CocoImage { id: image_id, file_name: format!("img_{k}.png"), width: w, height: h });
            for (cat, polys) in anns {
                let seg = polys.into_iter().map(|p| p.into_iter().flat_map(|(x, y)| [x, y]).collect()).collect();
                doc.annotations.push(CocoAnnotation::from_polygons(next, image_id, cat + 1, seg));
                next += 1;
            }
        }
        doc
    })
}

proptest! {
    #![proptest_config(cfg(50))]

    #[test]
    fn coco_documents_roundtrip(doc in coco_document()) {
        let back = read_coco(&write_coco(&doc)).unwrap();
        prop_assert_eq!(&back, &doc);
        prop_assert_eq!(write_coco(&back), write_coco(&doc));
    }
}

fn gt(c: Circle) -> GroundTruth {
    GroundTruth { circle: c, contour: sample_circle_contour(&c, 64).unwrap() }
}

fn pred(c: Circle, score: f64) -> InstancePrediction {
    let c = c.with_score(score);
    InstancePrediction { circle: c, contour: sample_circle_contour(&c, 64).unwrap(), score }
}

/// Ground truth with jittered, randomly scored predictions and some
/// spurious ones.
fn eval_case() -> impl Strategy<Value = (Vec<Circle>, Vec<(Circle, f64)>)> {
    prop::collection::vec((0.05..0.95f64, 0.05..0.95f64, 8.0..40.0f64, 0..2usize, -3.0..3.0f64, -3.0..3.0f64, 0.0..1.0f64, any::<bool>()), 1..10)
        .prop_map(|v| {
            let mut gts = Vec::new();
            let mut preds = Vec::new();
            for (k, (fx, fy, r, c, dx, dy, s, spurious)) in v.into_iter().enumerate() {
                let g = Circle::new(fx * 400.0, fy * 400.0, r, c);
                if spurious && k % 2 == 0 {
                    preds.push((Circle::new(g.cy, g.cx, r, c), s));
                } else {
                    gts.push(g);
                    preds.push((Circle::new(g.cx + dx, g.cy + dy, r * (1.0 + dx / 30.0), c), s));
                }
            }
            (gts, preds)
        })
}

fn record(gts: &[Circle], preds: &[(Circle, f64)], score: impl Fn(f64) -> f64) -> Vec<ImageRecord> {
    vec![ImageRecord {
        image_id: 1,
        width: 400,
        height: 400,
        gts: gts.iter().copied().map(gt).collect(),
        preds: preds.iter().map(|&(c, s)| pred(c, score(s))).collect(),
    }]
}

fn names() -> Vec<String> {
    vec!["a".into(), "b".into()]
}

proptest! {
    #![proptest_config(cfg(48))]

    #[test]
    fn ap_ignores_monotone_score_changes((gts, preds) in eval_case()) {
        let cfg = EvalConfig::new(EvalMode::Circle, names());
        let a = evaluate(&record(&gts, &preds, |s| s), &cfg).unwrap();
        let b = evaluate(&record(&gts, &preds, |s| 0.1 + 0.5 * s.powi(3)), &cfg).unwrap();
        prop_assert_eq!(a.ap, b.ap);
        prop_assert_eq!(a.ap50, b.ap50);
        prop_assert_eq!(a.per_class, b.per_class);
    }

    #[test]
    fn looser_thresholds_score_higher((gts, preds) in eval_case()) {
        for mode in [EvalMode::Circle, EvalMode::Segm] {
            let r = evaluate(&record(&gts, &preds, |s| s), &EvalConfig::new(mode, names())).unwrap();
            if let (Some(a50), Some(a75)) = (r.ap50, r.ap75) {
                prop_assert!(a50 + 1e-12 >= a75);
            }
        }
    }

    #[test]
    fn circle_and_mask_scores_agree_on_round_objects((gts, preds) in eval_case()) {
        let recs = record(&gts, &preds, |s| s);
        let c = evaluate(&recs, &EvalConfig::new(EvalMode::Circle, names())).unwrap();
        let s = evaluate(&recs, &EvalConfig::new(EvalMode::Segm, names())).unwrap();
        if let (Some(a), Some(b)) = (c.ap50, s.ap50) {
            prop_assert!((a - b).abs() <= 0.02 + 1e-12, "circle {a} vs segm {b}");
        }
    }

    #[test]
    fn precision_recall_area_is_a_fraction(dets in prop::collection::vec((0.0..1.0f64, any::<bool>()), 0..30), extra in 0..5usize) {
        let tp = dets.iter().filter(|d| d.1).count();
        let ap = average_precision(&dets, tp + extra);
        match ap {
            None => prop_assert_eq!(tp + extra, 0),
            Some(v) => prop_assert!((0.0..=1.0).contains(&v)),
        }
    }
}

#[test]
fn contours_are_screen_clockwise() {
    let c = sample_circle_contour(&Circle::new(10.0, 10.0, 5.0, 0), 32).unwrap();
    assert!(shoelace(&c.vertices) > 0.0);
    let r: Contour = resample_polygon(&[[0.0, 0.0], [0.0, 4.0], [4.0, 4.0], [4.0, 0.0]], 16, 0).unwrap();
    assert!(shoelace(&r.vertices) > 0.0);
}
