//! The acceptance criteria, one PASS/FAIL line each.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::time::{Duration, Instant};

use circlesnake::data::{read_coco, split_catalog, tile_grid, write_coco, CocoAnnotation, CocoDocument, CocoImage, SynthConfig};
use circlesnake::evaluation::{average_precision, evaluate, EvalConfig, EvalMode, EvalReport, GroundTruth, ImageRecord};
use circlesnake::geometry::{circle_iou, sample_circle_contour, Circle};
use circlesnake::heatmap::{decode_circles, encode_targets, gaussian_sigma, roundtrip_check};
use circlesnake::losses::{detection_loss, focal_loss, LossWeights};
use circlesnake::model::InstancePrediction;
use circlesnake::nn::Ctx;
use circlesnake::snake::gcn_forward;
use circlesnake::tensor::{Graph, Tensor};
use circlesnake_cli::commands::{cmd_synth, cmd_train, evaluate_model, load_registered};
use circlesnake_cli::RunConfig;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let errors = common::run_gradient_suite(0..20);
    let elapsed = start.elapsed();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(
        worst < common::GRAD_TOLERANCE && elapsed < Duration::from_secs(120),
        format!("20 seeds in {:.1}s: {detail}", elapsed.as_secs_f64()),
    )
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-6
}

fn single_cell_focal(target: f64) -> f64 {
    let c = Circle::new(0.5, 0.5, 0.5, 0);
    let mut t = encode_targets(&[c], 1, 1, 1, 1).unwrap();
    t.heatmap.data_mut()[0] = target;
    t.center_mask[0] = target == 1.0;
    let mut g = Graph::<f64>::new();
    let p = g.constant(vec![1, 1, 1, 1], vec![0.5]).unwrap();
    let l = focal_loss(&mut g, p, &[&t], 2.0, 4.0).unwrap();
    g.value(l).item()
}

fn unit_values() -> Outcome {
    let expected_focal = -(0.5f64.powi(2)) * 0.5f64.ln();
    let (pos, neg) = (single_cell_focal(1.0), single_cell_focal(0.0));

    let mut g = Graph::<f64>::new();
    let (f, r, o) = (g.constant(vec![1], vec![1.0]).unwrap(), g.constant(vec![1], vec![2.0]).unwrap(), g.constant(vec![1], vec![0.5]).unwrap());
    let det = detection_loss(&mut g, f, r, o, &LossWeights::default()).unwrap();
    let det = g.value(det).item();

    let x = g.constant(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let w = g.constant(vec![1, 1, 3], vec![1.0; 3]).unwrap();
    let ring = g.ring_conv(x, w, None).unwrap();
    let ring = g.data(ring).to_vec();

    // a radius of 4 px at stride 4 gives a unit spread, so one cell is one σ
    let t = encode_targets(&[Circle::new(41.0, 22.0, 4.0, 0)], 80, 48, 4, 1).unwrap();
    assert_eq!(gaussian_sigma(1.0), 1.0);
    let (h, w) = t.grid();
    let hm = t.heatmap.data();
    let center = hm[5 * w + 10];
    let sigma_off = hm[5 * w + 11];
    let offset_ok = close(t.centers[0].offset[0], 0.25) && close(t.centers[0].offset[1], 0.5) && h == 12;

    let mut heat = Tensor::<f64>::zeros(vec![1, 20, 20]);
    heat.data_mut()[12 * 20 + 10] = 0.9;
    let mut radius = Tensor::<f64>::zeros(vec![1, 20, 20]);
    radius.data_mut()[12 * 20 + 10] = 5.0;
    let mut offset = Tensor::<f64>::zeros(vec![2, 20, 20]);
    offset.data_mut()[12 * 20 + 10] = 0.3;
    offset.data_mut()[400 + 12 * 20 + 10] = 0.4;
    let decoded = decode_circles(&heat, &radius, &offset, 100, 0.2, 1).unwrap().circles;
    let decode_ok = decoded.len() == 1
        && close(decoded[0].cx, 10.3)
        && close(decoded[0].cy, 12.4)
        && close(decoded[0].r, 5.0)
        && close(decoded[0].score, 0.9)
        && decode_circles(&heat, &radius, &offset, 100, 0.95, 1).unwrap().circles.is_empty();

    let ok = close(pos, expected_focal)
        && close(neg, expected_focal)
        && (expected_focal - 0.1733).abs() < 5e-5
        && close(det, 1.7)
        && ring.iter().zip([7.0, 6.0, 9.0, 8.0]).all(|(a, b)| close(*a, b))
        && close(center, 1.0)
        && close(sigma_off, (-0.5f64).exp())
        && offset_ok
        && decode_ok;
    check(
        ok,
        format!(
            "focal {pos:.6}/{neg:.6}, detection {det:.6}, ring {ring:?}, center {center}, one sigma {sigma_off:.6}, decode {decode_ok}"
        ),
    )
}

fn geometry_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = common::rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (r1, r2) = (r.gen_range(4.0..64.0), r.gen_range(4.0..64.0));
        let d = r.gen_range(0.0..(r1 + r2) * 1.1);
        let theta = r.gen_range(0.0..std::f64::consts::TAU);
        let a = Circle::new(512.0, 512.0, r1, 0);
        let b = Circle::new(512.0 + d * theta.cos(), 512.0 + d * theta.sin(), r2, 0);
        worst = worst.max((circle_iou(&a, &b) - common::raster_circle_iou(&a, &b, 1024)).abs());
    }
    let unit = circle_iou(&Circle::new(0.0, 0.0, 1.0, 0), &Circle::new(1.0, 0.0, 1.0, 0));
    let lens = 2.0 * std::f64::consts::PI / 3.0 - 3f64.sqrt() / 2.0;
    let closed = lens / (2.0 * std::f64::consts::PI - lens);
    let elapsed = start.elapsed();
    check(
        worst < 1e-2 && (unit - 0.2430).abs() < 1e-4 && (unit - closed).abs() < 1e-12 && elapsed < Duration::from_secs(60),
        format!("max |analytic - raster| {worst:.2e} over 100 pairs, unit lens {unit:.6}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn codec_roundtrip() -> Outcome {
    let mut failures = Vec::new();
    for scene in 0..50u64 {
        let mut r = common::rng(scene);
        let count = r.gen_range(1..16);
        let gts = common::separated_circles(&mut r, count, 512.0, 12.0, 4);
        match roundtrip_check(&gts, 512, 512, 4, 4, 100, 0.3) {
            Ok(rep) if rep.all_recovered() && rep.spurious.is_empty() => {}
            Ok(rep) => failures.push(format!("scene {scene}: {} spurious, recovered {:?}", rep.spurious.len(), rep.all_recovered())),
            Err(e) => failures.push(format!("scene {scene}: {e}")),
        }
    }
    check(failures.is_empty(), if failures.is_empty() { "50 scenes recovered".into() } else { failures.join("; ") })
}

fn rotate_rows(x: &[f64], n: usize, s: usize) -> Vec<f64> {
    x.chunks(n).flat_map(|row| common::rotate(row, s)).collect()
}

fn equivariance() -> Outcome {
    let mut r = common::rng(77);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (ci, co, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(9..64));
        let k = 2 * r.gen_range(0..5) + 1;
        let s = r.gen_range(0..n);
        let x = common::uniform(&mut r, ci * n, -1.0, 1.0);
        let w = common::uniform(&mut r, co * ci * k, -1.0, 1.0);
        let conv = |x: &[f64]| {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(vec![1, ci, n], x.to_vec()).unwrap();
            let wv = g.constant(vec![co, ci, k], w.clone()).unwrap();
            let out = g.ring_conv(xv, wv, None).unwrap();
            g.data(out).to_vec()
        };
        let a = rotate_rows(&conv(&x), n, s);
        let b = conv(&rotate_rows(&x, n, s));
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    // the whole contour network inherits the property
    for trial in 0..20u64 {
        let (store, net) = common::small_snake(trial);
        let n = 16 + trial as usize;
        let x = common::uniform(&mut r, 5 * n, -1.0, 1.0);
        let s = r.gen_range(0..n);
        let run = |x: &[f64]| {
            let mut g = Graph::<f64>::new();
            let xv = g.constant(vec![1, 5, n], x.to_vec()).unwrap();
            let mut ctx = Ctx::new(&mut g, &store, false);
            let out = gcn_forward(&mut ctx, &net, xv).unwrap();
            g.data(out).to_vec()
        };
        let a = rotate_rows(&run(&x), n, s);
        let b = run(&rotate_rows(&x, n, s));
        worst = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    check(worst < 1e-6, format!("100 convolution and 20 network trials, max deviation {worst:.1e}"))
}

fn run_config(dir: &std::path::Path, seed: u64, scenes: usize, synth: &SynthConfig) -> RunConfig {
    RunConfig::load(&cmd_synth(dir, seed, scenes, synth).unwrap()).unwrap()
}

fn end_to_end(reports: &mut Vec<EvalReport>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = run_config(dir.path(), 7, 20, &SynthConfig::default());
    cfg.model.epochs = 20;
    cfg.model.milestones = vec![15];
    cfg.model.adam.lr = 1e-3;
    cfg.model.seed = 1;
    cfg.save_ep = 20;
    cfg.eval_ep = 20;
    cfg.test_ct_score = 0.2;
    cfg.segm_or_bbox = EvalMode::Segm;
    let start = Instant::now();
    let outcome = cmd_train(&cfg).map_err(|e| e.to_string())?;
    let trained = start.elapsed();
    let deformed = outcome.reports.last().map(|(_, r)| r.clone()).ok_or("no evaluation ran")?;

    let (names, images) = load_registered(&cfg, &cfg.train_dataset).map_err(|e| e.to_string())?;
    let (model, _, _) = circlesnake::model::CircleSnake::<f32>::load(&cfg.model_dir.join("19.ckpt")).map_err(|e| e.to_string())?;
    let trained_on = evaluate_model(&model, &images, &names, 0.2, EvalMode::Segm, true).map_err(|e| e.to_string())?;
    let raw = evaluate_model(&model, &images, &names, 0.2, EvalMode::Segm, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();

    let ap50 = trained_on.ap50.unwrap_or(0.0);
    let dice = trained_on.dice.unwrap_or(0.0);
    let raw_dice = raw.dice.unwrap_or(0.0);
    let ok = ap50 >= 0.90 && dice >= 0.85 && dice - raw_dice >= 0.03 && elapsed < Duration::from_secs(30 * 60);
    let detail = format!(
        "AP50 {ap50:.4}, Dice {dice:.4}, Dice without deformation {raw_dice:.4} (gain {:.4}), trained in {:.0}s, total {:.0}s",
        dice - raw_dice,
        trained.as_secs_f64(),
        elapsed.as_secs_f64()
    );
    reports.extend([deformed, trained_on, raw]);
    check(ok, detail)
}

const REFERENCE_DOCUMENT: &str = r#"{
  "info": {
    "description": "Example COCO file",
    "version": "1.0",
    "year": 2023,
    "contributor": "Your Name",
    "date_created": "2023-06-14"
  },
  "images": [
    {"id": 1, "file_name": "image1.jpg", "width": 512, "height": 512},
    {"id": 2, "file_name": "image2.jpg", "width": 512, "height": 512}
  ],
  "annotations": [
    {"id": 1, "image_id": 1, "category_id": 1,
     "segmentation": [[10, 10, 20, 10, 20, 20, 10, 20]], "area": 100, "bbox": [10, 10, 10, 10]},
    {"id": 2, "image_id": 2, "category_id": 2,
     "segmentation": [[30, 40, 50, 40, 50, 50, 30, 50]], "area": 200, "bbox": [30, 40, 20, 10]}
  ],
  "categories": [
    {"id": 1, "name": "Class 1", "supercategory": "Class"},
    {"id": 2, "name": "Class 2", "supercategory": "Class"}
  ]
}"#;

fn fuzzed_document(seed: u64) -> CocoDocument {
    let mut r = common::rng(seed);
    let mut doc = CocoDocument::with_default_categories();
    let mut next = 1;
    for image in 0..r.gen_range(0..5u64) {
        let id = 10 * seed + image + 1;
        doc.images.push(CocoImage { id, file_name: format!("WSI_{seed}_x{image}_y0.png"), width: r.gen_range(1..4096), height: r.gen_range(1..4096) });
        for _ in 0..r.gen_range(0..6) {
            let polygons = (0..r.gen_range(1..3))
                .map(|_| (0..2 * r.gen_range(3..10)).map(|_| r.gen_range(0.0..4096.0)).collect())
                .collect();
            doc.annotations.push(CocoAnnotation::from_polygons(next, id, r.gen_range(1..5), polygons));
            next += 1;
        }
    }
    doc
}

fn data_pipeline() -> Outcome {
    let grid = tile_grid(1024, 1024, 512, 256).unwrap();
    let covered = (0..1024).all(|y| (0..1024).all(|x| grid.tiles_containing(x, y).next().is_some()));
    let tiles_ok = grid.len() == 9 && covered;

    let example = read_coco(REFERENCE_DOCUMENT).map_err(|e| e.to_string())?;
    let again = read_coco(&write_coco(&example)).map_err(|e| e.to_string())?;
    let example_ok = example == again
        && (example.images.len(), example.annotations.len(), example.categories.len()) == (2, 2, 2);
    let fuzz_ok = (0..50).all(|s| {
        let d = fuzzed_document(s);
        read_coco(&write_coco(&d)).map(|b| b == d).unwrap_or(false)
    });

    let ids: Vec<String> = (1..=50).map(|i| format!("WSI_{i}")).collect();
    let split_ok = (0..5).all(|seed| {
        let a = split_catalog(&ids, [7.0, 1.0, 2.0], seed).unwrap();
        let b = split_catalog(&ids, [7.0, 1.0, 2.0], seed).unwrap();
        a.counts() == [35, 5, 10] && a == b
    });
    check(
        tiles_ok && example_ok && fuzz_ok && split_ok,
        format!("9 covering tiles {tiles_ok}, example roundtrip {example_ok}, 50 fuzzed {fuzz_ok}, 35/5/10 split {split_ok}"),
    )
}

fn replay_scene() -> Vec<ImageRecord> {
    let mut r = common::rng(5);
    (0..3)
        .map(|i| {
            let circles = common::separated_circles(&mut r, 8, 512.0, 60.0, 4);
            ImageRecord {
                image_id: i,
                width: 512,
                height: 512,
                gts: circles.iter().map(|&c| GroundTruth { circle: c, contour: sample_circle_contour(&c, 128).unwrap() }).collect(),
                preds: circles
                    .iter()
                    .map(|&c| {
                        let c = c.with_score(0.5 + 0.01 * c.r);
                        InstancePrediction { circle: c, contour: sample_circle_contour(&c, 128).unwrap(), score: c.score }
                    })
                    .collect(),
            }
        })
        .collect()
}

fn evaluation_oracle(reports: &mut Vec<EvalReport>) -> Outcome {
    let names: Vec<String> = circlesnake::data::DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let mut replay_ok = true;
    let mut empty_ok = true;
    for mode in [EvalMode::Circle, EvalMode::Segm] {
        let cfg = EvalConfig::new(mode, names.clone());
        let full = evaluate(&replay_scene(), &cfg).map_err(|e| e.to_string())?;
        let all = [full.ap, full.ap50, full.ap75, full.ap_s, full.ap_m].into_iter().chain(full.per_class.iter().copied());
        replay_ok &= all.flatten().all(|v| close(v, 1.0)) && full.ap.is_some() && close(full.dice.unwrap_or(0.0), 1.0);

        let mut empty = replay_scene();
        empty.iter_mut().for_each(|im| im.preds.clear());
        let none = evaluate(&empty, &cfg).map_err(|e| e.to_string())?;
        empty_ok &= [none.ap, none.ap50, none.ap75].iter().all(|v| *v == Some(0.0));
        reports.extend([full, none]);
    }
    let hand = average_precision(&[(0.9, true), (0.8, false)], 1);
    let hand_ok = hand.is_some_and(|v| close(v, 1.0));
    let ordered = reports.iter().all(|r| match (r.ap50, r.ap75) {
        (Some(a), Some(b)) => a + 1e-12 >= b,
        _ => true,
    });
    check(
        replay_ok && empty_ok && hand_ok && ordered,
        format!("replay 1.0 {replay_ok}, empty 0.0 {empty_ok}, hand case {hand:?}, AP50 >= AP75 over {} runs {ordered}", reports.len()),
    )
}

fn determinism() -> Outcome {
    let synth = SynthConfig { size: 128, instances: 4, ..SynthConfig::default() };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = run_config(dir.path(), 21, 2, &synth);
        cfg.model.epochs = 3;
        cfg.model.backbone.widths = [8, 8, 8];
        cfg.model.backbone.head_conv = 8;
        cfg.model.vertices = 32;
        cfg.model.snake_width = 8;
        cfg.model.snake_fusion = 8;
        cfg.model.snake_head = [8, 8];
        cfg.save_ep = 3;
        cfg.eval_ep = 3;
        let out = cmd_train(&cfg).unwrap();
        std::fs::read(out.log_path).unwrap()
    };
    let (a, b) = (run(), run());
    check(a == b && !a.is_empty(), format!("{} log bytes, identical {}", a.len(), a == b))
}

/// Runs without the libtest harness so the report prints even on success.
fn main() {
    let mut reports = Vec::new();
    let results: Vec<(&str, Outcome)> = vec![
        ("gradient suite", gradient_suite()),
        ("unit values", unit_values()),
        ("geometry oracle", geometry_oracle()),
        ("codec roundtrip", codec_roundtrip()),
        ("circular convolution equivariance", equivariance()),
        ("end-to-end synthetic overfit", end_to_end(&mut reports)),
        ("data pipeline", data_pipeline()),
        ("evaluation oracle", evaluation_oracle(&mut reports)),
        ("determinism", determinism()),
    ];
    let mut failed = Vec::new();
    for (i, (name, outcome)) in results.iter().enumerate() {
        match outcome {
            Ok(d) => println!("criterion {}: PASS {name}: {d}", i + 1),
            Err(d) => {
                println!("criterion {}: FAIL {name}: {d}", i + 1);
                failed.push(i + 1);
            }
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
