//! Helpers shared by the integration tests: finite-difference checks of every
//! differentiable operation and random scene generators.
#![allow(dead_code)]

use circlesnake::geometry::{sample_circle_contour, Circle, Contour};
use circlesnake::heatmap::{encode_targets, DetectionTargets};
use circlesnake::losses::{focal_loss, iter_loss, offset_loss, radius_loss};
use circlesnake::nn::Ctx;
use circlesnake::snake::{gcn_forward, SnakeConfig, SnakeNetwork};
use circlesnake::tensor::{grad_check, Graph, ParamStore, SampleGroup, Tensor, Var};
use circlesnake::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

/// `Σ out ∘ weights`: turns any output into a scalar with a dense gradient.
fn project(g: &mut Graph<f64>, out: Var, weights: &[f64]) -> Result<Var> {
    let w = g.constant(g.shape(out).to_vec(), weights.to_vec())?;
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

/// Moves values within `margin` of a kink away from it.
fn away_from(values: &mut [f64], kinks: &[f64], margin: f64) {
    for (v, k) in values.iter_mut().zip(kinks) {
        if (*v - k).abs() < margin {
            *v = k + if *v >= *k { margin } else { -margin };
        }
    }
}

/// Two circles of different classes on a 32×32 input.
fn small_targets(rng: &mut ChaCha8Rng) -> DetectionTargets {
    let a = Circle::new(rng.gen_range(5.0..12.0), rng.gen_range(5.0..27.0), rng.gen_range(3.0..6.0), 0);
    let b = Circle::new(rng.gen_range(20.0..27.0), rng.gen_range(5.0..27.0), rng.gen_range(3.0..6.0), 1);
    encode_targets(&[a, b], 32, 32, 4, 2).unwrap()
}

pub fn check_focal(seed: u64) -> f64 {
    let mut r = rng(seed);
    let t = small_targets(&mut r);
    let pred = tensor(vec![1, 2, 8, 8], uniform(&mut r, 128, 0.05, 0.95));
    grad_check(|g, x| focal_loss(g, x, &[&t], 2.0, 4.0), &pred, FD_STEP).unwrap().max_rel_error
}

fn center_values(t: &DetectionTargets, channels: usize) -> Vec<f64> {
    let (h, w) = t.grid();
    let mut kinks = vec![f64::NAN; channels * h * w];
    for c in &t.centers {
        let cell = c.cell_y * w + c.cell_x;
        if channels == 1 {
            kinks[cell] = c.radius;
        } else {
            kinks[cell] = c.offset[0];
            kinks[h * w + cell] = c.offset[1];
        }
    }
    kinks
}

pub fn check_radius(seed: u64) -> f64 {
    let mut r = rng(seed);
    let t = small_targets(&mut r);
    let mut v = uniform(&mut r, 64, 0.0, 3.0);
    away_from(&mut v, &center_values(&t, 1), 1e-3);
    grad_check(|g, x| radius_loss(g, x, &[&t]), &tensor(vec![1, 1, 8, 8], v), FD_STEP).unwrap().max_rel_error
}

pub fn check_offset(seed: u64) -> f64 {
    let mut r = rng(seed);
    let t = small_targets(&mut r);
    let mut v = uniform(&mut r, 128, 0.0, 1.0);
    away_from(&mut v, &center_values(&t, 2), 1e-3);
    grad_check(|g, x| offset_loss(g, x, &[&t]), &tensor(vec![1, 2, 8, 8], v), FD_STEP).unwrap().max_rel_error
}

pub fn check_iter(seed: u64) -> f64 {
    let mut r = rng(seed);
    let n = 16;
    let gts: Vec<Contour> = (0..2)
        .map(|c| {
            let circle = Circle::new(r.gen_range(10.0..30.0), r.gen_range(10.0..30.0), r.gen_range(4.0..9.0), c);
            sample_circle_contour(&circle, n).unwrap()
        })
        .collect();
    let refs: Vec<&Contour> = gts.iter().collect();
    let rows = circlesnake::losses::contours_to_rows(&refs);
    let mut v: Vec<f64> = rows.iter().map(|&x| x + r.gen_range(-2.0..2.0)).collect();
    away_from(&mut v, &rows, 1e-3);
    grad_check(|g, x| iter_loss(g, x, &refs), &tensor(vec![2, 2, n], v), FD_STEP).unwrap().max_rel_error
}

/// Checks the input and kernel gradients of a circular convolution with bias.
pub fn check_ring_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, ci, co, n, k) = (2, 3, 4, r.gen_range(9..14), [3, 5, 9][seed as usize % 3]);
    let x = tensor(vec![b, ci, n], uniform(&mut r, b * ci * n, -1.0, 1.0));
    let w = tensor(vec![co, ci, k], uniform(&mut r, co * ci * k, -1.0, 1.0));
    let bias = uniform(&mut r, co, -1.0, 1.0);
    let proj = uniform(&mut r, b * co * n, -1.0, 1.0);
    let wrt_x = grad_check(
        |g, xv| {
            let wv = g.constant(w.shape().to_vec(), w.data().to_vec())?;
            let bv = g.constant(vec![co], bias.clone())?;
            let out = g.ring_conv(xv, wv, Some(bv))?;
            project(g, out, &proj)
        },
        &x,
        FD_STEP,
    )
    .unwrap()
    .max_rel_error;
    let wrt_w = grad_check(
        |g, wv| {
            let xv = g.constant(x.shape().to_vec(), x.data().to_vec())?;
            let out = g.ring_conv(xv, wv, None)?;
            project(g, out, &proj)
        },
        &w,
        FD_STEP,
    )
    .unwrap()
    .max_rel_error;
    wrt_x.max(wrt_w)
}

/// A small contour network whose zero-initialized last layer is randomized,
/// so the output depends on the input.
pub fn small_snake(seed: u64) -> (ParamStore<f64>, SnakeNetwork) {
    let mut store = ParamStore::new();
    let cfg = SnakeConfig { feature_channels: 3, width: 6, fusion_width: 5, head_widths: [6, 4], iterations: 1 };
    let net = SnakeNetwork::build(&mut store, &mut rng(seed), cfg).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for name in ["snake.head2.weight", "snake.head2.bias"] {
        let id = store.find(name).unwrap();
        store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    }
    (store, net)
}

/// Gradient of the contour network output with respect to its vertex
/// features, through batch-normalized training-mode blocks.
pub fn check_gcn(seed: u64) -> f64 {
    let (store, net) = small_snake(seed);
    let mut r = rng(seed);
    let (i, n) = (2, 12);
    let vf = tensor(vec![i, 5, n], uniform(&mut r, i * 5 * n, -1.0, 1.0));
    let proj = uniform(&mut r, i * 2 * n, -1.0, 1.0);
    grad_check(
        |g, x| {
            let mut ctx = Ctx::new(g, &store, true);
            let out = gcn_forward(&mut ctx, &net, x)?;
            project(g, out, &proj)
        },
        &vf,
        FD_STEP,
    )
    .unwrap()
    .max_rel_error
}

pub fn check_bilinear(seed: u64) -> f64 {
    let mut r = rng(seed);
    let fm = tensor(vec![2, 2, 6, 6], uniform(&mut r, 144, -1.0, 1.0));
    let groups: Vec<SampleGroup> = (0..3)
        .map(|gi| SampleGroup {
            batch: gi % 2,
            points: (0..7).map(|_| [r.gen_range(-1.0..6.5), r.gen_range(-1.0..6.5)]).collect(),
        })
        .collect();
    let proj = uniform(&mut r, 3 * 2 * 7, -1.0, 1.0);
    grad_check(
        |g, x| {
            let out = g.bilinear_sample(x, &groups)?;
            project(g, out, &proj)
        },
        &fm,
        FD_STEP,
    )
    .unwrap()
    .max_rel_error
}

pub type GradCheck = fn(u64) -> f64;

pub const GRADIENT_SUITE: [(&str, GradCheck); 7] = [
    ("focal_loss", check_focal),
    ("radius_loss", check_radius),
    ("offset_loss", check_offset),
    ("iter_loss", check_iter),
    ("circular_conv", check_ring_conv),
    ("gcn_forward", check_gcn),
    ("bilinear_sample", check_bilinear),
];

/// Worst relative error of each check over `seeds`.
pub fn run_gradient_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    GRADIENT_SUITE.iter().map(|(name, f)| (*name, seeds.clone().map(f).fold(0.0, f64::max))).collect()
}

/// Circles of random classes whose centers are more than `min_gap` apart,
/// kept `margin` pixels inside a `size × size` canvas.
pub fn separated_circles(rng: &mut ChaCha8Rng, count: usize, size: f64, min_gap: f64, classes: usize) -> Vec<Circle> {
    let mut out: Vec<Circle> = Vec::new();
    let margin = 24.0;
    while out.len() < count {
        let c = Circle::new(
            rng.gen_range(margin..size - margin),
            rng.gen_range(margin..size - margin),
            rng.gen_range(4.0..20.0),
            rng.gen_range(0..classes),
        );
        if out.iter().all(|o| (o.cx - c.cx).hypot(o.cy - c.cy) > min_gap) {
            out.push(c);
        }
    }
    out
}

/// Mask IoU of two circles rasterized by pixel centers on a `size × size`
/// grid spanning the pair's joint bounding box.
pub fn raster_circle_iou(a: &Circle, b: &Circle, size: usize) -> f64 {
    let (x0, y0) = ((a.cx - a.r).min(b.cx - b.r), (a.cy - a.r).min(b.cy - b.r));
    let x1 = (a.cx + a.r).max(b.cx + b.r);
    let y1 = (a.cy + a.r).max(b.cy + b.r);
    let cell = (x1 - x0).max(y1 - y0) / size as f64;
    let inside = |c: &Circle, x: f64, y: f64| (x - c.cx).powi(2) + (y - c.cy).powi(2) <= c.r * c.r;
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..size {
        let y = y0 + (j as f64 + 0.5) * cell;
        for i in 0..size {
            let x = x0 + (i as f64 + 0.5) * cell;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union.max(1) as f64
}

/// Brute-force circular convolution of one channel.
pub fn naive_ring_conv(f: &[f64], k: &[f64]) -> Vec<f64> {
    let n = f.len() as i64;
    let r = (k.len() / 2) as i64;
    (0..n).map(|i| (-r..=r).map(|j| f[((i + j).rem_euclid(n)) as usize] * k[(j + r) as usize]).sum()).collect()
}

pub fn rotate(v: &[f64], s: usize) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| v[(i + s) % n]).collect()
}
