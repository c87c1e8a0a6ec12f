//! Seeded synthetic scenes: four classes of colored quasi-circular cells on
//! a textured background, with exact ground truth.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::{flatten_points, CocoAnnotation, CocoImage};
use crate::error::{Error, Result};
use crate::geometry::{resample_polygon, shoelace, Circle, Contour, DEFAULT_VERTICES};

/// Boundary points used for the generating shape; dense enough that its
/// polygon area matches the analytic shape to well under a percent.
const BOUNDARY_POINTS: usize = 720;
const MARGIN: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub instances: usize,
    /// Relative frequency of each of the four classes.
    pub class_mix: [f64; 4],
    pub vertices: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { size: 512, instances: 10, class_mix: [0.35, 0.3, 0.2, 0.15], vertices: DEFAULT_VERTICES }
    }
}

/// Shape family of one class: `r(θ) = r0·(1 + Σ_k a_k cos(kθ + φ_k))`.
struct ClassStyle {
    radius: (f64, f64),
    /// Amplitude range per harmonic 2, 3, 4.
    harmonics: [(f64, f64); 3],
    color: [u8; 3],
    /// Probability of being placed next to an earlier instance of the class.
    cluster: f64,
}

const STYLES: [ClassStyle; 4] = [
    ClassStyle { radius: (10.0, 15.0), harmonics: [(0.04, 0.12), (0.0, 0.04), (0.0, 0.03)], color: [214, 58, 96], cluster: 0.0 },
    ClassStyle { radius: (10.0, 15.0), harmonics: [(0.0, 0.08), (0.0, 0.05), (0.0, 0.03)], color: [120, 62, 168], cluster: 0.7 },
    ClassStyle { radius: (7.0, 10.0), harmonics: [(0.2, 0.3), (0.0, 0.02), (0.0, 0.02)], color: [238, 146, 42], cluster: 0.0 },
    ClassStyle { radius: (20.0, 30.0), harmonics: [(0.0, 0.08), (0.06, 0.12), (0.04, 0.1)], color: [150, 18, 36], cluster: 0.0 },
];

#[derive(Clone, Debug)]
struct Shape {
    center: [f64; 2],
    r0: f64,
    terms: [(f64, f64); 3],
    rotation: f64,
}

impl Shape {
    fn radius_at(&self, theta: f64) -> f64 {
        let t = theta - self.rotation;
        let wobble: f64 = self.terms.iter().enumerate().map(|(i, (a, ph))| a * ((i + 2) as f64 * t + ph).cos()).sum();
        self.r0 * (1.0 + wobble)
    }

    fn max_radius(&self) -> f64 {
        self.r0 * (1.0 + self.terms.iter().map(|t| t.0.abs()).sum::<f64>())
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let d = (dx * dx + dy * dy).sqrt();
        d <= self.max_radius() && d < self.radius_at(dy.atan2(dx))
    }

    /// Boundary polygon, clockwise on screen.
    fn boundary(&self, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|i| {
                let th = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
                let r = self.radius_at(th);
                [self.center[0] + r * th.cos(), self.center[1] + r * th.sin()]
            })
            .collect()
    }

    /// `½∫r(θ)²dθ`.
    fn area(&self) -> f64 {
        let a2: f64 = self.terms.iter().map(|t| t.0 * t.0).sum();
        PI * self.r0 * self.r0 * (1.0 + a2 / 2.0)
    }
}

#[derive(Clone, Debug)]
pub struct SynthInstance {
    pub class_id: usize,
    /// Dense generating boundary.
    pub boundary: Vec<[f64; 2]>,
    /// Analytic area of the generating shape.
    pub shape_area: f64,
    /// Area centroid with the equal-area radius.
    pub circle: Circle,
    pub contour: Contour,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub image: RgbImage,
    pub instances: Vec<SynthInstance>,
}

impl SynthScene {
    pub fn circles(&self) -> Vec<Circle> {
        self.instances.iter().map(|i| i.circle).collect()
    }

    pub fn contours(&self) -> Vec<Contour> {
        self.instances.iter().map(|i| i.contour.clone()).collect()
    }

    /// COCO image record and annotations (ids from `first_annotation_id`),
    /// with category id `class_id + 1`.
    pub fn to_coco(&self, image_id: u64, file_name: &str, first_annotation_id: u64) -> (CocoImage, Vec<CocoAnnotation>) {
        let image = CocoImage {
            id: image_id,
            file_name: file_name.to_string(),
            width: self.image.width(),
            height: self.image.height(),
        };
        let anns = self
            .instances
            .iter()
            .enumerate()
            .map(|(k, inst)| {
                CocoAnnotation::from_polygons(
                    first_annotation_id + k as u64,
                    image_id,
                    inst.class_id as u64 + 1,
                    vec![flatten_points(&inst.contour.vertices)],
                )
            })
            .collect();
        (image, anns)
    }
}

fn pick_class(rng: &mut ChaCha8Rng, mix: &[f64; 4]) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in mix.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    3
}

/// Scene `index` of the stream keyed by `seed`.
pub fn synth_scene(seed: u64, index: u64, cfg: &SynthConfig) -> Result<SynthScene> {
    if cfg.class_mix.iter().any(|w| !(*w >= 0.0)) || cfg.class_mix.iter().sum::<f64>() <= 0.0 {
        return Err(Error::contract(format!("class mix {:?} must be nonnegative with a positive sum", cfg.class_mix)));
    }
    if cfg.size < 128 {
        return Err(Error::contract(format!("synthetic canvas of {} px is too small", cfg.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let size = cfg.size as f64;
    let mut shapes: Vec<(usize, Shape)> = Vec::with_capacity(cfg.instances);
    for k in 0..cfg.instances {
        // the first four instances cover every class
        let class = if k < 4 && cfg.instances >= 4 { k } else { pick_class(&mut rng, &cfg.class_mix) };
        let style = &STYLES[class];
        let mut placed = false;
        for _attempt in 0..2000 {
            let r0 = rng.gen_range(style.radius.0..=style.radius.1);
            let mut terms = [(0.0, 0.0); 3];
            for (t, (lo, hi)) in terms.iter_mut().zip(style.harmonics) {
                *t = (rng.gen_range(lo..=hi), rng.gen_range(0.0..2.0 * PI));
            }
            let mut shape = Shape { center: [0.0, 0.0], r0, terms, rotation: rng.gen_range(0.0..2.0 * PI) };
            let reach = shape.max_radius() + MARGIN;
            let mates: Vec<&Shape> = shapes.iter().filter(|(c, _)| *c == class).map(|(_, s)| s).collect();
            shape.center = if !mates.is_empty() && rng.gen_bool(style.cluster) {
                let m = mates[rng.gen_range(0..mates.len())];
                let dir = rng.gen_range(0.0..2.0 * PI);
                let d = m.max_radius() + shape.max_radius() + rng.gen_range(2.0..8.0);
                [m.center[0] + d * dir.cos(), m.center[1] + d * dir.sin()]
            } else {
                [rng.gen_range(reach..size - reach), rng.gen_range(reach..size - reach)]
            };
            let inside = shape.center.iter().all(|&c| c >= reach && c <= size - reach);
            let clear = shapes.iter().all(|(_, o)| {
                let d = ((o.center[0] - shape.center[0]).powi(2) + (o.center[1] - shape.center[1]).powi(2)).sqrt();
                d > o.max_radius() + shape.max_radius() + 2.0
            });
            if inside && clear {
                shapes.push((class, shape));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::contract(format!("could not place {} instances on a {} px canvas", cfg.instances, cfg.size)));
        }
    }

    let image = render(&mut rng, cfg.size, &shapes);
    let instances = shapes
        .iter()
        .map(|(class, s)| {
            let boundary = s.boundary(BOUNDARY_POINTS);
            let contour = resample_polygon(&boundary, cfg.vertices, *class)?;
            let circle = Circle::equal_area(&boundary, *class)?;
            Ok(SynthInstance { class_id: *class, shape_area: s.area(), boundary, circle, contour })
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert!(instances.iter().all(|i| shoelace(&i.contour.vertices) > 0.0));
    Ok(SynthScene { image, instances })
}

fn render(rng: &mut ChaCha8Rng, size: usize, shapes: &[(usize, Shape)]) -> RgbImage {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.01..0.05), rng.gen_range(0.01..0.05), rng.gen_range(0.0..2.0 * PI), rng.gen_range(4.0..9.0)))
        .collect();
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = waves.iter().map(|(kx, ky, ph, amp)| amp * (kx * fx + ky * fy + ph).sin()).sum();
            let noise = rng.gen_range(-6.0..6.0);
            let mut rgb = [238.0 + tex + noise, 206.0 + tex + noise, 218.0 + 0.5 * tex + noise];
            if let Some((class, s)) = shapes.iter().find(|(_, s)| s.contains(fx, fy)) {
                let base = STYLES[*class].color;
                let (dx, dy) = (fx - s.center[0], fy - s.center[1]);
                // darker rim, lighter core
                let rel = (dx * dx + dy * dy).sqrt() / s.radius_at(dy.atan2(dx)).max(1.0);
                let shade = 1.1 - 0.25 * rel;
                let grain = rng.gen_range(-10.0..10.0);
                rgb = [0, 1, 2].map(|c| base[c] as f64 * shade + grain);
            }
            img.put_pixel(x as u32, y as u32, Rgb(rgb.map(|v| v.round().clamp(0.0, 255.0) as u8)));
        }
    }
    img
}
