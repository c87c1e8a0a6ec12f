//! Circles, contours and binary masks.
//!
//! Image coordinates throughout: x grows to the right, y grows downward.
//! "Top-most" means minimal y and "clockwise" means clockwise as seen on
//! screen. Pixel `(px, py)` covers `[px, px+1) × [py, py+1)`, so its center
//! is `(px + 0.5, py + 0.5)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of contour vertices.
pub const DEFAULT_VERTICES: usize = 128;

/// A detection or ground-truth object as a circle. `score` is 1.0 for ground
/// truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub class_id: usize,
    pub score: f64,
}

impl Circle {
    pub fn new(cx: f64, cy: f64, r: f64, class_id: usize) -> Self {
        Self { cx, cy, r, class_id, score: 1.0 }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn area(&self) -> f64 {
        PI * self.r * self.r
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(self.r > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() || !self.r.is_finite() {
            return Err(Error::contract(format!("circle needs a finite center and r > 0, got {self:?}")));
        }
        if self.class_id >= class_count {
            return Err(Error::contract(format!("class {} outside [0, {class_count})", self.class_id)));
        }
        Ok(())
    }

    /// Circle with the polygon's area centroid and the radius of equal area.
    pub fn equal_area(points: &[[f64; 2]], class_id: usize) -> Result<Self> {
        let area = shoelace(points).abs();
        if area <= 0.0 {
            return Err(Error::contract("polygon has zero area"));
        }
        let [cx, cy] = area_centroid(points);
        Ok(Self::new(cx, cy, (area / PI).sqrt(), class_id))
    }
}

/// Closed ring of vertices, clockwise, starting at the top-most point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub vertices: Vec<[f64; 2]>,
    pub class_id: usize,
}

impl Contour {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Mean of the vertices.
    pub fn vertex_mean(&self) -> [f64; 2] {
        let n = self.vertices.len().max(1) as f64;
        let (sx, sy) = self.vertices.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
        [sx / n, sy / n]
    }

    /// `[xmin, ymin, xmax, ymax]`.
    pub fn bounds(&self) -> [f64; 4] {
        bounds(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.vertices).abs()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self { vertices: self.vertices.iter().map(|v| [v[0] + dx, v[1] + dy]).collect(), class_id: self.class_id }
    }
}

pub fn bounds(points: &[[f64; 2]]) -> [f64; 4] {
    points.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
        [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
    })
}

/// Shoelace sum `½ Σ (x_i y_{i+1} − x_{i+1} y_i)`. In y-down coordinates a
/// ring that runs clockwise on screen gives a positive value.
pub fn shoelace(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

pub fn is_clockwise(points: &[[f64; 2]]) -> bool {
    shoelace(points) > 0.0
}

pub fn area_centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len();
    let a = shoelace(points);
    if a == 0.0 {
        let (sx, sy) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p[0], y + p[1]));
        return [sx / n as f64, sy / n as f64];
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let p = points[i];
        let q = points[(i + 1) % n];
        let cross = p[0] * q[1] - q[0] * p[1];
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

/// `n` points on the circle, `θ_i = −π/2 + 2πi/n`: vertex 0 is the top-most
/// point and the ring runs clockwise on screen.
pub fn sample_circle_contour(c: &Circle, n: usize) -> Result<Contour> {
    if n < 3 {
        return Err(Error::contract(format!("a contour needs at least 3 vertices, asked for {n}")));
    }
    let vertices = (0..n)
        .map(|i| {
            let theta = -PI / 2.0 + 2.0 * PI * i as f64 / n as f64;
            [c.cx + c.r * theta.cos(), c.cy + c.r * theta.sin()]
        })
        .collect();
    Ok(Contour { vertices, class_id: c.class_id })
}

/// Resamples a closed polygon to `n` vertices equally spaced by arc length.
///
/// The result runs clockwise and starts at the top-most input vertex (ties go
/// to the left-most one), which lines it up with the vertex order of
/// [`sample_circle_contour`].
pub fn resample_polygon(points: &[[f64; 2]], n: usize, class_id: usize) -> Result<Contour> {
    if n < 3 {
        return Err(Error::contract(format!("a contour needs at least 3 vertices, asked for {n}")));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::contract("polygon has non-finite coordinates"));
    }
    let mut ring: Vec<[f64; 2]> = Vec::with_capacity(points.len());
    for p in points {
        if ring.last() != Some(p) {
            ring.push(*p);
        }
    }
    while ring.len() > 1 && ring.first() == ring.last() {
        ring.pop();
    }
    if ring.len() < 3 {
        return Err(Error::contract(format!("polygon has {} distinct points, needs 3", ring.len())));
    }
    if shoelace(&ring) < 0.0 {
        ring.reverse();
    }
    let start = (0..ring.len())
        .min_by(|&a, &b| {
            let (p, q) = (ring[a], ring[b]);
            p[1].total_cmp(&q[1]).then(p[0].total_cmp(&q[0]))
        })
        .unwrap();
    ring.rotate_left(start);

    let m = ring.len();
    let seg: Vec<f64> = (0..m).map(|i| dist(ring[i], ring[(i + 1) % m])).collect();
    let perimeter: f64 = seg.iter().sum();
    if !(perimeter > 0.0) {
        return Err(Error::contract("polygon has zero perimeter"));
    }
    let step = perimeter / n as f64;
    let mut vertices = Vec::with_capacity(n);
    let mut edge = 0;
    let mut edge_start = 0.0;
    for k in 0..n {
        let s = k as f64 * step;
        while edge + 1 < m && edge_start + seg[edge] <= s {
            edge_start += seg[edge];
            edge += 1;
        }
        let a = ring[edge];
        let b = ring[(edge + 1) % m];
        let t = if seg[edge] > 0.0 { ((s - edge_start) / seg[edge]).clamp(0.0, 1.0) } else { 0.0 };
        vertices.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    Ok(Contour { vertices, class_id })
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Exact area of the intersection of two disks.
pub fn circle_intersection_area(a: &Circle, b: &Circle) -> f64 {
    let d = ((a.cx - b.cx).powi(2) + (a.cy - b.cy).powi(2)).sqrt();
    let (r1, r2) = (a.r, b.r);
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        let r = r1.min(r2);
        return PI * r * r;
    }
    let c1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0);
    let c2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0);
    let k = ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).max(0.0);
    r1 * r1 * c1.acos() + r2 * r2 * c2.acos() - 0.5 * k.sqrt()
}

/// Intersection over union of two disks (lens formula).
pub fn circle_iou(a: &Circle, b: &Circle) -> f64 {
    let inter = circle_intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Binary mask over the window `[x0, x0+width) × [y0, y0+height)` of a canvas.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty() -> Self {
        Self { x0: 0, y0: 0, width: 0, height: 0, bits: Vec::new() }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        x >= self.x0
            && y >= self.y0
            && x < self.x0 + self.width
            && y < self.y0 + self.height
            && self.bits[(y - self.y0) * self.width + (x - self.x0)]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        let xa = self.x0.max(other.x0);
        let ya = self.y0.max(other.y0);
        let xb = (self.x0 + self.width).min(other.x0 + other.width);
        let yb = (self.y0 + self.height).min(other.y0 + other.height);
        let mut n = 0;
        for y in ya..yb {
            for x in xa..xb {
                if self.bits[(y - self.y0) * self.width + (x - self.x0)]
                    && other.bits[(y - other.y0) * other.width + (x - other.x0)]
                {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union == 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn dice(&self, other: &Mask) -> f64 {
        let total = (self.area() + other.area()) as f64;
        if total == 0.0 {
            0.0
        } else {
            2.0 * self.intersection(other) as f64 / total
        }
    }

    /// Expands to a full `width × height` canvas bitmap.
    pub fn to_canvas(&self, width: usize, height: usize) -> Vec<bool> {
        let mut out = vec![false; width * height];
        for y in 0..self.height {
            for x in 0..self.width {
                let (cx, cy) = (self.x0 + x, self.y0 + y);
                if cx < width && cy < height && self.bits[y * self.width + x] {
                    out[cy * width + cx] = true;
                }
            }
        }
        out
    }
}

/// Rasterizes a closed polygon onto a `width × height` canvas, cropped to the
/// polygon's bounds. A pixel is set iff its center is inside under the
/// even-odd rule.
pub fn rasterize_polygon(points: &[[f64; 2]], width: usize, height: usize) -> Mask {
    if points.len() < 3 || width == 0 || height == 0 {
        return Mask::empty();
    }
    let [xmin, ymin, xmax, ymax] = bounds(points);
    let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    let x0 = clamp((xmin - 0.5).ceil(), width);
    let x1 = clamp((xmax - 0.5).ceil(), width);
    let y0 = clamp((ymin - 0.5).ceil(), height);
    let y1 = clamp((ymax - 0.5).ceil(), height);
    if x1 <= x0 || y1 <= y0 {
        return Mask::empty();
    }
    let (w, h) = (x1 - x0, y1 - y0);
    let mut bits = vec![false; w * h];
    let mut xs: Vec<f64> = Vec::new();
    let n = points.len();
    for py in y0..y1 {
        let yc = py as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = points[i];
            let b = points[(i + 1) % n];
            if (a[1] <= yc && yc < b[1]) || (b[1] <= yc && yc < a[1]) {
                xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        let row = &mut bits[(py - y0) * w..(py - y0 + 1) * w];
        for pair in xs.chunks_exact(2) {
            let from = clamp((pair[0] - 0.5).ceil(), width).max(x0);
            let to = clamp((pair[1] - 0.5).ceil(), width).min(x1);
            for px in from..to {
                row[px - x0] = !row[px - x0];
            }
        }
    }
    Mask { x0, y0, width: w, height: h, bits }
}

/// Full-canvas rasterization of a contour.
pub fn rasterize_contour(c: &Contour, width: usize, height: usize) -> Mask {
    let m = rasterize_polygon(&c.vertices, width, height);
    let bits = m.to_canvas(width, height);
    Mask { x0: 0, y0: 0, width, height, bits }
}
