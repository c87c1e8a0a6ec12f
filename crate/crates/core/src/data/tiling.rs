//! Overlapping tile grids over large images and per-tile annotation clipping.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rasterize_polygon, shoelace};

pub const DEFAULT_TILE_SIZE: usize = 512;
pub const DEFAULT_OVERLAP: usize = 256;
/// A clipped annotation is kept in a tile when at least this fraction of its
/// area survives.
pub const DEFAULT_MIN_RETAINED: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Top-left corners, row-major.
    pub origins: Vec<(usize, usize)>,
}

fn axis_origins(dim: usize, tile: usize, stride: usize) -> Vec<usize> {
    if dim <= tile {
        return vec![0];
    }
    let mut out = vec![0];
    let mut o = stride;
    while o + tile < dim {
        out.push(o);
        o += stride;
    }
    let last = dim - tile;
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Origins every `tile_size − overlap` pixels per axis, plus a final origin
/// flush with the far edge. Images smaller than a tile get one origin and are
/// zero-padded when cropped.
pub fn tile_grid(width: usize, height: usize, tile_size: usize, overlap: usize) -> Result<TileGrid> {
    if tile_size == 0 || overlap >= tile_size {
        return Err(Error::contract(format!("overlap {overlap} must be smaller than the tile size {tile_size}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::contract(format!("cannot tile an empty {width}x{height} image")));
    }
    let stride = tile_size - overlap;
    let xs = axis_origins(width, tile_size, stride);
    let ys = axis_origins(height, tile_size, stride);
    let origins = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    Ok(TileGrid { width, height, tile_size, overlap, origins })
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Indices of the tiles containing pixel `(x, y)`.
    pub fn tiles_containing(&self, x: usize, y: usize) -> impl Iterator<Item = usize> + '_ {
        let t = self.tile_size;
        self.origins
            .iter()
            .enumerate()
            .filter(move |(_, &(ox, oy))| x >= ox && y >= oy && x < ox + t && y < oy + t)
            .map(|(i, _)| i)
    }
}

/// Sutherland–Hodgman clipping of a polygon against an axis-aligned
/// rectangle `[x0, x1] × [y0, y1]`.
pub fn clip_polygon(points: &[[f64; 2]], rect: [f64; 4]) -> Vec<[f64; 2]> {
    let [x0, y0, x1, y1] = rect;
    let edges: [(usize, f64, bool); 4] = [(0, x0, true), (0, x1, false), (1, y0, true), (1, y1, false)];
    let mut poly = points.to_vec();
    for (axis, bound, keep_greater) in edges {
        if poly.is_empty() {
            break;
        }
        let inside = |p: &[f64; 2]| if keep_greater { p[axis] >= bound } else { p[axis] <= bound };
        let cross = |a: &[f64; 2], b: &[f64; 2]| {
            let t = (bound - a[axis]) / (b[axis] - a[axis]);
            let mut p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
            p[axis] = bound;
            p
        };
        let mut out = Vec::with_capacity(poly.len() + 4);
        for i in 0..poly.len() {
            let cur = &poly[i];
            let prev = &poly[(i + poly.len() - 1) % poly.len()];
            match (inside(prev), inside(cur)) {
                (true, true) => out.push(*cur),
                (true, false) => out.push(cross(prev, cur)),
                (false, true) => {
                    out.push(cross(prev, cur));
                    out.push(*cur);
                }
                (false, false) => {}
            }
        }
        poly = out;
    }
    poly.dedup();
    while poly.len() > 1 && poly.first() == poly.last() {
        poly.pop();
    }
    poly
}

/// An annotation in whole-image coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceAnnotation {
    pub class_id: usize,
    pub points: Vec<[f64; 2]>,
}

/// An annotation clipped to a tile, in tile-local coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchAnnotation {
    /// Index into the source annotation list.
    pub source: usize,
    pub class_id: usize,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TilePatch {
    pub origin: (usize, usize),
    pub size: usize,
    pub annotations: Vec<PatchAnnotation>,
}

impl TilePatch {
    /// One `size × size` bitmap per class, union of that class's annotations.
    pub fn class_masks(&self, classes: usize) -> Vec<Vec<bool>> {
        let mut masks = vec![vec![false; self.size * self.size]; classes];
        for a in &self.annotations {
            if a.class_id >= classes {
                continue;
            }
            let m = rasterize_polygon(&a.points, self.size, self.size).to_canvas(self.size, self.size);
            for (dst, src) in masks[a.class_id].iter_mut().zip(m) {
                *dst |= src;
            }
        }
        masks
    }
}

/// Assigns every annotation to the tiles it overlaps, clipped to the tile and
/// translated to tile coordinates. A clipped piece survives when it keeps at
/// least `min_retained` of the annotation's area.
pub fn annotations_to_patches(
    annotations: &[SourceAnnotation],
    grid: &TileGrid,
    min_retained: f64,
) -> Vec<TilePatch> {
    let t = grid.tile_size as f64;
    let mut patches: Vec<TilePatch> = grid
        .origins
        .iter()
        .map(|&origin| TilePatch { origin, size: grid.tile_size, annotations: Vec::new() })
        .collect();
    for (i, a) in annotations.iter().enumerate() {
        let full = shoelace(&a.points).abs();
        if a.points.len() < 3 || full <= 0.0 {
            continue;
        }
        for patch in patches.iter_mut() {
            let (ox, oy) = (patch.origin.0 as f64, patch.origin.1 as f64);
            let clipped = clip_polygon(&a.points, [ox, oy, ox + t, oy + t]);
            if clipped.len() < 3 {
                continue;
            }
            let area = shoelace(&clipped).abs();
            if area <= 0.0 || area < min_retained * full {
                continue;
            }
            patch.annotations.push(PatchAnnotation {
                source: i,
                class_id: a.class_id,
                points: clipped.iter().map(|p| [p[0] - ox, p[1] - oy]).collect(),
            });
        }
    }
    patches
}

/// Crops a `size × size` tile at `origin`, zero-padded past the image edge.
pub fn crop_tile(image: &RgbImage, origin: (usize, usize), size: usize) -> RgbImage {
    let mut out = RgbImage::new(size as u32, size as u32);
    let (w, h) = (image.width() as usize, image.height() as usize);
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = (origin.0 + x, origin.1 + y);
            if sx < w && sy < h {
                out.put_pixel(x as u32, y as u32, *image.get_pixel(sx as u32, sy as u32));
            }
        }
    }
    out
}

/// `{wsi}_x{origin_x}_y{origin_y}.png`.
pub fn patch_file_name(wsi: &str, origin: (usize, usize)) -> String {
    format!("{wsi}_x{}_y{}.png", origin.0, origin.1)
}

/// Inverse of [`patch_file_name`].
pub fn parse_patch_file_name(name: &str) -> Option<(String, (usize, usize))> {
    let stem = name.strip_suffix(".png")?;
    let (rest, y) = stem.rsplit_once("_y")?;
    let (wsi, x) = rest.rsplit_once("_x")?;
    Some((wsi.to_string(), (x.parse().ok()?, y.parse().ok()?)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covered(g: &TileGrid) -> bool {
        (0..g.height).all(|y| (0..g.width).all(|x| g.tiles_containing(x, y).next().is_some()))
    }

    #[test]
    fn grid_examples() {
        let g = tile_grid(1024, 1024, 512, 256).unwrap();
        assert_eq!(g.len(), 9);
        let xs: Vec<usize> = g.origins.iter().take(3).map(|o| o.0).collect();
        assert_eq!(xs, vec![0, 256, 512]);
        assert!(covered(&g));
        assert_eq!(tile_grid(512, 512, 512, 256).unwrap().origins, vec![(0, 0)]);
        assert_eq!(tile_grid(700, 512, 512, 256).unwrap().origins, vec![(0, 0), (188, 0)]);
        assert_eq!(tile_grid(300, 200, 512, 256).unwrap().origins, vec![(0, 0)]);
        assert!(tile_grid(1024, 1024, 512, 512).is_err());
    }

    #[test]
    fn clipping_a_square() {
        let sq = [[-5.0, -5.0], [5.0, -5.0], [5.0, 5.0], [-5.0, 5.0]];
        let c = clip_polygon(&sq, [0.0, 0.0, 100.0, 100.0]);
        assert!((shoelace(&c).abs() - 25.0).abs() < 1e-12);
        assert!(clip_polygon(&sq, [10.0, 10.0, 20.0, 20.0]).len() < 3);
    }

    #[test]
    fn straddling_annotation_appears_in_both_tiles() {
        let g = tile_grid(1024, 512, 512, 0).unwrap();
        let a = SourceAnnotation { class_id: 1, points: vec![[500.0, 100.0], [530.0, 100.0], [530.0, 120.0], [500.0, 120.0]] };
        // 12/30 of the area falls in the first tile, 18/30 in the second
        let p = annotations_to_patches(&[a.clone()], &g, 0.3);
        assert_eq!((p[0].annotations.len(), p[1].annotations.len()), (1, 1));
        assert!((shoelace(&p[0].annotations[0].points).abs() - 240.0).abs() < 1e-9);
        assert_eq!(p[1].annotations[0].points[0][0].min(p[1].annotations[0].points[1][0]), 0.0);
        let p = annotations_to_patches(&[a], &g, 0.5);
        assert_eq!((p[0].annotations.len(), p[1].annotations.len()), (0, 1));
    }

    #[test]
    fn names_roundtrip() {
        let n = patch_file_name("WSI_3", (256, 512));
        assert_eq!(n, "WSI_3_x256_y512.png");
        assert_eq!(parse_patch_file_name(&n), Some(("WSI_3".into(), (256, 512))));
    }
}
