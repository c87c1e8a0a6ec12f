//! COCO instance-segmentation documents and detection results.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::shoelace;

/// The four default categories, ids 1 to 4.
pub const DEFAULT_CLASS_NAMES: [&str; 4] = ["Eos", "Papillae Eos", "RBC", "RBC Cluster"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    /// Free-form metadata block, kept verbatim.
    #[serde(default)]
    pub info: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub images: Vec<CocoImage>,
    #[serde(default)]
    pub annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Polygons as flat `[x1, y1, x2, y2, …]` lists.
    pub segmentation: Vec<Vec<f64>>,
    pub area: f64,
    /// `[x, y, width, height]`.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
    #[serde(default)]
    pub supercategory: String,
}

/// Flat coordinate list to points.
pub fn polygon_points(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|p| [p[0], p[1]]).collect()
}

pub fn flatten_points(points: &[[f64; 2]]) -> Vec<f64> {
    points.iter().flat_map(|p| [p[0], p[1]]).collect()
}

/// Area and tight bounding box of a segmentation.
pub fn segmentation_extent(segmentation: &[Vec<f64>]) -> (f64, [f64; 4]) {
    let mut area = 0.0;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for poly in segmentation {
        let pts = polygon_points(poly);
        area += shoelace(&pts).abs();
        for p in pts {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
    }
    if !x0.is_finite() {
        return (0.0, [0.0; 4]);
    }
    (area, [x0, y0, x1 - x0, y1 - y0])
}

impl CocoAnnotation {
    /// An annotation whose `area` and `bbox` are derived from the polygons.
    pub fn from_polygons(id: u64, image_id: u64, category_id: u64, segmentation: Vec<Vec<f64>>) -> Self {
        let (area, bbox) = segmentation_extent(&segmentation);
        Self { id, image_id, category_id, segmentation, area, bbox, iscrowd: None }
    }
}

impl CocoDocument {
    pub fn with_default_categories() -> Self {
        Self { categories: default_categories(), ..Self::default() }
    }

    /// Every invariant violation, with the annotation ids involved.
    pub fn problems(&self) -> (Vec<String>, Vec<u64>) {
        let mut problems = Vec::new();
        let mut bad_ids = Vec::new();
        let mut seen = HashSet::new();
        for im in &self.images {
            if !seen.insert(im.id) {
                problems.push(format!("image id {} appears twice", im.id));
            }
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if !seen.insert(c.id) {
                problems.push(format!("category id {} appears twice", c.id));
            }
        }
        let images: HashSet<u64> = self.images.iter().map(|i| i.id).collect();
        let cats: HashSet<u64> = self.categories.iter().map(|c| c.id).collect();
        let mut seen = HashSet::new();
        for a in &self.annotations {
            let mut why = Vec::new();
            if !seen.insert(a.id) {
                why.push("duplicate id".to_string());
            }
            if !images.contains(&a.image_id) {
                why.push(format!("image_id {} does not exist", a.image_id));
            }
            if !cats.contains(&a.category_id) {
                why.push(format!("category_id {} does not exist", a.category_id));
            }
            if a.segmentation.is_empty() {
                why.push("no polygon".into());
            }
            for (k, poly) in a.segmentation.iter().enumerate() {
                if poly.len() % 2 != 0 {
                    why.push(format!("polygon {k} has an odd coordinate count {}", poly.len()));
                } else if poly.len() < 6 {
                    why.push(format!("polygon {k} has {} points, needs 3", poly.len() / 2));
                }
                if poly.iter().any(|v| !v.is_finite()) {
                    why.push(format!("polygon {k} has non-finite coordinates"));
                }
            }
            if why.is_empty() {
                let (area, bbox) = segmentation_extent(&a.segmentation);
                if bbox.iter().zip(&a.bbox).any(|(p, q)| (p - q).abs() > 1.0) {
                    why.push(format!("bbox {:?} is not the polygon box {:?} within 1 px", a.bbox, bbox));
                }
                if (a.area - area).abs() > 0.01 * area.max(f64::MIN_POSITIVE) {
                    why.push(format!("area {} differs from polygon area {area:.3} by more than 1%", a.area));
                }
            }
            if !why.is_empty() {
                problems.push(format!("annotation {}: {}", a.id, why.join(", ")));
                bad_ids.push(a.id);
            }
        }
        (problems, bad_ids)
    }

    pub fn validate(&self) -> Result<()> {
        let (problems, annotation_ids) = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCoco { problems, annotation_ids })
        }
    }

    /// Category id → contiguous class index, in ascending id order.
    pub fn class_index(&self) -> HashMap<u64, usize> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.into_iter().enumerate().map(|(i, id)| (id, i)).collect()
    }

    /// Class index → category id; inverse of [`CocoDocument::class_index`].
    pub fn category_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids
    }

    pub fn annotations_of(&self, image_id: u64) -> impl Iterator<Item = &CocoAnnotation> {
        self.annotations.iter().filter(move |a| a.image_id == image_id)
    }
}

pub fn default_categories() -> Vec<CocoCategory> {
    DEFAULT_CLASS_NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.to_string(), supercategory: "cell".into() })
        .collect()
}

/// Parses and validates a document. Invalid documents are rejected whole.
pub fn read_coco(text: &str) -> Result<CocoDocument> {
    let doc: CocoDocument = serde_json::from_str(text)?;
    doc.validate()?;
    Ok(doc)
}

pub fn write_coco(doc: &CocoDocument) -> String {
    serde_json::to_string_pretty(doc).expect("COCO documents serialize")
}

/// One detection in the COCO results format, extended with the circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Vec<Vec<f64>>,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub circle: Option<CircleRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleRecord {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
}

pub fn read_results(text: &str) -> Result<Vec<CocoResult>> {
    let results: Vec<CocoResult> = serde_json::from_str(text)?;
    let mut problems = Vec::new();
    for (i, r) in results.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.score) {
            problems.push(format!("result {i}: score {} outside [0, 1]", r.score));
        }
        if r.segmentation.iter().any(|p| p.len() % 2 != 0 || p.len() < 6) {
            problems.push(format!("result {i}: malformed polygon"));
        }
    }
    if problems.is_empty() {
        Ok(results)
    } else {
        Err(Error::InvalidCoco { problems, annotation_ids: Vec::new() })
    }
}

pub fn write_results(results: &[CocoResult]) -> String {
    serde_json::to_string_pretty(results).expect("results serialize")
}
