//! Dataset preparation and loading: tiling, COCO documents, split catalogs,
//! annotation-export ingestion and synthetic scenes.

pub mod catalog;
pub mod coco;
pub mod synth;
pub mod tiling;

use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::Deserialize;

pub use catalog::{
    apportion, catalog_stats, read_registry, read_registry_with_base, split_catalog, write_registry, CountTable, DatasetCatalog,
    DatasetRegistration, DatasetRegistry, Split,
};
pub use coco::{
    default_categories, read_coco, read_results, write_coco, write_results, CircleRecord, CocoAnnotation,
    CocoCategory, CocoDocument, CocoImage, CocoResult, DEFAULT_CLASS_NAMES,
};
pub use synth::{synth_scene, SynthConfig, SynthInstance, SynthScene};
pub use tiling::{
    annotations_to_patches, clip_polygon, crop_tile, parse_patch_file_name, patch_file_name, tile_grid,
    PatchAnnotation, SourceAnnotation, TileGrid, TilePatch, DEFAULT_MIN_RETAINED, DEFAULT_OVERLAP, DEFAULT_TILE_SIZE,
};

use crate::error::{Error, Result};
use crate::geometry::{resample_polygon, shoelace, Circle, Contour};
use crate::heatmap::encode_targets;
use crate::model::{pad_image, TrainSample, INPUT_MULTIPLE};
use crate::tensor::Tensor;

/// Per-channel normalization applied to 8-bit RGB input.
pub const PIXEL_MEAN: [f32; 3] = [0.5, 0.5, 0.5];
pub const PIXEL_STD: [f32; 3] = [0.25, 0.25, 0.25];

pub fn read_image(path: &Path) -> Result<RgbImage> {
    image::open(path)
        .map(|i| i.to_rgb8())
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// `[3,H,W]` normalized network input.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = (p.0[c] as f32 / 255.0 - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sizes agree")
}

/// One annotation as exported by the slide viewer's script.
#[derive(Clone, Debug, Deserialize)]
pub struct ExportedAnnotation {
    pub class: String,
    pub points: Vec<[f64; 2]>,
}

/// Reads a `[{"class": …, "points": [[x, y], …]}, …]` export, mapping class
/// names to indices of `class_names`.
pub fn read_exported_annotations(path: &Path, class_names: &[String]) -> Result<Vec<SourceAnnotation>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<ExportedAnnotation> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: not an annotation export: {e}", path.display())))?;
    let mut out = Vec::with_capacity(raw.len());
    let mut problems = Vec::new();
    for (i, a) in raw.into_iter().enumerate() {
        match class_names.iter().position(|n| n == &a.class) {
            Some(class_id) if a.points.len() >= 3 => out.push(SourceAnnotation { class_id, points: a.points }),
            Some(_) => problems.push(format!("annotation {i} has fewer than 3 points")),
            None => problems.push(format!("annotation {i} has unknown class `{}`", a.class)),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Config(format!("{}: {}", path.display(), problems.join("; "))))
    }
}

/// An image with ground truth derived from its annotations.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image_id: u64,
    pub file_name: String,
    pub image: RgbImage,
    pub circles: Vec<Circle>,
    pub contours: Vec<Contour>,
}

/// Ground truth of one annotation: its largest polygon resampled to
/// `vertices`, and the circle with that polygon's area centroid and area.
pub fn annotation_geometry(a: &CocoAnnotation, class_id: usize, vertices: usize) -> Result<(Circle, Contour)> {
    let poly = a
        .segmentation
        .iter()
        .map(|p| coco::polygon_points(p))
        .max_by(|p, q| shoelace(p).abs().total_cmp(&shoelace(q).abs()))
        .ok_or_else(|| Error::contract(format!("annotation {} has no polygon", a.id)))?;
    let contour = resample_polygon(&poly, vertices, class_id)?;
    let circle = Circle::equal_area(&poly, class_id)?;
    Ok((circle, contour))
}

/// Loads a registered COCO dataset with its images.
pub fn load_dataset(reg: &DatasetRegistration, vertices: usize) -> Result<(CocoDocument, Vec<LabeledImage>)> {
    let text = std::fs::read_to_string(&reg.ann_file).map_err(|e| Error::io(&reg.ann_file, e))?;
    let doc = read_coco(&text)?;
    let classes = doc.class_index();
    let mut out = Vec::with_capacity(doc.images.len());
    for im in &doc.images {
        let path = reg.data_root.join(&im.file_name);
        let image = read_image(&path)?;
        if (image.width(), image.height()) != (im.width, im.height) {
            return Err(Error::Image {
                path,
                reason: format!("is {}x{}, the document says {}x{}", image.width(), image.height(), im.width, im.height),
            });
        }
        let mut circles = Vec::new();
        let mut contours = Vec::new();
        for a in doc.annotations_of(im.id) {
            let (c, ct) = annotation_geometry(a, classes[&a.category_id], vertices)?;
            circles.push(c);
            contours.push(ct);
        }
        out.push(LabeledImage { image_id: im.id, file_name: im.file_name.clone(), image, circles, contours });
    }
    Ok((doc, out))
}

/// Network input padded to [`INPUT_MULTIPLE`] with encoded targets.
pub fn train_sample(img: &LabeledImage, classes: usize, downsample: usize) -> Result<TrainSample> {
    let image = pad_image(&image_to_tensor(&img.image), INPUT_MULTIPLE)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let targets = encode_targets(&img.circles, w, h, downsample, classes)?;
    Ok(TrainSample { image, targets, circles: img.circles.clone(), contours: img.contours.clone() })
}

/// Writes `scenes` synthetic scenes under `out` (`images/*.png`,
/// `annotations.json`, `registry.json`) and returns the registry. The same
/// scenes are registered for training (`synthTrain`) and testing
/// (`synthTest`).
pub fn write_synthetic_dataset(out: &Path, seed: u64, scenes: usize, cfg: &SynthConfig) -> Result<DatasetRegistry> {
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut doc = CocoDocument::with_default_categories();
    doc.info.insert("description".into(), serde_json::json!(format!("synthetic scenes, seed {seed}")));
    let mut next_ann = 1;
    for k in 0..scenes {
        let scene = synth_scene(seed, k as u64, cfg)?;
        let name = format!("scene_{k:03}.png");
        write_png(&images.join(&name), &scene.image)?;
        let (im, anns) = scene.to_coco(k as u64 + 1, &name, next_ann);
        next_ann += anns.len() as u64;
        doc.images.push(im);
        doc.annotations.extend(anns);
    }
    let ann_file = out.join("annotations.json");
    std::fs::write(&ann_file, write_coco(&doc)).map_err(|e| Error::io(&ann_file, e))?;
    let entry = |split: &str| DatasetRegistration {
        id: "coco".into(),
        data_root: PathBuf::from("images"),
        ann_file: PathBuf::from("annotations.json"),
        split: split.into(),
    };
    let mut reg = DatasetRegistry::new();
    reg.insert("synthTrain".into(), entry("train"));
    reg.insert("synthTest".into(), entry("test"));
    write_registry(&out.join("registry.json"), &reg)?;
    read_registry(&out.join("registry.json"))
}
