//! The five commands behind the binary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::{info, warn};

use circlesnake::data::{
    annotations_to_patches, catalog_stats, crop_tile, image_to_tensor, load_dataset, patch_file_name,
    read_exported_annotations, read_image, read_registry_with_base, split_catalog, tile_grid, train_sample,
    write_coco, write_png, write_registry, write_synthetic_dataset, CircleRecord, CocoAnnotation, CocoDocument,
    CocoImage, CocoResult, CountTable, DatasetCatalog, DatasetRegistration, DatasetRegistry, LabeledImage, Split,
    SynthConfig, DEFAULT_CLASS_NAMES, DEFAULT_MIN_RETAINED, DEFAULT_OVERLAP, DEFAULT_TILE_SIZE,
};
use circlesnake::evaluation::{evaluate, EvalConfig, EvalMode, EvalReport, GroundTruth, ImageRecord};
use circlesnake::geometry::bounds;
use circlesnake::model::{log_line, CircleSnake, InstancePrediction, PredictOptions, TrainSample, Trainer};

use crate::config::{BestMetric, RunConfig, DATA_ROOT_ENV};
use crate::error::CliError;
use crate::render::overlay;

pub const TRAIN_LOG: &str = "train.log";
pub const EVAL_LOG: &str = "eval.log";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("{epoch}.ckpt"))
}

/// Epochs with a `{epoch}.ckpt` in `dir`, ascending.
pub fn available_epochs(dir: &Path) -> Vec<usize> {
    let mut out: Vec<usize> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".ckpt")?.parse().ok())
        .collect();
    out.sort_unstable();
    out
}

/// The registration file, with relative paths under `$CIRCLESNAKE_DATA_ROOT`
/// when it is set.
pub fn registry(cfg: &RunConfig) -> Result<DatasetRegistry, CliError> {
    let base = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    Ok(read_registry_with_base(&cfg.dataset_catalog, base.as_deref())?)
}

fn lookup<'a>(reg: &'a DatasetRegistry, name: &str, cfg: &RunConfig) -> Result<&'a DatasetRegistration, CliError> {
    reg.get(name).ok_or_else(|| CliError::UnknownDataset {
        name: name.to_string(),
        catalog: cfg.dataset_catalog.clone(),
        known: reg.keys().cloned().collect::<Vec<_>>().join(", "),
    })
}

/// Class names in category-id order.
fn class_names(doc: &CocoDocument) -> Vec<String> {
    let mut cats = doc.categories.clone();
    cats.sort_by_key(|c| c.id);
    cats.into_iter().map(|c| c.name).collect()
}

/// Loads a registered dataset and checks its classes against the model.
pub fn load_registered(cfg: &RunConfig, name: &str) -> Result<(Vec<String>, Vec<LabeledImage>), CliError> {
    let reg = registry(cfg)?;
    let entry = lookup(&reg, name, cfg)?;
    let (doc, images) = load_dataset(entry, cfg.model.vertices)?;
    let names = class_names(&doc);
    if names.len() != cfg.model.classes {
        return Err(CliError::Config(format!(
            "dataset `{name}` has {} categories, the model is configured for {}",
            names.len(),
            cfg.model.classes
        )));
    }
    Ok((names, images))
}

/// Predicts every image and scores the predictions against its annotations.
pub fn evaluate_model(
    model: &CircleSnake<f32>,
    images: &[LabeledImage],
    class_names: &[String],
    ct_score: f64,
    mode: EvalMode,
    deform: bool,
) -> Result<EvalReport, CliError> {
    let opts = PredictOptions { ct_score, top_n: model.config.top_n, deform };
    let mut records = Vec::with_capacity(images.len());
    for im in images {
        let (_, preds) = model.predict(&image_to_tensor(&im.image), &opts)?;
        records.push(ImageRecord {
            image_id: im.image_id,
            width: im.image.width() as usize,
            height: im.image.height() as usize,
            gts: im
                .circles
                .iter()
                .zip(&im.contours)
                .map(|(c, ct)| GroundTruth { circle: *c, contour: ct.clone() })
                .collect(),
            preds,
        });
    }
    Ok(evaluate(&records, &EvalConfig::new(mode, class_names.to_vec()))?)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs_run: usize,
    /// Epoch of the checkpoint kept as `best.ckpt` and its selection score
    /// (AP50, or mean training loss).
    pub best: Option<(usize, f64)>,
    pub log_path: PathBuf,
    pub reports: Vec<(usize, EvalReport)>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Trains on `train.dataset`, checkpointing every `save_ep` epochs and
/// evaluating on `test.dataset` every `eval_ep` epochs. Epochs count from 0;
/// `{e}.ckpt` holds the weights after epoch `e`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    if let Some(p) = &cfg.pretrain {
        warn!("pretrain `{p}` ignored: the backbone is trained from scratch");
    }
    let (names, train_images) = load_registered(cfg, &cfg.train_dataset)?;
    let (_, test_images) = load_registered(cfg, &cfg.test_dataset)?;
    let samples = train_images
        .iter()
        .map(|im| train_sample(im, cfg.model.classes, cfg.model.downsample))
        .collect::<Result<Vec<TrainSample>, _>>()?;
    if samples.is_empty() {
        return Err(CliError::Failed(format!("dataset `{}` has no images", cfg.train_dataset)));
    }
    let dir = &cfg.model_dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.clone(), e))?;

    let (mut trainer, start) = match available_epochs(dir).last() {
        Some(&e) if cfg.resume => {
            let path = checkpoint_path(dir, e);
            info!("resuming from {}", path.display());
            let (model, adam, _) = CircleSnake::<f32>::load(&path)?;
            (Trainer::resume(model, adam), e + 1)
        }
        _ => (Trainer::new(CircleSnake::<f32>::new(cfg.model.clone())?), 0),
    };
    let log_path = dir.join(TRAIN_LOG);
    let mut log = if start > 0 {
        let f = std::fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| CliError::Io(log_path.clone(), e))?;
        BufWriter::new(f)
    } else {
        create(&log_path)?
    };
    let eval_path = dir.join(EVAL_LOG);
    let mut eval_log = create(&eval_path)?;

    let epochs = trainer.model.config.epochs;
    let batch = trainer.model.config.batch_size;
    let mut best: Option<(usize, f64)> = None;
    let mut reports = Vec::new();
    for epoch in start..epochs {
        trainer.set_epoch(epoch);
        let mut loss_sum = 0.0;
        for chunk in samples.chunks(batch) {
            let refs: Vec<&TrainSample> = chunk.iter().collect();
            let step = trainer.step;
            let b = trainer.train_step(&refs, true)?;
            loss_sum += b.total();
            let line = log_line(epoch, step, &b, trainer.lr());
            writeln!(log, "{line}").map_err(|e| CliError::Io(log_path.clone(), e))?;
            if cfg.debug_train {
                println!("{line}");
            }
        }
        log.flush().map_err(|e| CliError::Io(log_path.clone(), e))?;
        let last = epoch + 1 == epochs;
        if (epoch + 1) % cfg.save_ep == 0 || last {
            trainer.model.save(&checkpoint_path(dir, epoch), &trainer.adam, Some(epoch))?;
        }
        if (epoch + 1) % cfg.eval_ep == 0 || last {
            let r = evaluate_model(&trainer.model, &test_images, &names, cfg.test_ct_score, cfg.segm_or_bbox, true)?;
            let ap50 = r.ap50.unwrap_or(0.0);
            let train_loss = loss_sum / samples.chunks(batch).len() as f64;
            info!("epoch {epoch}: AP50 {ap50:.4}, mean training loss {train_loss:.4}");
            writeln!(eval_log, "epoch={epoch}\ntrain_loss={train_loss:.6}\n{}", r.render_kv())
                .map_err(|e| CliError::Io(eval_path.clone(), e))?;
            let better = match (cfg.best_metric, best) {
                (_, None) => true,
                (BestMetric::Ap50, Some((_, b))) => ap50 > b,
                (BestMetric::Loss, Some((_, b))) => train_loss < b,
            };
            if better {
                let score = if cfg.best_metric == BestMetric::Ap50 { ap50 } else { train_loss };
                best = Some((epoch, score));
                trainer.model.save(&dir.join(BEST_CHECKPOINT), &trainer.adam, Some(epoch))?;
            }
            reports.push((epoch, r));
        }
    }
    eval_log.flush().map_err(|e| CliError::Io(eval_path.clone(), e))?;
    Ok(TrainOutcome { epochs_run: epochs.saturating_sub(start), best, log_path, reports })
}

/// The checkpoint `test.epoch` names, else `best.ckpt`, else the latest.
pub fn resolve_checkpoint(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = &cfg.model_dir;
    let available = available_epochs(dir);
    let missing = |epoch| CliError::MissingEpoch {
        epoch,
        dir: dir.clone(),
        available: if available.is_empty() {
            "none".into()
        } else {
            available.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
        },
    };
    match cfg.test_epoch {
        Some(e) if available.contains(&e) => Ok(checkpoint_path(dir, e)),
        Some(e) => Err(missing(e)),
        None if dir.join(BEST_CHECKPOINT).exists() => Ok(dir.join(BEST_CHECKPOINT)),
        None => available.last().map(|&e| checkpoint_path(dir, e)).ok_or_else(|| missing(0)),
    }
}

/// Evaluates a checkpoint on `test.dataset` and writes `eval_<name>.txt`
/// (table) and `eval_<name>.kv` next to it.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(EvalReport, PathBuf), CliError> {
    let ckpt = resolve_checkpoint(cfg)?;
    let (mut model, _, _) = CircleSnake::<f32>::load(&ckpt)?;
    model.config.ct_score = cfg.test_ct_score;
    let mut run = cfg.clone();
    run.model = model.config.clone();
    let (names, images) = load_registered(&run, &cfg.test_dataset)?;
    let mut report = evaluate_model(&model, &images, &names, cfg.test_ct_score, cfg.segm_or_bbox, true)?;
    if !cfg.dice {
        report.dice = None;
    }
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let base = cfg.model_dir.join(format!("eval_{stem}"));
    write_file(&base.with_extension("txt"), &report.render_table())?;
    write_file(&base.with_extension("kv"), &report.render_kv())?;
    Ok((report, base))
}

/// COCO results of one image; category ids are class index + 1.
pub fn to_results(image_id: u64, preds: &[InstancePrediction]) -> Vec<CocoResult> {
    preds
        .iter()
        .map(|p| {
            let [x0, y0, x1, y1] = bounds(&p.contour.vertices);
            CocoResult {
                image_id,
                category_id: p.circle.class_id as u64 + 1,
                segmentation: vec![circlesnake::data::coco::flatten_points(&p.contour.vertices)],
                bbox: [x0, y0, x1 - x0, y1 - y0],
                score: p.score,
                circle: Some(CircleRecord { cx: p.circle.cx, cy: p.circle.cy, r: p.circle.r }),
            }
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Expands directories to their `.png` files, sorted.
pub fn collect_images(inputs: &[PathBuf]) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .into_iter()
                .flatten()
                .flatten()
                .map(|e| e.path())
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    out
}

/// Writes `<stem>.json` results per image and, with `save_images`,
/// `<stem>_overlay.png`. Unreadable images are skipped; it is an error when
/// none succeed.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, inputs: &[PathBuf], out: &Path) -> Result<InferSummary, CliError> {
    let (model, _, _) = CircleSnake::<f32>::load(checkpoint)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Io(out.to_path_buf(), e))?;
    let opts = PredictOptions { ct_score: cfg.test_ct_score, top_n: model.config.top_n, deform: true };
    let mut summary = InferSummary::default();
    let images = collect_images(inputs);
    for (k, path) in images.iter().enumerate() {
        let img = match read_image(path) {
            Ok(i) => i,
            Err(e) => {
                warn!("skipping {}: {e}", path.display());
                summary.skipped.push((path.clone(), e.to_string()));
                continue;
            }
        };
        let (_, preds) = model.predict(&image_to_tensor(&img), &opts)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let json = out.join(format!("{stem}.json"));
        write_file(&json, &circlesnake::data::write_results(&to_results(k as u64 + 1, &preds)))?;
        summary.written.push(json);
        if cfg.save_images {
            let png = out.join(format!("{stem}_overlay.png"));
            write_png(&png, &overlay(&img, &preds))?;
            summary.written.push(png);
        }
    }
    if summary.written.is_empty() {
        let why: Vec<String> = summary.skipped.iter().map(|(p, e)| format!("{}: {e}", p.display())).collect();
        return Err(CliError::Failed(format!("no image could be processed\n{}", why.join("\n"))));
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareOptions {
    pub tile_size: usize,
    pub overlap: usize,
    pub min_retained: f64,
    pub ratios: [f64; 3],
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Export resolution divisor; only full resolution (1) is supported.
    pub downsample: usize,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            overlap: DEFAULT_OVERLAP,
            min_retained: DEFAULT_MIN_RETAINED,
            ratios: [7.0, 1.0, 2.0],
            seed: 0,
            class_names: DEFAULT_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            downsample: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrepareSummary {
    pub catalog: DatasetCatalog,
    pub tiles: usize,
    pub table: CountTable,
}

/// Dataset names written to the prepared registry, per split.
pub const PREPARED_NAMES: [&str; 3] = ["eoeTrain", "eoeVal", "eoeTest"];

/// Tiles every `<wsi>.png` of `images_dir` with its `<wsi>.json` annotation
/// export, splits by whole-slide image and writes
/// `<split>/{images,masks}/`, `<split>/annotations.json`, `catalog.json` and
/// `registry.json` under `out`.
pub fn cmd_prepare(annotations: &Path, images_dir: &Path, out: &Path, opts: &PrepareOptions) -> Result<PrepareSummary, CliError> {
    if opts.downsample != 1 {
        return Err(CliError::Config(format!("export downsample {} is not supported (only 1)", opts.downsample)));
    }
    let mut exports: Vec<PathBuf> = std::fs::read_dir(annotations)
        .map_err(|e| CliError::Io(annotations.to_path_buf(), e))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    exports.sort();
    let mut problems = Vec::new();
    let mut slides = BTreeMap::new();
    for path in &exports {
        let wsi = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let anns = read_exported_annotations(path, &opts.class_names);
        let img = read_image(&images_dir.join(format!("{wsi}.png")));
        match (anns, img) {
            (Ok(a), Ok(i)) => {
                slides.insert(wsi, (a, i));
            }
            (a, i) => problems.extend(a.err().into_iter().chain(i.err()).map(|e| e.to_string())),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Failed(problems.join("\n")));
    }
    let ids: Vec<String> = slides.keys().cloned().collect();
    let catalog = if ids.len() >= Split::ALL.len() {
        split_catalog(&ids, opts.ratios, opts.seed)?
    } else {
        if !ids.is_empty() {
            warn!("{} whole-slide images cannot fill three splits; all go to train", ids.len());
        }
        DatasetCatalog { assignment: ids.iter().map(|i| (i.clone(), Split::Train)).collect() }
    };

    let categories: Vec<_> = opts
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| circlesnake::data::CocoCategory { id: i as u64 + 1, name: n.clone(), supercategory: "cell".into() })
        .collect();
    let mut docs: Vec<CocoDocument> =
        Split::ALL.iter().map(|_| CocoDocument { categories: categories.clone(), ..CocoDocument::default() }).collect();
    let mut tiles = 0;
    let (mut next_image, mut next_ann) = (1u64, 1u64);
    for (wsi, (anns, img)) in &slides {
        let split = catalog.split_of(wsi).expect("every slide is assigned");
        let dir = out.join(split.name());
        for sub in ["images", "masks"] {
            std::fs::create_dir_all(dir.join(sub)).map_err(|e| CliError::Io(dir.join(sub), e))?;
        }
        let grid = tile_grid(img.width() as usize, img.height() as usize, opts.tile_size, opts.overlap)?;
        let doc = &mut docs[split.index()];
        for patch in annotations_to_patches(anns, &grid, opts.min_retained) {
            let name = patch_file_name(wsi, patch.origin);
            write_png(&dir.join("images").join(&name), &crop_tile(img, patch.origin, patch.size))?;
            let stem = name.trim_end_matches(".png");
            for (k, mask) in patch.class_masks(opts.class_names.len()).iter().enumerate() {
                let px = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
                let gray = GrayImage::from_raw(patch.size as u32, patch.size as u32, px).expect("mask size");
                let p = dir.join("masks").join(format!("{stem}_class{k}.png"));
                gray.save(&p).map_err(|e| CliError::Failed(format!("{}: {e}", p.display())))?;
            }
            doc.images.push(CocoImage { id: next_image, file_name: name, width: patch.size as u32, height: patch.size as u32 });
            for a in &patch.annotations {
                let flat = circlesnake::data::coco::flatten_points(&a.points);
                doc.annotations.push(CocoAnnotation::from_polygons(next_ann, next_image, a.class_id as u64 + 1, vec![flat]));
                next_ann += 1;
            }
            next_image += 1;
            tiles += 1;
        }
    }
    let mut reg = DatasetRegistry::new();
    for (split, name) in Split::ALL.iter().zip(PREPARED_NAMES) {
        let dir = out.join(split.name());
        std::fs::create_dir_all(dir.join("images")).map_err(|e| CliError::Io(dir.clone(), e))?;
        write_file(&dir.join("annotations.json"), &write_coco(&docs[split.index()]))?;
        reg.insert(
            name.to_string(),
            DatasetRegistration {
                id: "coco".into(),
                data_root: PathBuf::from(split.name()).join("images"),
                ann_file: PathBuf::from(split.name()).join("annotations.json"),
                split: split.name().into(),
            },
        );
    }
    write_registry(&out.join("registry.json"), &reg)?;
    let catalog_json = serde_json::to_string_pretty(&catalog).expect("catalog serializes");
    write_file(&out.join("catalog.json"), &catalog_json)?;
    let pairs: Vec<(Split, &CocoDocument)> = Split::ALL.iter().map(|&s| (s, &docs[s.index()])).collect();
    let table = catalog_stats(&catalog, &pairs, &opts.class_names)?;
    Ok(PrepareSummary { catalog, tiles, table })
}

/// Writes `scenes` synthetic scenes and a ready-to-train `config.yaml` under
/// `out`; returns the config path.
pub fn cmd_synth(out: &Path, seed: u64, scenes: usize, synth: &SynthConfig) -> Result<PathBuf, CliError> {
    write_synthetic_dataset(out, seed, scenes, synth)?;
    let mut cfg = RunConfig {
        dataset_catalog: PathBuf::from("registry.json"),
        model_dir: PathBuf::from("runs"),
        train_dataset: "synthTrain".into(),
        test_dataset: "synthTest".into(),
        ..RunConfig::default()
    };
    cfg.model.seed = seed;
    let path = out.join("config.yaml");
    write_file(&path, &cfg.serialize())?;
    Ok(path)
}
