use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};

use circlesnake::data::SynthConfig;
use circlesnake_cli::commands::{self, PrepareOptions};
use circlesnake_cli::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Train,
    Evaluate,
    Infer,
    Prepare,
    Synth,
}

/// Multi-label circle detection and contour segmentation.
///
/// Trailing `key value` pairs override config entries, e.g.
/// `train.batch_size 16` or `ct_score 0.2`.
#[derive(Debug, Parser)]
#[command(name = "circlesnake", version)]
struct Args {
    #[arg(long = "type", value_enum, default_value = "train")]
    kind: Kind,
    #[arg(long = "cfg_file")]
    cfg_file: Option<PathBuf>,
    /// Output directory (synth, prepare, infer).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of synthetic scenes.
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    /// Synthetic scene side length in pixels.
    #[arg(long, default_value_t = 512)]
    size: usize,
    /// Objects per synthetic scene.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Checkpoint for inference; defaults to the evaluate selection rule.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Image file or directory of PNGs; repeatable.
    #[arg(long)]
    input: Vec<PathBuf>,
    /// Directory of `<wsi>.json` annotation exports (prepare).
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory of `<wsi>.png` slide images (prepare).
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = circlesnake::data::DEFAULT_TILE_SIZE)]
    tile_size: usize,
    #[arg(long, default_value_t = circlesnake::data::DEFAULT_OVERLAP)]
    overlap: usize,
    /// Export resolution divisor for prepare; only 1 is supported.
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

const KINDS: [&str; 5] = ["train", "evaluate", "infer", "prepare", "synth"];

/// Accepts `circlesnake synth …` as `circlesnake --type synth …`.
fn normalize(mut argv: Vec<String>) -> Vec<String> {
    if argv.get(1).is_some_and(|a| KINDS.contains(&a.as_str())) {
        argv.insert(1, "--type".into());
    }
    argv
}

fn run_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.cfg_file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse_from(normalize(std::env::args().collect()));
    match args.kind {
        Kind::Synth => {
            let out = args.out.as_ref().context("synth needs --out DIR")?;
            let synth = SynthConfig { size: args.size, instances: args.instances, ..SynthConfig::default() };
            let cfg = commands::cmd_synth(out, args.seed.unwrap_or(0), args.scenes, &synth)?;
            println!("wrote {} scenes; config {}", args.scenes, cfg.display());
        }
        Kind::Prepare => {
            let (Some(ann), Some(img), Some(out)) = (&args.annotations, &args.images, &args.out) else {
                bail!("prepare needs --annotations DIR --images DIR --out DIR");
            };
            let opts = PrepareOptions {
                tile_size: args.tile_size,
                overlap: args.overlap,
                downsample: args.downsample,
                seed: args.seed.unwrap_or(0),
                ..PrepareOptions::default()
            };
            let s = commands::cmd_prepare(ann, img, out, &opts)?;
            println!("{} tiles from {} slides\n{}", s.tiles, s.catalog.assignment.len(), s.table.render());
        }
        Kind::Train => {
            if args.cfg_file.is_none() {
                bail!("train needs --cfg_file");
            }
            let cfg = run_config(&args)?;
            let o = commands::cmd_train(&cfg)?;
            println!("trained {} epochs; log {}", o.epochs_run, o.log_path.display());
            if let Some((e, score)) = o.best {
                println!("best {} {score:.4} at epoch {e}", cfg.best_metric.name());
            }
        }
        Kind::Evaluate => {
            if args.cfg_file.is_none() {
                bail!("evaluate needs --cfg_file");
            }
            let (report, base) = commands::cmd_evaluate(&run_config(&args)?)?;
            print!("{}", report.render_table());
            println!("report {}.{{txt,kv}}", base.display());
        }
        Kind::Infer => {
            let cfg = run_config(&args)?;
            let out = args.out.as_ref().context("infer needs --out DIR")?;
            if args.input.is_empty() {
                bail!("infer needs at least one --input");
            }
            let ckpt = match &args.checkpoint {
                Some(c) => c.clone(),
                None => commands::resolve_checkpoint(&cfg)?,
            };
            let s = commands::cmd_infer(&cfg, &ckpt, &args.input, out)?;
            println!("wrote {} files, skipped {} images", s.written.len(), s.skipped.len());
        }
    }
    Ok(())
}
