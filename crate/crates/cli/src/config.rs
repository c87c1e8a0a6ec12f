//! Run configuration: a small YAML subset (scalars, one level of sections,
//! parenthesized tuples, inline dicts, `#` comments) plus `key value`
//! overrides.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use circlesnake::evaluation::EvalMode;
use circlesnake::model::ModelConfig;

use crate::error::CliError;

/// Replaces the base directory of relative dataset paths.
pub const DATA_ROOT_ENV: &str = "CIRCLESNAKE_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    Tuple(Vec<Value>),
    Dict(Vec<(String, Value)>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Str(s) => write!(f, "'{s}'"),
            Value::Int(i) => write!(f, "{i}"),
            // `{:?}` keeps a decimal point or exponent, so floats stay floats
            Value::Float(x) => write!(f, "{x:?}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Tuple(v) => {
                let items: Vec<String> = v.iter().map(Value::to_string).collect();
                if items.len() == 1 {
                    write!(f, "({},)", items[0])
                } else {
                    write!(f, "({})", items.join(", "))
                }
            }
            Value::Dict(v) => {
                let items: Vec<String> = v.iter().map(|(k, x)| format!("'{k}': {x}")).collect();
                write!(f, "{{{}}}", items.join(", "))
            }
        }
    }
}

fn split_top_level(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let (mut depth, mut quote, mut start) = (0i32, None, 0);
    for (i, ch) in s.char_indices() {
        match (quote, ch) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '\'' | '"') => quote = Some(ch),
            (None, '(' | '[' | '{') => depth += 1,
            (None, ')' | ']' | '}') => depth -= 1,
            (None, ',') if depth == 0 => {
                out.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&s[start..]);
    out
}

/// Parses one value: quoted or bare strings, booleans (`true`, `True`, …),
/// integers, floats, `(a, b)` / `[a, b]` tuples and `{'k': v}` dicts.
pub fn parse_value(raw: &str) -> Result<Value, String> {
    let s = raw.trim();
    if s.is_empty() {
        return Err("missing value".into());
    }
    let inner = |open: char, close: char| s.strip_prefix(open).and_then(|r| r.strip_suffix(close));
    if let Some(body) = inner('(', ')').or_else(|| inner('[', ']')) {
        let items = split_top_level(body);
        let items: Vec<&str> = items.into_iter().filter(|i| !i.trim().is_empty()).collect();
        return items.into_iter().map(parse_value).collect::<Result<_, _>>().map(Value::Tuple);
    }
    if let Some(body) = inner('{', '}') {
        let mut out = Vec::new();
        for item in split_top_level(body).into_iter().filter(|i| !i.trim().is_empty()) {
            let (k, v) = item.split_once(':').ok_or_else(|| format!("dict entry `{}` has no `:`", item.trim()))?;
            let key = match parse_value(k)? {
                Value::Str(k) => k,
                other => return Err(format!("dict key {other} is not a name")),
            };
            out.push((key, parse_value(v)?));
        }
        return Ok(Value::Dict(out));
    }
    for q in ['\'', '"'] {
        if let Some(body) = s.strip_prefix(q).and_then(|r| r.strip_suffix(q)) {
            if s.len() >= 2 {
                return Ok(Value::Str(body.to_string()));
            }
        }
    }
    match s {
        "true" | "True" => return Ok(Value::Bool(true)),
        "false" | "False" => return Ok(Value::Bool(false)),
        _ => {}
    }
    if let Ok(i) = s.parse::<i64>() {
        return Ok(Value::Int(i));
    }
    if s.contains(|c: char| c.is_ascii_digit()) {
        if let Ok(x) = s.parse::<f64>() {
            return Ok(Value::Float(x));
        }
    }
    Ok(Value::Str(s.to_string()))
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, ch) in line.char_indices() {
        match (quote, ch) {
            (Some(q), c) if c == q => quote = None,
            (Some(_), _) => {}
            (None, '\'' | '"') => quote = Some(ch),
            (None, '#') => return &line[..i],
            _ => {}
        }
    }
    line
}

/// `(dotted key, value, line number)` entries in file order.
pub fn parse_document(text: &str) -> Result<Vec<(String, Value, usize)>, String> {
    let mut out = Vec::new();
    let mut section: Option<String> = None;
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = strip_comment(raw).trim_end();
        if line.trim().is_empty() {
            continue;
        }
        let indented = line.starts_with([' ', '\t']);
        let (key, value) =
            line.trim().split_once(':').ok_or_else(|| format!("line {line_no}: expected `key: value`, got `{}`", line.trim()))?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(format!("line {line_no}: bad key `{key}`"));
        }
        let value = value.trim();
        if !indented {
            section = None;
        }
        if value.is_empty() {
            if indented {
                return Err(format!("line {line_no}: sections nest only one level"));
            }
            section = Some(key.to_string());
            continue;
        }
        let full = match (&section, indented) {
            (Some(s), true) => format!("{s}.{key}"),
            (None, true) => return Err(format!("line {line_no}: indented `{key}` outside a section")),
            (_, false) => key.to_string(),
        };
        let v = parse_value(value).map_err(|e| format!("line {line_no}: {e}"))?;
        out.push((full, v, line_no));
    }
    Ok(out)
}

/// How `best.ckpt` is chosen among the evaluated epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BestMetric {
    /// Highest AP50 on the test dataset.
    Ap50,
    /// Lowest mean training loss of the epoch.
    Loss,
}

impl BestMetric {
    pub fn name(self) -> &'static str {
        match self {
            BestMetric::Ap50 => "ap50",
            BestMetric::Loss => "loss",
        }
    }
}

impl std::str::FromStr for BestMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ap50" => Ok(BestMetric::Ap50),
            "loss" => Ok(BestMetric::Loss),
            other => Err(format!("unknown best_metric `{other}` (ap50 or loss)")),
        }
    }
}

/// Everything a command needs: the model, datasets and run flags.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model_name: String,
    pub network: String,
    pub task: String,
    pub resume: bool,
    pub gpus: Vec<i64>,
    pub segm_or_bbox: EvalMode,
    pub save_ep: usize,
    pub eval_ep: usize,
    pub best_metric: BestMetric,
    pub debug_train: bool,
    pub save_images: bool,
    pub dice: bool,
    /// Dataset registration file; relative paths resolve against the config
    /// file's directory.
    pub dataset_catalog: PathBuf,
    /// Checkpoints, logs and reports go here.
    pub model_dir: PathBuf,
    pub pretrain: Option<String>,
    pub train_dataset: String,
    pub train_workers: usize,
    pub test_dataset: String,
    pub test_batch_size: usize,
    pub test_epoch: Option<usize>,
    /// Score threshold applied at evaluation and inference.
    pub test_ct_score: f64,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model_name: "coco".into(),
            network: "ro_34".into(),
            task: "circle_snake".into(),
            resume: false,
            gpus: vec![0],
            segm_or_bbox: EvalMode::Segm,
            save_ep: 5,
            eval_ep: 5,
            best_metric: BestMetric::Ap50,
            debug_train: false,
            save_images: false,
            dice: false,
            dataset_catalog: PathBuf::from("registry.json"),
            model_dir: PathBuf::from("runs"),
            pretrain: None,
            train_dataset: "eoeTrain".into(),
            train_workers: 1,
            test_dataset: "eoeTest".into(),
            test_batch_size: 1,
            test_epoch: None,
            test_ct_score: circlesnake::heatmap::EVAL_CT_SCORE,
            model: ModelConfig::default(),
        }
    }
}

/// Every recognized key, in serialization order.
pub const KEYS: &[&str] = &[
    "model",
    "network",
    "task",
    "resume",
    "gpus",
    "seed",
    "dataset_catalog",
    "model_dir",
    "pretrain",
    "debug_train",
    "save_images",
    "dice",
    "heads",
    "segm_or_bbox",
    "ct_score",
    "save_ep",
    "eval_ep",
    "best_metric",
    "train.optim",
    "train.lr",
    "train.milestones",
    "train.gamma",
    "train.batch_size",
    "train.dataset",
    "train.num_workers",
    "train.epoch",
    "train.weight_decay",
    "test.dataset",
    "test.batch_size",
    "test.epoch",
    "test.ct_score",
    "snake.vertices",
    "snake.iterations",
    "snake.width",
    "snake.fusion",
    "snake.head",
    "snake.proposal_jitter",
    "network_cfg.widths",
    "network_cfg.head_conv",
    "network_cfg.top_n",
    "loss.lambda_radius",
    "loss.lambda_off",
    "loss.alpha",
    "loss.beta",
];

fn as_str(v: &Value) -> Result<String, String> {
    match v {
        Value::Str(s) => Ok(s.clone()),
        other => Err(format!("expected a string, got {other}")),
    }
}

fn as_bool(v: &Value) -> Result<bool, String> {
    match v {
        Value::Bool(b) => Ok(*b),
        other => Err(format!("expected true or false, got {other}")),
    }
}

fn as_f64(v: &Value) -> Result<f64, String> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Int(i) => Ok(*i as f64),
        other => Err(format!("expected a number, got {other}")),
    }
}

fn as_usize(v: &Value) -> Result<usize, String> {
    match v {
        Value::Int(i) if *i >= 0 => Ok(*i as usize),
        other => Err(format!("expected a non-negative integer, got {other}")),
    }
}

fn as_usizes(v: &Value) -> Result<Vec<usize>, String> {
    match v {
        Value::Tuple(items) => items.iter().map(as_usize).collect(),
        other => Err(format!("expected a tuple of integers, got {other}")),
    }
}

fn as_array<const N: usize>(v: &Value) -> Result<[usize; N], String> {
    let items = as_usizes(v)?;
    items.try_into().map_err(|items: Vec<usize>| format!("expected {N} entries, got {}", items.len()))
}

fn usizes(v: &[usize]) -> Value {
    Value::Tuple(v.iter().map(|&i| Value::Int(i as i64)).collect())
}

fn path_value(p: &Path) -> Value {
    Value::Str(p.to_string_lossy().into_owned())
}

impl RunConfig {
    /// Sets one recognized key; `Err` carries the reason.
    pub fn set(&mut self, key: &str, v: &Value) -> Result<(), String> {
        let m = &mut self.model;
        match key {
            "model" => self.model_name = as_str(v)?,
            "network" => self.network = as_str(v)?,
            "task" => self.task = as_str(v)?,
            "resume" => self.resume = as_bool(v)?,
            "gpus" => {
                self.gpus = match v {
                    Value::Tuple(items) => items
                        .iter()
                        .map(|i| match i {
                            Value::Int(i) => Ok(*i),
                            other => Err(format!("gpu ids are integers, got {other}")),
                        })
                        .collect::<Result<_, _>>()?,
                    other => return Err(format!("gpus must be a tuple such as (0,), got {other}")),
                }
            }
            "seed" => m.seed = as_usize(v)? as u64,
            "dataset_catalog" => self.dataset_catalog = PathBuf::from(as_str(v)?),
            "model_dir" => self.model_dir = PathBuf::from(as_str(v)?),
            "pretrain" => self.pretrain = Some(as_str(v)?),
            "debug_train" => self.debug_train = as_bool(v)?,
            "save_images" => self.save_images = as_bool(v)?,
            "dice" => self.dice = as_bool(v)?,
            "heads" => {
                let Value::Dict(entries) = v else {
                    return Err(format!("heads must be a dict such as {{'ct_hm': 4, 'radius': 1, 'reg': 2}}, got {v}"));
                };
                for (k, x) in entries {
                    match k.as_str() {
                        "ct_hm" => {
                            m.heads.ct_hm = as_usize(x)?;
                            m.classes = m.heads.ct_hm;
                        }
                        "radius" => m.heads.radius = as_usize(x)?,
                        "reg" => m.heads.reg = as_usize(x)?,
                        other => return Err(format!("unknown head `{other}` (ct_hm, radius or reg)")),
                    }
                }
            }
            "segm_or_bbox" => self.segm_or_bbox = as_str(v)?.parse().map_err(|e: circlesnake::Error| e.to_string())?,
            "ct_score" => m.ct_score = as_f64(v)?,
            "save_ep" => self.save_ep = as_usize(v)?,
            "eval_ep" => self.eval_ep = as_usize(v)?,
            "best_metric" => self.best_metric = as_str(v)?.parse()?,
            "train.optim" => {
                let o = as_str(v)?;
                if o != "adam" {
                    return Err(format!("only the adam optimizer is available, got `{o}`"));
                }
            }
            "train.lr" => m.adam.lr = as_f64(v)?,
            "train.milestones" => m.milestones = as_usizes(v)?,
            "train.gamma" => m.gamma = as_f64(v)?,
            "train.batch_size" => m.batch_size = as_usize(v)?,
            "train.dataset" => self.train_dataset = as_str(v)?,
            "train.num_workers" => self.train_workers = as_usize(v)?,
            "train.epoch" => m.epochs = as_usize(v)?,
            "train.weight_decay" => m.adam.weight_decay = as_f64(v)?,
            "test.dataset" => self.test_dataset = as_str(v)?,
            "test.batch_size" => self.test_batch_size = as_usize(v)?,
            "test.epoch" => self.test_epoch = Some(as_usize(v)?),
            "test.ct_score" => self.test_ct_score = as_f64(v)?,
            "snake.vertices" => m.vertices = as_usize(v)?,
            "snake.iterations" => m.iterations = as_usize(v)?,
            "snake.width" => m.snake_width = as_usize(v)?,
            "snake.fusion" => m.snake_fusion = as_usize(v)?,
            "snake.head" => m.snake_head = as_array(v)?,
            "snake.proposal_jitter" => m.proposal_jitter = as_f64(v)?,
            "network_cfg.widths" => m.backbone.widths = as_array(v)?,
            "network_cfg.head_conv" => m.backbone.head_conv = as_usize(v)?,
            "network_cfg.top_n" => m.top_n = as_usize(v)?,
            "loss.lambda_radius" => m.loss.lambda_radius = as_f64(v)?,
            "loss.lambda_off" => m.loss.lambda_off = as_f64(v)?,
            "loss.alpha" => m.loss.alpha = as_f64(v)?,
            "loss.beta" => m.loss.beta = as_f64(v)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Current value of a recognized key; `None` for unset optional keys.
    pub fn get(&self, key: &str) -> Option<Value> {
        let m = &self.model;
        let s = |x: &str| Some(Value::Str(x.to_string()));
        let f = |x: f64| Some(Value::Float(x));
        let u = |x: usize| Some(Value::Int(x as i64));
        match key {
            "model" => s(&self.model_name),
            "network" => s(&self.network),
            "task" => s(&self.task),
            "resume" => Some(Value::Bool(self.resume)),
            "gpus" => Some(Value::Tuple(self.gpus.iter().map(|&g| Value::Int(g)).collect())),
            "seed" => Some(Value::Int(m.seed as i64)),
            "dataset_catalog" => Some(path_value(&self.dataset_catalog)),
            "model_dir" => Some(path_value(&self.model_dir)),
            "pretrain" => self.pretrain.as_deref().and_then(s),
            "debug_train" => Some(Value::Bool(self.debug_train)),
            "save_images" => Some(Value::Bool(self.save_images)),
            "dice" => Some(Value::Bool(self.dice)),
            "heads" => Some(Value::Dict(vec![
                ("ct_hm".into(), Value::Int(m.heads.ct_hm as i64)),
                ("radius".into(), Value::Int(m.heads.radius as i64)),
                ("reg".into(), Value::Int(m.heads.reg as i64)),
            ])),
            "segm_or_bbox" => s(self.segm_or_bbox.name()),
            "ct_score" => f(m.ct_score),
            "save_ep" => u(self.save_ep),
            "eval_ep" => u(self.eval_ep),
            "best_metric" => s(self.best_metric.name()),
            "train.optim" => s("adam"),
            "train.lr" => f(m.adam.lr),
            "train.milestones" => Some(usizes(&m.milestones)),
            "train.gamma" => f(m.gamma),
            "train.batch_size" => u(m.batch_size),
            "train.dataset" => s(&self.train_dataset),
            "train.num_workers" => u(self.train_workers),
            "train.epoch" => u(m.epochs),
            "train.weight_decay" => f(m.adam.weight_decay),
            "test.dataset" => s(&self.test_dataset),
            "test.batch_size" => u(self.test_batch_size),
            "test.epoch" => self.test_epoch.and_then(u),
            "test.ct_score" => f(self.test_ct_score),
            "snake.vertices" => u(m.vertices),
            "snake.iterations" => u(m.iterations),
            "snake.width" => u(m.snake_width),
            "snake.fusion" => u(m.snake_fusion),
            "snake.head" => Some(usizes(&m.snake_head)),
            "snake.proposal_jitter" => f(m.proposal_jitter),
            "network_cfg.widths" => Some(usizes(&m.backbone.widths)),
            "network_cfg.head_conv" => u(m.backbone.head_conv),
            "network_cfg.top_n" => u(m.top_n),
            "loss.lambda_radius" => f(m.loss.lambda_radius),
            "loss.lambda_off" => f(m.loss.lambda_off),
            "loss.alpha" => f(m.loss.alpha),
            "loss.beta" => f(m.loss.beta),
            _ => None,
        }
    }

    /// Parses a config document. `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let entries = parse_document(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
        let mut cfg = Self::default();
        let mut problems = Vec::new();
        for (key, value, line) in entries {
            if let Err(e) = cfg.set(&key, &value) {
                problems.push(format!("{origin}:{line}: `{key}`: {e}"));
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems.join("\n")));
        }
        Ok(cfg)
    }

    /// Reads a config file; a relative `dataset_catalog` and `model_dir`
    /// resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset_catalog = base.join(&cfg.dataset_catalog);
        cfg.model_dir = base.join(&cfg.model_dir);
        Ok(cfg)
    }

    /// Applies trailing `key value` pairs.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), CliError> {
        if args.len() % 2 != 0 {
            return Err(CliError::Config(format!("override `{}` has no value", args[args.len() - 1])));
        }
        let mut problems = Vec::new();
        for pair in args.chunks_exact(2) {
            let result = parse_value(&pair[1]).and_then(|v| self.set(&pair[0], &v));
            if let Err(e) = result {
                problems.push(format!("override `{} {}`: {e}", pair[0], pair[1]));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems.join("\n")))
        }
    }

    /// Cross-field checks.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.save_ep == 0 || self.eval_ep == 0 {
            return Err(CliError::Config("save_ep and eval_ep must be at least 1".into()));
        }
        if self.task != "circle_snake" {
            return Err(CliError::Config(format!("task `{}` is not available (circle_snake)", self.task)));
        }
        self.model.validate()?;
        Ok(())
    }

    /// The config in the accepted file format.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let Some(v) = self.get(key) else { continue };
            let (sec, name) = key.split_once('.').unwrap_or(("", key));
            if sec != section {
                if !sec.is_empty() {
                    let _ = writeln!(out, "{sec}:");
                }
                section = sec;
            }
            let indent = if sec.is_empty() { "" } else { "    " };
            let _ = writeln!(out, "{indent}{name}: {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const EXAMPLE: &str = "model: 'coco'
network: 'ro_34'     # Syntax: arch_numOfLayers
task: 'circle_snake' # Determines which network to call
resume: false
gpus: (0,) # Must be a tuple

train:
    optim: 'adam'
    lr: 2.5e-4
    milestones: (60, 80, 100, 150)
    gamma: 0.5
    batch_size: 1
    dataset: 'eoeTrain' # Change this to your dataset
    num_workers: 1
    epoch: 200
    weight_decay: 0.0
test:
    dataset: 'eoeTest' # Change this to your dataset
    batch_size: 1

heads: {'ct_hm': 4, 'radius': 1, 'reg': 2}
segm_or_bbox: 'segm'
ct_score: 0.05
save_ep: 5
eval_ep: 5
";

    #[test]
    fn reference_config_parses() {
        let c = RunConfig::parse(EXAMPLE, "example").unwrap();
        assert_eq!(c.model.milestones, vec![60, 80, 100, 150]);
        assert_eq!(c.model.adam.lr, 2.5e-4);
        assert_eq!(c.model.epochs, 200);
        assert_eq!(c.gpus, vec![0]);
        assert_eq!(c.train_dataset, "eoeTrain");
        assert_eq!(c.model.ct_score, 0.05);
        assert_eq!((c.model.heads.ct_hm, c.model.classes), (4, 4));
        c.validate().unwrap();
    }

    #[test]
    fn serialize_parse_identity() {
        let mut c = RunConfig::parse(EXAMPLE, "example").unwrap();
        c.pretrain = Some("ctdet".into());
        c.test_epoch = Some(49);
        c.model.snake_head = [32, 16];
        let again = RunConfig::parse(&c.serialize(), "serialized").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn overrides_follow_run_syntax() {
        let mut c = RunConfig::default();
        let args: Vec<String> = ["train.batch_size", "16", "debug_train", "False", "ct_score", "0.2", "test.epoch", "49"]
            .map(String::from)
            .to_vec();
        c.apply_overrides(&args).unwrap();
        assert_eq!((c.model.batch_size, c.debug_train, c.model.ct_score, c.test_epoch), (16, false, 0.2, Some(49)));
        let err = c.apply_overrides(&["train.batchsize".into(), "16".into()]).unwrap_err().to_string();
        assert!(err.contains("train.batchsize"), "{err}");
        assert!(c.apply_overrides(&["ct_score".into()]).is_err());
    }

    #[test]
    fn unknown_keys_name_their_line() {
        let err = RunConfig::parse("model: 'coco'\ntrain:\n    lr_typo: 0.1\n", "f.yaml").unwrap_err().to_string();
        assert!(err.contains("f.yaml:3") && err.contains("train.lr_typo"), "{err}");
    }

    #[test]
    fn values() {
        assert_eq!(parse_value("(0,)").unwrap(), Value::Tuple(vec![Value::Int(0)]));
        assert_eq!(parse_value("'a # b'").unwrap(), Value::Str("a # b".into()));
        assert_eq!(parse_value("1e-3").unwrap(), Value::Float(1e-3));
        assert_eq!(parse_value("eosTrain").unwrap(), Value::Str("eosTrain".into()));
        assert_eq!(Value::Float(5.0).to_string(), "5.0");
        assert_eq!(strip_comment("a: '#x' # c"), "a: '#x' ");
    }
}
