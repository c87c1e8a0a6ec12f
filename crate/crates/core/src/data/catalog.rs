//! Whole-image split assignment, per-split class counts and the dataset
//! registration file.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::coco::CocoDocument;
use super::tiling::parse_patch_file_name;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train, val or test)"))),
        }
    }
}

/// Split assignment per whole-slide image id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub assignment: BTreeMap<String, Split>,
}

impl DatasetCatalog {
    pub fn split_of(&self, wsi: &str) -> Option<Split> {
        self.assignment.get(wsi).copied()
    }

    pub fn members(&self, split: Split) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &s)| s == split).map(|(k, _)| k.as_str()).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[s.index()] += 1;
        }
        c
    }
}

/// Largest-remainder apportionment of `n` items to `ratios`; leftover units go
/// to the largest fractional parts, earlier entries first on ties.
pub fn apportion(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.is_empty() || ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(Error::contract(format!("split ratios must be positive, got {ratios:?}")));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    let mut seats: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let left = n - seats.iter().sum::<usize>();
    for &i in order.iter().take(left) {
        seats[i] += 1;
    }
    Ok(seats)
}

/// Shuffles the ids with `seed` (after sorting, so input order does not
/// matter) and deals them out train, val, test by largest remainder.
pub fn split_catalog(wsi_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<DatasetCatalog> {
    let mut ids: Vec<String> = wsi_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < Split::ALL.len() {
        return Err(Error::contract(format!(
            "{} whole-slide images cannot fill {} splits",
            ids.len(),
            Split::ALL.len()
        )));
    }
    let seats = apportion(ids.len(), &ratios)?;
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, n) in Split::ALL.into_iter().zip(seats) {
        for id in it.by_ref().take(n) {
            assignment.insert(id, split);
        }
    }
    Ok(DatasetCatalog { assignment })
}

/// Annotation counts per class and split, with totals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountTable {
    pub classes: Vec<String>,
    /// `counts[class][split]`.
    pub counts: Vec<[u64; 3]>,
}

impl CountTable {
    pub fn zeros(classes: Vec<String>) -> Self {
        let counts = vec![[0; 3]; classes.len()];
        Self { classes, counts }
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn column_total(&self, split: Split) -> u64 {
        self.counts.iter().map(|r| r[split.index()]).sum()
    }

    pub fn grand_total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Checks printed totals (`row_totals` per class, `column_totals` per
    /// split and the grand total) against the cell counts.
    pub fn check_totals(&self, row_totals: &[u64], column_totals: [u64; 3], grand: u64) -> Result<()> {
        let mut problems = Vec::new();
        for (i, &t) in row_totals.iter().enumerate() {
            if self.row_total(i) != t {
                problems.push(format!("{}: cells sum to {}, total says {t}", self.classes[i], self.row_total(i)));
            }
        }
        for s in Split::ALL {
            if self.column_total(s) != column_totals[s.index()] {
                problems.push(format!("{s}: cells sum to {}, total says {}", self.column_total(s), column_totals[s.index()]));
            }
        }
        if self.grand_total() != grand || column_totals.iter().sum::<u64>() != grand {
            problems.push(format!("grand total {grand} disagrees with the cells ({})", self.grand_total()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::contract(problems.join("; ")))
        }
    }

    /// A train/val/test/all table with a totals row.
    pub fn render(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max(5);
        let mut s = format!("{:<width$}  {:>9} {:>9} {:>9} {:>9}\n", "", "Train Set", "Val Set", "Test Set", "All Set");
        for (i, c) in self.classes.iter().enumerate() {
            let r = self.counts[i];
            let _ = writeln!(s, "{c:<width$}  {:>9} {:>9} {:>9} {:>9}", r[0], r[1], r[2], self.row_total(i));
        }
        let col = |sp| self.column_total(sp);
        let _ = writeln!(
            s,
            "{:<width$}  {:>9} {:>9} {:>9} {:>9}",
            "Total",
            col(Split::Train),
            col(Split::Val),
            col(Split::Test),
            self.grand_total()
        );
        s
    }
}

/// Counts annotations per class in each split's document. Every image must
/// belong to a whole-slide image assigned to that split.
pub fn catalog_stats(catalog: &DatasetCatalog, docs: &[(Split, &CocoDocument)], class_names: &[String]) -> Result<CountTable> {
    let mut table = CountTable::zeros(class_names.to_vec());
    for (split, doc) in docs {
        let classes = doc.class_index();
        for im in &doc.images {
            let Some((wsi, _)) = parse_patch_file_name(&im.file_name) else {
                continue;
            };
            match catalog.split_of(&wsi) {
                Some(s) if s == *split => {}
                other => {
                    return Err(Error::contract(format!(
                        "image {} of the {split} document belongs to {wsi}, which the catalog puts in {}",
                        im.file_name,
                        other.map_or("no split".to_string(), |s| s.to_string())
                    )))
                }
            }
        }
        for a in &doc.annotations {
            let c = classes[&a.category_id];
            if c >= table.counts.len() {
                return Err(Error::contract(format!("category {} has no row in the table", a.category_id)));
            }
            table.counts[c][split.index()] += 1;
        }
    }
    Ok(table)
}

/// One entry of the dataset registration file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRegistration {
    pub id: String,
    pub data_root: PathBuf,
    pub ann_file: PathBuf,
    pub split: String,
}

/// Dataset name → registration. Names are opaque keys.
pub type DatasetRegistry = BTreeMap<String, DatasetRegistration>;

/// Reads a registration file; relative paths resolve against the file's
/// directory.
pub fn read_registry(path: &Path) -> Result<DatasetRegistry> {
    read_registry_with_base(path, None)
}

/// Like [`read_registry`], resolving relative paths against `base` when given.
pub fn read_registry_with_base(path: &Path, base: Option<&Path>) -> Result<DatasetRegistry> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reg: DatasetRegistry = serde_json::from_str(&text)?;
    let base = base.unwrap_or_else(|| path.parent().unwrap_or(Path::new("")));
    for r in reg.values_mut() {
        if r.data_root.is_relative() {
            r.data_root = base.join(&r.data_root);
        }
        if r.ann_file.is_relative() {
            r.ann_file = base.join(&r.ann_file);
        }
    }
    Ok(reg)
}

pub fn write_registry(path: &Path, reg: &DatasetRegistry) -> Result<()> {
    let text = serde_json::to_string_pretty(reg)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
