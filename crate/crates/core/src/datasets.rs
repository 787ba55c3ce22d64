//! Manifests, labels, splits and per-epoch sampling plans.
//!
//! Manifest CSV header: `image_path,dataset_id,patient_id,label,view,split`.
//! Paths are relative to the manifest's directory. A path ending in
//! `#rot90`, `#rot180` or `#rot270` names a clockwise quarter-turned copy of
//! the file before the `#`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, RowIssue};
use crate::imaging::{decode_image, rotate_quarter, ImageBuffer};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal $(| $alias:literal)*),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text $(| $alias)* => Ok(Self::$variant),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($name))),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Cohen,
    Figure1,
    ChestXray,
    Rsna,
    Local,
}

string_enum!(DatasetId {
    Cohen => "cohen",
    Figure1 => "figure1",
    ChestXray => "chest_xray",
    Rsna => "rsna",
    Local => "local",
});

impl DatasetId {
    pub fn requires_patient_id(self) -> bool {
        matches!(self, Self::Cohen | Self::Figure1)
    }
}

/// Harmonized labels plus the two source-repository labels that
/// [`harmonize_labels`] rewrites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NoFinding,
    LungOpacity,
    Covid19,
    Valid,
    Nonvalid,
    Normal,
    Pneumonia,
}

string_enum!(Label {
    NoFinding => "no_finding",
    LungOpacity => "lung_opacity",
    Covid19 => "covid19",
    Valid => "valid",
    Nonvalid => "nonvalid",
    Normal => "normal",
    Pneumonia => "pneumonia" | "viral_pneumonia" | "bacterial_pneumonia",
});

impl Label {
    pub fn task(self) -> Task {
        match self {
            Self::Valid | Self::Nonvalid => Task::Filter,
            _ => Task::Classifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "other")]
    Other,
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_uppercase().as_str() {
            "AP" => Ok(Self::Ap),
            "PA" => Ok(Self::Pa),
            "OTHER" => Ok(Self::Other),
            other => Err(format!("unknown view `{other}`")),
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Ap => "AP",
            Self::Pa => "PA",
            Self::Other => "other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

string_enum!(Split {
    Train => "train",
    Validation => "validation" | "val",
    Test => "test",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Filter,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub dataset_id: DatasetId,
    pub patient_id: Option<String>,
    pub label: Label,
    pub view: Option<View>,
    /// Explicit split column, used by the predefined strategy.
    pub split: Option<Split>,
}

impl SampleRecord {
    /// File path and clockwise quarter turns encoded by a `#rotN` suffix.
    pub fn source(&self) -> (&str, u8) {
        for (suffix, turns) in [("#rot90", 1), ("#rot180", 2), ("#rot270", 3)] {
            if let Some(path) = self.image_path.strip_suffix(suffix) {
                return (path, turns);
            }
        }
        (&self.image_path, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    pub task: Task,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

#[derive(Deserialize)]
struct RawRow {
    image_path: String,
    dataset_id: String,
    #[serde(default)]
    patient_id: String,
    label: String,
    #[serde(default)]
    view: String,
    #[serde(default)]
    split: String,
}

fn non_empty(s: &str) -> Option<&str> {
    let t = s.trim();
    (!t.is_empty()).then_some(t)
}

/// Duplicate paths, missing patient ids and labels outside `task`, keyed by
/// each record's row number.
fn record_issues<'a>(rows: impl Iterator<Item = (usize, &'a SampleRecord)>, task: Task) -> Vec<RowIssue> {
    let mut issues = Vec::new();
    let mut seen = HashSet::new();
    for (row, r) in rows {
        if !seen.insert(r.image_path.as_str()) {
            issues.push(RowIssue {
                row,
                message: format!("duplicate image_path `{}`", r.image_path),
            });
        }
        if r.dataset_id.requires_patient_id() && r.patient_id.is_none() {
            issues.push(RowIssue {
                row,
                message: format!("dataset `{}` requires a patient_id", r.dataset_id),
            });
        }
        if r.label.task() != task {
            issues.push(RowIssue {
                row,
                message: format!("label `{}` does not belong to the {task:?} task", r.label),
            });
        }
    }
    issues
}

fn infer_task(records: &[SampleRecord]) -> Task {
    records.first().map(|r| r.label.task()).unwrap_or(Task::Classifier)
}

impl Manifest {
    /// Validates records; `task` is inferred from the first label when `None`.
    pub fn new(records: Vec<SampleRecord>, task: Option<Task>, root: PathBuf) -> Result<Self> {
        let task = task.unwrap_or_else(|| infer_task(&records));
        let issues = record_issues(records.iter().enumerate().map(|(i, r)| (i + 1, r)), task);
        if !issues.is_empty() {
            return Err(Error::ManifestValidation(issues));
        }
        Ok(Self { records, task, root })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self {
            records,
            task: self.task,
            root: self.root.clone(),
        }
    }

    /// Decodes the record's image and applies any quarter turns.
    pub fn load_image(&self, index: usize) -> Result<ImageBuffer> {
        let (path, turns) = self.records[index].source();
        let full = self.root.join(path);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        Ok(rotate_quarter(&decode_image(&bytes)?, turns))
    }
}

pub fn parse_manifest(csv_text: &[u8], root: PathBuf, task: Option<Task>) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(csv_text);
    let mut records = Vec::new();
    let mut row_numbers = Vec::new();
    let mut issues = Vec::new();
    for (i, row) in reader.deserialize::<RawRow>().enumerate() {
        let row_no = i + 1;
        let raw = match row {
            Ok(r) => r,
            Err(e) => {
                issues.push(RowIssue {
                    row: row_no,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let mut problem = |m: String| issues.push(RowIssue { row: row_no, message: m });
        let dataset_id = raw.dataset_id.parse::<DatasetId>().map_err(&mut problem).ok();
        let label = raw.label.parse::<Label>().map_err(&mut problem).ok();
        let view = non_empty(&raw.view).map(str::parse::<View>).transpose().map_err(&mut problem);
        let split = non_empty(&raw.split).map(str::parse::<Split>).transpose().map_err(&mut problem);
        if non_empty(&raw.image_path).is_none() {
            problem("empty image_path".into());
        }
        if let (Some(dataset_id), Some(label), Ok(view), Ok(split)) = (dataset_id, label, view, split) {
            records.push(SampleRecord {
                image_path: raw.image_path,
                dataset_id,
                patient_id: non_empty(&raw.patient_id).map(str::to_string),
                label,
                view,
                split,
            });
            row_numbers.push(row_no);
        }
    }
    let task = task.unwrap_or_else(|| infer_task(&records));
    issues.extend(record_issues(row_numbers.iter().copied().zip(&records), task));
    if !issues.is_empty() {
        issues.sort_by_key(|i| i.row);
        return Err(Error::ManifestValidation(issues));
    }
    Ok(Manifest { records, task, root })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&bytes, root, None)?;
    tracing::info!(path = %path.display(), counts = ?manifest.class_counts(), "loaded manifest");
    Ok(manifest)
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_path", "dataset_id", "patient_id", "label", "view", "split"])?;
    for r in &manifest.records {
        w.write_record([
            r.image_path.as_str(),
            r.dataset_id.as_str(),
            r.patient_id.as_deref().unwrap_or(""),
            r.label.as_str(),
            &r.view.map(|v| v.to_string()).unwrap_or_default(),
            r.split.map(Split::as_str).unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Normal → no_finding, Pneumonia → lung_opacity. Idempotent.
pub fn harmonize_labels(manifest: &Manifest) -> Manifest {
    relabel(manifest, |l| match l {
        Label::Normal => Label::NoFinding,
        Label::Pneumonia => Label::LungOpacity,
        other => other,
    })
}

/// covid19 → lung_opacity for the first training stage. Idempotent.
pub fn stage1_relabel(manifest: &Manifest) -> Manifest {
    relabel(manifest, |l| if l == Label::Covid19 { Label::LungOpacity } else { l })
}

fn relabel(manifest: &Manifest, f: impl Fn(Label) -> Label) -> Manifest {
    manifest.with_records(
        manifest
            .records
            .iter()
            .map(|r| SampleRecord {
                label: f(r.label),
                ..r.clone()
            })
            .collect(),
    )
}

/// Adds quarter-turned, `nonvalid` copies of a seeded random subset
/// (`round(fraction·n)`) of the `valid` records, three per source.
pub fn synthesize_filter_negatives(manifest: &Manifest, fraction: f64, seed: u64) -> Result<Manifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("fraction {fraction} outside [0, 1]")));
    }
    let sources: Vec<usize> = (0..manifest.len())
        .filter(|&i| manifest.records[i].label == Label::Valid && manifest.records[i].source().1 == 0)
        .collect();
    let take = (fraction * sources.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = sources.choose_multiple(&mut rng, take).copied().collect();
    chosen.sort_unstable();
    let mut records = manifest.records.clone();
    for i in chosen {
        let src = &manifest.records[i];
        for deg in [90, 180, 270] {
            records.push(SampleRecord {
                image_path: format!("{}#rot{deg}", src.image_path),
                label: Label::Nonvalid,
                split: src.split,
                ..src.clone()
            });
        }
    }
    Manifest::new(records, Some(manifest.task), manifest.root.clone())
}

/// Train, validation and test fractions.
pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.8, 0.1, 0.1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStrategy {
    ByPatient,
    Random,
    Predefined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    /// One entry per manifest record.
    pub splits: Vec<Split>,
    pub seed: u64,
    pub strategy: SplitStrategy,
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.splits.len()).filter(|&i| self.splits[i] == which).collect()
    }
}

/// `(validation, test)` unit counts: both rounded down, remainder to train.
fn cut_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let val = (n as f64 * ratios.1 / total).floor() as usize;
    let test = (n as f64 * ratios.2 / total).floor() as usize;
    (val, test)
}

/// Shuffles `units` with `seed` and deals them validation, test, then train.
fn assign_units<K: Clone + Ord + std::hash::Hash>(
    mut units: Vec<K>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> HashMap<K, Split> {
    units.sort();
    units.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, test) = cut_counts(units.len(), ratios);
    units
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let s = if i < val {
                Split::Validation
            } else if i < val + test {
                Split::Test
            } else {
                Split::Train
            };
            (k, s)
        })
        .collect()
}

fn validate_ratios(ratios: (f64, f64, f64)) -> Result<()> {
    let ok = [ratios.0, ratios.1, ratios.2].iter().all(|r| r.is_finite() && *r >= 0.0)
        && ratios.0 + ratios.1 + ratios.2 > 0.0;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("invalid split ratios {ratios:?}")))
    }
}

/// Splits the records in `subset` (indices into the manifest).
fn split_subset(
    manifest: &Manifest,
    subset: &[usize],
    strategy: SplitStrategy,
    ratios: (f64, f64, f64),
    seed: u64,
    out: &mut [Split],
) -> Result<()> {
    match strategy {
        SplitStrategy::ByPatient => {
            let mut patients = BTreeSet::new();
            for &i in subset {
                let r = &manifest.records[i];
                let id = r.patient_id.as_deref().ok_or_else(|| {
                    Error::InvalidInput(format!("by_patient split needs a patient_id on `{}`", r.image_path))
                })?;
                patients.insert(id);
            }
            let map = assign_units(patients.into_iter().collect(), ratios, seed);
            for &i in subset {
                out[i] = map[manifest.records[i].patient_id.as_deref().unwrap()];
            }
        }
        SplitStrategy::Random => {
            let map = assign_units(subset.to_vec(), ratios, seed);
            for &i in subset {
                out[i] = map[&i];
            }
        }
        SplitStrategy::Predefined => {
            for &i in subset {
                let r = &manifest.records[i];
                out[i] = r.split.ok_or_else(|| {
                    Error::InvalidInput(format!("predefined split but `{}` has no split value", r.image_path))
                })?;
            }
        }
    }
    Ok(())
}

pub fn split(manifest: &Manifest, strategy: SplitStrategy, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    validate_ratios(ratios)?;
    let all: Vec<usize> = (0..manifest.len()).collect();
    let mut splits = vec![Split::Train; manifest.len()];
    split_subset(manifest, &all, strategy, ratios, seed, &mut splits)?;
    Ok(SplitAssignment {
        warnings: empty_class_warnings(manifest, &splits),
        splits,
        seed,
        strategy,
    })
}

/// Strategy each source repository is split with: patient-level where
/// patient ids exist, random for RSNA, and the shipped split for Chest X-Ray.
pub fn protocol_strategy(dataset: DatasetId) -> SplitStrategy {
    match dataset {
        DatasetId::Cohen | DatasetId::Figure1 | DatasetId::Local => SplitStrategy::ByPatient,
        DatasetId::Rsna => SplitStrategy::Random,
        DatasetId::ChestXray => SplitStrategy::Predefined,
    }
}

/// Splits each dataset with its [`protocol_strategy`]. `local` records fall
/// back to a random split when any of them lacks a patient id.
pub fn split_by_protocol(manifest: &Manifest, ratios: (f64, f64, f64), seed: u64) -> Result<SplitAssignment> {
    validate_ratios(ratios)?;
    let mut by_dataset: BTreeMap<DatasetId, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_dataset.entry(r.dataset_id).or_default().push(i);
    }
    let mut splits = vec![Split::Train; manifest.len()];
    for (dataset, subset) in &by_dataset {
        let mut strategy = protocol_strategy(*dataset);
        if *dataset == DatasetId::Local && subset.iter().any(|&i| manifest.records[i].patient_id.is_none()) {
            strategy = SplitStrategy::Random;
        }
        split_subset(manifest, subset, strategy, ratios, seed ^ *dataset as u64, &mut splits)?;
    }
    Ok(SplitAssignment {
        warnings: empty_class_warnings(manifest, &splits),
        splits,
        seed,
        strategy: SplitStrategy::ByPatient,
    })
}

/// Classes with at least three patients (or records, when unidentified)
/// that end up absent from some split.
fn empty_class_warnings(manifest: &Manifest, splits: &[Split]) -> Vec<String> {
    let mut units: BTreeMap<Label, HashSet<String>> = BTreeMap::new();
    let mut present: HashSet<(Label, Split)> = HashSet::new();
    for (r, &s) in manifest.records.iter().zip(splits) {
        let unit = r.patient_id.clone().unwrap_or_else(|| r.image_path.clone());
        units.entry(r.label).or_default().insert(unit);
        present.insert((r.label, s));
    }
    let mut warnings = Vec::new();
    for (label, u) in units {
        if u.len() < 3 {
            continue;
        }
        for s in [Split::Train, Split::Validation, Split::Test] {
            if !present.contains(&(label, s)) {
                warnings.push(format!("class {label} has no samples in the {s} split"));
            }
        }
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }
    warnings
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingTarget {
    /// Every class gets the same number of draws per epoch.
    Equalized,
    /// A plain shuffle of the available records.
    Natural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    /// Manifest indices in draw order; may repeat under `Equalized`.
    pub indices: Vec<usize>,
    /// Draws per class, in the order of the `classes` argument.
    pub draws_per_class: Vec<usize>,
}

/// Per-epoch draw order over `pool` (manifest indices, normally the training
/// split). See [`sampling_plan`] for the draw rules.
pub fn make_sampling_plan(
    manifest: &Manifest,
    pool: &[usize],
    classes: &[Label],
    target: SamplingTarget,
    epoch_len: Option<usize>,
    seed: u64,
) -> Result<SamplingPlan> {
    let labels = pool
        .iter()
        .map(|&i| {
            let label = manifest.records[i].label;
            classes.iter().position(|&l| l == label).ok_or_else(|| {
                Error::InvalidInput(format!("label {label} is not among the model classes {classes:?}"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if target == SamplingTarget::Equalized {
        if let Some(c) = (0..classes.len()).find(|c| !labels.contains(c)) {
            return Err(Error::InvalidInput(format!("class {} has no samples to oversample", classes[c])));
        }
    }
    let mut plan = sampling_plan(&labels, classes.len(), target, epoch_len, seed)?;
    for i in &mut plan.indices {
        *i = pool[*i];
    }
    Ok(plan)
}

/// Draw order over positions `0..labels.len()`, where `labels[i]` is a class
/// index below `num_classes`.
///
/// `Equalized` gives each class a quota of `epoch_len / C` draws (the
/// default epoch length is `C × largest class`), taken from successive
/// shuffled passes over that class, so a record repeats at most once more
/// than any other record of its class. Leftover draws go to distinct,
/// randomly chosen classes. `Natural` is a plain shuffle.
pub fn sampling_plan(
    labels: &[usize],
    num_classes: usize,
    target: SamplingTarget,
    epoch_len: Option<usize>,
    seed: u64,
) -> Result<SamplingPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &c) in labels.iter().enumerate() {
        per_class
            .get_mut(c)
            .ok_or_else(|| Error::InvalidInput(format!("class index {c} out of range")))?
            .push(i);
    }
    match target {
        SamplingTarget::Natural => {
            let mut indices: Vec<usize> = (0..labels.len()).collect();
            indices.shuffle(&mut rng);
            Ok(SamplingPlan {
                indices,
                draws_per_class: per_class.iter().map(Vec::len).collect(),
            })
        }
        SamplingTarget::Equalized => {
            if let Some(c) = per_class.iter().position(Vec::is_empty) {
                return Err(Error::InvalidInput(format!("class index {c} has no samples to oversample")));
            }
            let c = num_classes;
            let len = epoch_len.unwrap_or_else(|| c * per_class.iter().map(Vec::len).max().unwrap_or(0));
            let mut quota = vec![len / c; c];
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut rng);
            for &k in order.iter().take(len % c) {
                quota[k] += 1;
            }
            let mut indices = Vec::with_capacity(len);
            for (members, &q) in per_class.iter().zip(&quota) {
                let mut pass = members.clone();
                let mut drawn = 0;
                while drawn < q {
                    pass.shuffle(&mut rng);
                    let take = (q - drawn).min(pass.len());
                    indices.extend_from_slice(&pass[..take]);
                    drawn += take;
                }
            }
            indices.shuffle(&mut rng);
            Ok(SamplingPlan {
                indices,
                draws_per_class: quota,
            })
        }
    }
}

/// Independent per-epoch seed for sampling plans.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::imaging::derive_seed(seed, &[0x5a4d_504c, epoch as u64])
}
