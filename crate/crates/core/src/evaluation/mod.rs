//! Confusion matrices, one-vs-rest metrics, multi-run aggregation,
//! embedding extraction and PCA.

mod pca;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::Manifest;
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::models::ModelGraph;
use crate::tensor::{global_avg_pool, Tensor};
use crate::training::{predict, LabeledSet};

pub use pca::{pca_project, PcaProjection};

/// Rows are actual classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(class_names: &[impl AsRef<str>]) -> Self {
        let c = class_names.len();
        Self {
            class_names: class_names.iter().map(|s| s.as_ref().to_owned()).collect(),
            counts: vec![vec![0; c]; c],
        }
    }

    pub fn from_counts(class_names: &[impl AsRef<str>], counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = class_names.len();
        if counts.len() != c || counts.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidInput(format!("confusion counts must be {c}×{c}")));
        }
        Ok(Self {
            counts,
            ..Self::zeros(class_names)
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sum(&self, actual: usize) -> u64 {
        self.counts[actual].iter().sum()
    }

    pub fn column_sum(&self, predicted: usize) -> u64 {
        self.counts.iter().map(|r| r[predicted]).sum()
    }

    /// Fraction of samples on the diagonal; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.num_classes()).map(|i| self.counts[i][i]).sum();
        (total > 0).then(|| diag as f64 / total as f64)
    }

    /// Rows divided by their sums; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let s: u64 = r.iter().sum();
                r.iter().map(|&x| if s == 0 { 0.0 } else { x as f64 / s as f64 }).collect()
            })
            .collect()
    }

    fn add(&mut self, other: &Self) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::InvalidInput(format!(
                "class sets differ: {:?} vs {:?}",
                self.class_names, other.class_names
            )));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(predicted: &[usize], actual: &[usize], class_names: &[impl AsRef<str>]) -> Result<ConfusionMatrix> {
    if predicted.len() != actual.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let mut m = ConfusionMatrix::zeros(class_names);
    let c = m.num_classes();
    for (&p, &a) in predicted.iter().zip(actual) {
        if p >= c || a >= c {
            return Err(Error::InvalidInput(format!("label pair ({a}, {p}) out of range for {c} classes")));
        }
        m.counts[a][p] += 1;
    }
    Ok(m)
}

/// One-vs-rest rates per class. `None` marks a 0/0 ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_names: Vec<String>,
    pub sensitivity: Vec<Option<f64>>,
    pub specificity: Vec<Option<f64>>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn sensitivity_specificity(m: &ConfusionMatrix) -> ClassMetrics {
    let total = m.total();
    let (mut sensitivity, mut specificity) = (Vec::new(), Vec::new());
    for c in 0..m.num_classes() {
        let tp = m.counts[c][c];
        let actual = m.row_sum(c);
        let fp = m.column_sum(c) - tp;
        let negatives = total - actual;
        sensitivity.push(ratio(tp, actual));
        specificity.push(ratio(negatives - fp, negatives));
    }
    ClassMetrics {
        class_names: m.class_names.clone(),
        sensitivity,
        specificity,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    /// Divide by the number of runs.
    #[default]
    Population,
    /// Divide by runs − 1.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Runs where the metric was defined.
    pub runs: usize,
}

impl MeanStd {
    fn of(values: impl IntoIterator<Item = Option<f64>>, spread: Spread) -> Self {
        let xs: Vec<f64> = values.into_iter().flatten().collect();
        let n = xs.len();
        if n == 0 {
            return Self { mean: None, std: None, runs: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        let std = match spread {
            Spread::Population => Some((ss / n as f64).sqrt()),
            Spread::Sample if n > 1 => Some((ss / (n - 1) as f64).sqrt()),
            Spread::Sample => None,
        };
        Self { mean: Some(mean), std, runs: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub summed: ConfusionMatrix,
    /// Ratios of the summed counts.
    pub pooled: ClassMetrics,
    /// Means of per-run ratios, per class.
    pub sensitivity: Vec<MeanStd>,
    pub specificity: Vec<MeanStd>,
    pub accuracy: MeanStd,
    pub spread: Spread,
}

pub fn aggregate_runs(matrices: &[ConfusionMatrix], spread: Spread) -> Result<RunAggregate> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidInput("no runs to aggregate".into()))?;
    let mut summed = ConfusionMatrix::zeros(&first.class_names);
    for m in matrices {
        summed.add(m)?;
    }
    let per_run: Vec<ClassMetrics> = matrices.iter().map(sensitivity_specificity).collect();
    let c = first.num_classes();
    Ok(RunAggregate {
        runs: matrices.len(),
        pooled: sensitivity_specificity(&summed),
        summed,
        sensitivity: (0..c)
            .map(|k| MeanStd::of(per_run.iter().map(|r| r.sensitivity[k]), spread))
            .collect(),
        specificity: (0..c)
            .map(|k| MeanStd::of(per_run.iter().map(|r| r.specificity[k]), spread))
            .collect(),
        accuracy: MeanStd::of(matrices.iter().map(ConfusionMatrix::accuracy), spread),
        spread,
    })
}

/// Argmax predictions of `model` on `set`.
pub fn evaluate_model(model: &ModelGraph, set: &LabeledSet, batch_size: usize) -> Result<ConfusionMatrix> {
    let predicted = predict(model, &set.images, batch_size)?.argmax_rows()?;
    confusion_matrix(&predicted, &set.labels, &model.class_names)
}

/// Drops records the filter does not accept (valid score at or below
/// `threshold`) or that fail to decode. Returns the kept manifest and the
/// indices of removed records.
pub fn filter_clean(manifest: &Manifest, filter: &ModelGraph, threshold: f64) -> Result<(Manifest, Vec<usize>)> {
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (i, record) in manifest.records.iter().enumerate() {
        let accepted = match manifest.load_image(i) {
            Ok(img) => predict(filter, std::slice::from_ref(&img), 1)?.data()[0] as f64 > threshold,
            Err(e) => {
                tracing::warn!(row = i, error = %e, "undecodable image removed");
                false
            }
        };
        if accepted {
            kept.push(record.clone());
        } else {
            removed.push(i);
        }
    }
    Ok((manifest.with_records(kept), removed))
}

/// Global-average-pooled final features, one row per image.
pub fn embed_images(model: &ModelGraph, images: &[ImageBuffer], batch_size: usize) -> Result<Tensor> {
    let pre = model.config.preprocess();
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = Tensor::stack(&chunk.iter().map(|img| pre.apply(img, None)).collect::<Vec<_>>())?;
        let pooled = global_avg_pool(&model.forward(&batch)?.final_features)?;
        width = pooled.shape()[1];
        rows.extend_from_slice(pooled.data());
    }
    Tensor::new(vec![images.len(), width], rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingExport {
    pub vectors: Vec<Vec<f32>>,
    /// `(label, sample id)` per vector row.
    pub metadata: Vec<(String, String)>,
    /// Manifest rows that failed to decode.
    pub skipped: Vec<usize>,
}

/// Embeds `indices` of `manifest` in order. Undecodable rows are logged and
/// skipped; sample ids are the manifest image paths.
pub fn extract_embeddings(model: &ModelGraph, manifest: &Manifest, indices: &[usize]) -> Result<EmbeddingExport> {
    let mut images = Vec::new();
    let mut metadata = Vec::new();
    let mut skipped = Vec::new();
    for &i in indices {
        match manifest.load_image(i) {
            Ok(img) => {
                images.push(img);
                let r = &manifest.records[i];
                metadata.push((r.label.to_string(), r.image_path.clone()));
            }
            Err(e) => {
                tracing::warn!(row = i, error = %e, "skipping undecodable image");
                skipped.push(i);
            }
        }
    }
    let emb = embed_images(model, &images, 32)?;
    let width = emb.shape()[1];
    Ok(EmbeddingExport {
        vectors: emb.data().chunks(width.max(1)).take(images.len()).map(<[f32]>::to_vec).collect(),
        metadata,
        skipped,
    })
}

/// Writes `vectors.tsv` (no header) and `metadata.tsv` (header `label\tid`).
pub fn write_projector(dir: &Path, export: &EmbeddingExport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, body: String| {
        let path = dir.join(name);
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(body.as_bytes()))
            .map_err(|e| Error::io(&path, e))
    };
    let mut vectors = String::new();
    for row in &export.vectors {
        let line: Vec<String> = row.iter().map(f32::to_string).collect();
        vectors.push_str(&line.join("\t"));
        vectors.push('\n');
    }
    let mut metadata = String::from("label\tid\n");
    for (label, id) in &export.metadata {
        metadata.push_str(&format!("{}\t{}\n", clean_field(label), clean_field(id)));
    }
    write("vectors.tsv", vectors)?;
    write("metadata.tsv", metadata)
}

fn clean_field(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

#[cfg(test)]
mod tests;
