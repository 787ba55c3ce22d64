//! The synchronous analysis pipeline: extension check, decode, filter gate,
//! classification and CAM rendering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use triage_core::imaging::{blend_overlay, decode_image, render_heatmap, ImageBuffer};
use triage_core::models::{compute_cam, ModelGraph, FILTER_CLASSES, STAGE2_CLASSES, WEIGHTS_FILE};
use triage_core::tensor::Tensor;

use crate::config::{ALLOWED_EXTENSIONS, CLASSIFIER_DIR, FILTER_DIR};
use crate::error::ServiceError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterScores {
    pub valid: f64,
    pub nonvalid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub no_finding: f64,
    pub lung_opacity: f64,
    pub covid19: f64,
}

impl ClassScores {
    fn as_array(&self) -> [f64; 3] {
        [self.no_finding, self.lung_opacity, self.covid19]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Summary {
    InvalidImage,
    NoFinding,
    LungOpacity,
    Covid19,
}

impl Summary {
    fn from_class(index: usize) -> Self {
        [Self::NoFinding, Self::LungOpacity, Self::Covid19][index]
    }
}

/// Pipeline stages in execution order; a result lists those that ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExtensionCheck,
    Decode,
    Filter,
    Classifier,
    Cam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIdentity {
    pub path: String,
    pub sha256: String,
    pub class_names: Vec<String>,
}

/// Both networks, loaded once and shared read-only.
#[derive(Debug)]
pub struct Models {
    pub filter: ModelGraph,
    pub classifier: ModelGraph,
    pub filter_identity: ModelIdentity,
    pub classifier_identity: ModelIdentity,
}

fn load_one(dir: &Path, expected: &[&str]) -> Result<(ModelGraph, ModelIdentity), ServiceError> {
    let weights = dir.join(WEIGHTS_FILE);
    let bytes = std::fs::read(&weights).map_err(|e| ServiceError::MissingCheckpoint {
        path: weights.clone(),
        reason: e.to_string(),
    })?;
    let model = ModelGraph::load(dir).map_err(|e| ServiceError::MissingCheckpoint {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    if model.class_names != expected {
        return Err(ServiceError::MissingCheckpoint {
            path: dir.to_path_buf(),
            reason: format!("expected classes {expected:?}, found {:?}", model.class_names),
        });
    }
    let identity = ModelIdentity {
        path: dir.display().to_string(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        class_names: model.class_names.clone(),
    };
    Ok((model, identity))
}

impl Models {
    /// Loads `model_dir/filter` and `model_dir/classifier`.
    pub fn load(model_dir: &Path) -> Result<Self, ServiceError> {
        let (filter, filter_identity) = load_one(&model_dir.join(FILTER_DIR), &FILTER_CLASSES)?;
        let (classifier, classifier_identity) = load_one(&model_dir.join(CLASSIFIER_DIR), &STAGE2_CLASSES)?;
        Ok(Self {
            filter,
            classifier,
            filter_identity,
            classifier_identity,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub valid: bool,
    pub filter_scores: FilterScores,
    pub class_scores: Option<ClassScores>,
    pub summary: Summary,
    pub pipeline: Vec<Stage>,
    /// Lowercase extension of the upload.
    pub extension: String,
    /// Heatmap and overlay at the upload's dimensions, when classified.
    pub cam: Option<(ImageBuffer, ImageBuffer)>,
}

/// Lowercase extension if it is on the allowlist.
pub fn allowed_extension(filename: &str) -> Option<String> {
    let ext = Path::new(filename).extension()?.to_str()?.to_ascii_lowercase();
    ALLOWED_EXTENSIONS.contains(&ext.as_str()).then_some(ext)
}

fn probabilities(model: &ModelGraph, img: &ImageBuffer) -> Result<(Vec<f64>, Tensor), ServiceError> {
    let x = model.config.preprocess().apply(img, None);
    let [c, h, w] = model.input_shape;
    let out = model.forward(&x.reshape(&[1, c, h, w])?)?;
    let probs = out.probabilities.data().iter().map(|&p| p as f64).collect();
    let feats = out.final_features;
    let shape = feats.shape()[1..].to_vec();
    Ok((probs, feats.reshape(&shape)?))
}

/// Runs the full pipeline on one upload. The classifier never runs unless
/// the filter accepted the image.
pub fn analyze(
    models: &Models,
    bytes: &[u8],
    filename: &str,
    threshold: f64,
    overlay_alpha: f64,
) -> Result<Inference, ServiceError> {
    let mut pipeline = vec![Stage::ExtensionCheck];
    let extension = allowed_extension(filename).ok_or_else(|| ServiceError::NotAnImage {
        detail: format!("extension of {filename:?} is not one of {ALLOWED_EXTENSIONS:?}"),
    })?;
    pipeline.push(Stage::Decode);
    let img = decode_image(bytes).map_err(|e| ServiceError::NotAnImage { detail: e.to_string() })?;

    pipeline.push(Stage::Filter);
    let (fp, _) = probabilities(&models.filter, &img)?;
    let filter_scores = FilterScores {
        valid: fp[0],
        nonvalid: fp[1],
    };
    if filter_scores.valid <= threshold {
        return Ok(Inference {
            valid: false,
            filter_scores,
            class_scores: None,
            summary: Summary::InvalidImage,
            pipeline,
            extension,
            cam: None,
        });
    }

    pipeline.push(Stage::Classifier);
    let (cp, features) = probabilities(&models.classifier, &img)?;
    let class_scores = ClassScores {
        no_finding: cp[0],
        lung_opacity: cp[1],
        covid19: cp[2],
    };
    let best = argmax(&class_scores.as_array());

    pipeline.push(Stage::Cam);
    let map = compute_cam(&features, models.classifier.head_weights(), best, img.height(), img.width())?;
    let heat = render_heatmap(&map)?;
    let overlay = blend_overlay(&img, &heat, overlay_alpha)?;
    Ok(Inference {
        valid: true,
        filter_scores,
        class_scores: Some(class_scores),
        summary: Summary::from_class(best),
        pipeline,
        extension,
        cam: Some((heat, overlay)),
    })
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extension_allowlist_is_case_insensitive() {
        assert_eq!(allowed_extension("a.PNG").as_deref(), Some("png"));
        assert_eq!(allowed_extension("x.ray.jpeg").as_deref(), Some("jpeg"));
        assert_eq!(allowed_extension("scan.bmp"), None);
        assert_eq!(allowed_extension("png"), None);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(Summary::from_class(2), Summary::Covid19);
    }
}
