use std::ffi::OsString;
use std::path::PathBuf;

pub const DEFAULT_MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.5;
pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.4;
/// Overrides the store directory when set.
pub const STORE_ENV: &str = "XRAY_TRIAGE_STORE";
/// Lowercase extensions accepted before any decoding is attempted.
pub const ALLOWED_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Subdirectory of the model directory holding the filter checkpoint.
pub const FILTER_DIR: &str = "filter";
/// Subdirectory of the model directory holding the classifier checkpoint.
pub const CLASSIFIER_DIR: &str = "classifier";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub model_dir: PathBuf,
    pub store_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// An upload is valid iff its filter `valid` score exceeds this.
    pub filter_threshold: f64,
    pub overlay_alpha: f64,
    /// Keep at most this many records, evicting the oldest.
    pub retention: Option<usize>,
}

impl ServiceConfig {
    pub fn new(model_dir: impl Into<PathBuf>, store_dir: impl Into<PathBuf>) -> Self {
        Self {
            model_dir: model_dir.into(),
            store_dir: store_dir.into(),
            max_upload_bytes: DEFAULT_MAX_UPLOAD_BYTES,
            filter_threshold: DEFAULT_FILTER_THRESHOLD,
            overlay_alpha: DEFAULT_OVERLAY_ALPHA,
            retention: None,
        }
    }

    /// Applies [`STORE_ENV`] from the process environment.
    pub fn with_env_override(self) -> Self {
        self.with_store_override(std::env::var_os(STORE_ENV))
    }

    /// A non-empty override replaces the configured store directory.
    pub fn with_store_override(mut self, value: Option<OsString>) -> Self {
        if let Some(v) = value.filter(|v| !v.is_empty()) {
            self.store_dir = PathBuf::from(v);
        }
        self
    }
}
