//! Chest X-ray triage over HTTP: upload validation, filter gate,
//! classification, CAM artifacts and a disk-backed result history.

pub mod api;
pub mod config;
pub mod demo;
pub mod error;
pub mod pipeline;
pub mod store;

use std::sync::Arc;

pub use api::{router, AppState};
pub use config::ServiceConfig;
pub use error::{ApiError, ErrorBody, ServiceError};
pub use store::{AnalysisResult, ResultStore};

/// Serves `state` on `listener` until the future is dropped or fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).await
}
