//! Editing sessions on top of `reshape-core`: a file-backed project store,
//! fit import, slider edits with conditioning renders, the generation
//! backend protocol (plus a stub backend), and the HTTP service.

pub mod error;
pub mod project;
pub mod protocol;
pub mod server;
pub mod store;
pub mod stub;

pub use error::{Result, ServiceError};
pub use project::{FitDocument, GenerationRecord, HistoryEntry, Project, ReplayReport, Service};
pub use server::Config;

pub(crate) fn now_ms() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}
