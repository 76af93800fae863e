use reshape_core::body::BodyModelError;
use reshape_core::mapping::MappingError;
use reshape_core::render::RenderError;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("project {0} not found")]
    NotFound(String),
    #[error("could not decode reference image: {0}")]
    Decode(String),
    #[error("invalid fit document: {0}")]
    InvalidFit(String),
    #[error("project {0} has no imported fit")]
    NoFit(String),
    #[error("history entry {index} does not exist (project has {len})")]
    NoSuchEntry { index: usize, len: usize },
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Body(#[from] BodyModelError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("prompt {0:?} is not one of the canonical prompts")]
    NonCanonicalPrompt(String),
    #[error("no generation backend configured")]
    NoBackend,
    #[error("generation backend unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: usize, last: String },
    /// Status and body exactly as the backend sent them.
    #[error("generation backend returned {status}: {body}")]
    Backend { status: u16, body: String },
    #[error("generation backend response is malformed: {0}")]
    BadResponse(String),
    #[error("stored state is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;
