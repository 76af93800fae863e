//! Non-neural machinery for semantic body-shape editing: an SMPL-compatible
//! body model, attribute sliders mapped to shape coefficients, depth-map
//! conditioning, a reference implementation of the conditioning attention,
//! dataset normalization geometry and the shape-editing benchmark metrics.

pub mod attention;
pub mod body;
pub mod dataset;
pub mod exec;
pub mod mapping;
pub mod measure;
pub mod metrics;
pub mod render;

pub use body::{BodyModel, BodyModelError, Mesh, PoseParams, ShapeParams};
pub use exec::Exec;
