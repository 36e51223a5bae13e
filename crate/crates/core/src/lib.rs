//! Content-leakage localization and adaptive attention scaling for
//! style-consistent image generation with shared self-attention.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the default precision.

pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod localizer;
pub mod masks;
pub mod pipeline;
pub mod prompt;
pub mod scalar;
pub mod search;
pub mod shared_attention;
pub mod tensor;

pub use backbone::{Backbone, BackboneConfig, LayerId, MockBackbone, MockSpec};
pub use error::{Error, Result};
pub use localizer::{LeakageReport, Thresholds};
pub use pipeline::{Pipeline, RunConfig};
pub use prompt::PromptSpec;
pub use scalar::Scalar;
pub use search::{binary_search_scale, AlignmentTrace, SearchConfig};
pub use tensor::{Grid, Matrix};

/// Default scalar precision.
pub type Real = f64;
/// Single-precision alternative.
pub type RealF32 = f32;

pub type RealMatrix = Matrix<Real>;
pub type MatrixF32 = Matrix<f32>;
pub type RealReport = LeakageReport<Real>;
