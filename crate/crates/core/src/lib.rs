//! Tactile nodule detection for a four-sensor capsule.
//!
//! Pipeline: [`synth`] traces (or recorded CSVs) are turned into fixed-size
//! feature matrices by [`preprocess`], per-size templates are fitted with the
//! particle search in [`template`], new traces are classified by
//! [`detector`], and [`eval`] aggregates the results.

pub mod detector;
pub mod error;
pub mod eval;
pub mod io;
pub mod matcher;
pub mod matrix;
pub mod particle;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod template;

pub use detector::{classify, detect_presence, DetectionResult};
pub use error::{Error, Result};
pub use matcher::{best_alignment, sliding_rmse_profile, AlignmentResult, Matcher};
pub use matrix::Matrix;
pub use particle::{ParamBounds, ParticleParams};
pub use preprocess::{preprocess, FeatureMatrix, PreprocessConfig, TraceSet};
pub use synth::{generate_trace_set, PhantomConfig};
pub use template::{build_library, FitConfig, TemplateLibrary};
