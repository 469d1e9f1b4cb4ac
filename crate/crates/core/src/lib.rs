//! AMCEN: temporal knowledge graph extrapolation that first decides whether a query is a
//! recurring or a new event and then ranks candidates from the matching entity pool.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! common choices.

pub mod autograd;
pub mod checkpoint;
pub mod classifier;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod history;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod structural;
pub mod synthetic;
pub mod temporal;
pub mod tensor;
pub mod training;

pub use config::{AblationFlags, Composition, RunConfig, TrainConfig};
pub use dataset::{Dataset, Quadruple, SnapshotSequence, Split, Vocabulary};
pub use error::{AmcenError, Result};
pub use history::{FrequencyIndex, MaskVector};
pub use model::{Model, ModelShape};
pub use params::{ParamGroup, ParameterStore};
pub use scalar::Scalar;
pub use tensor::Matrix;

/// Double-precision model, used for gradient checks and the default CLI runs.
pub type Amcen = Model<f64>;
/// Single-precision model.
pub type AmcenF32 = Model<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
