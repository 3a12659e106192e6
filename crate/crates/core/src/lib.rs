//! Knowledge editing in a toy transformer, with embedding-drift robustness
//! benchmarking and drift-aware value optimization.

pub mod corpus;
pub mod editor;
pub mod evkalign;
pub mod evkbench;
pub mod experiment;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;

pub use linalg::{Matrix, RngStream, Vector};
pub use model::{ModelConfig, ModelError, ToyModel};
