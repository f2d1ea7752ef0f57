//! Dense `f64` arrays, an eager reverse-mode tape, Adam, central finite
//! differences and a binary parameter container.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use array::RealArray;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use error::{NumError, Result};
pub use gradcheck::{finite_diff_gradient, max_relative_error, relative_error};
pub use graph::{Graph, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{GradientRecord, ParamSet};
