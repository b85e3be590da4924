pub mod alignment;
pub mod anchors;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
