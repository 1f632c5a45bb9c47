pub mod autograd;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod grpo;
pub mod maskdec;
pub mod model;
pub mod nn;
pub mod params;
pub mod policy;
pub mod prior;
pub mod rewards;
pub mod segloss;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
