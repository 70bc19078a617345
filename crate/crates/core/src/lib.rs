pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod lora;
pub mod losses;
pub mod models;
pub mod optim;
pub mod pipeline;
pub mod projector;
pub mod rng;
pub mod stage_a;
pub mod stage_b;
pub mod tensor;
pub mod token_analysis;

pub use error::{Error, Result};
