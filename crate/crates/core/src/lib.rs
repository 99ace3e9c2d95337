pub mod augment;
pub mod backbone;
pub mod data;
pub mod emf;
pub mod error;
pub mod genfinetune;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod peft;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
