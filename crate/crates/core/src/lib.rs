pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod film;
pub mod forge;
pub mod grpo;
pub mod harness;
pub mod info;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod quant;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
