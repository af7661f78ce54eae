pub mod analysis;
pub mod attacks;
pub mod datasets;
pub mod error;
pub mod nn;
pub mod sca;
pub mod tensor;

pub use error::{Error, Result};
