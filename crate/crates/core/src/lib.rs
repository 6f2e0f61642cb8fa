pub mod attention;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::{Adam, ParamId, ParamStore, Tape, Tensor, Var};
