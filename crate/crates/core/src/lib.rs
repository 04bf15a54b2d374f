pub(crate) mod bytes;
pub mod bitstream;
pub mod complexity;
pub mod entropy;
pub mod error;
pub mod integer;
pub mod model;
pub mod pipeline;
pub mod rate;
pub mod tensor;
pub mod video;
pub mod weights;

pub use error::{Error, Result, StreamError};
