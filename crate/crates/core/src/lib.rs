//! Differentiable architecture search and cross-domain hyper-parameter
//! adaptation for small Conformer encoder-decoder models.

pub mod data;
pub mod decode;
pub mod error;
pub mod losses;
pub mod ops;
pub mod params;
pub mod pipeline;
pub mod report;
pub mod search;
pub mod supernet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Adam, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
