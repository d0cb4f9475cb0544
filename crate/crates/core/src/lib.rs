//! Image-text relevance scoring: an LSTM sentence encoder and a
//! sentence-gated image projection mapped into one vector space, trained
//! with a margin hinge or batch-softmax cross-entropy objective.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
