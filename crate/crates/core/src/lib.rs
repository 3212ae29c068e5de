//! Hybrid CTC/attention speech recognition with intermediate-CTC dialect
//! identification, joint beam decoding with language-model fusion, and
//! CTC-segmentation alignment.

pub mod autodiff;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod error;
pub mod harness;
pub mod interctc;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod segment;
pub mod vocab;

pub use error::{Error, Result};
