// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod autodiff;
pub mod bitrate;
pub mod convnet;
pub mod error;
pub mod mlm;
pub mod model;
pub mod objective;
pub mod params;
pub mod quantizer;
pub mod rng;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
