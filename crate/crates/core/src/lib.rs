//! Reverse-mode tensor library, receptive-field attention convolution,
//! triplet attention, a miniature multi-scale detector and its evaluation.

pub mod artifacts;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod rfaconv;
pub mod rng;
pub mod run;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use ops::inverse_permutation;
pub use rng::Rng64;
pub use tape::{Tape, Var};
pub use tensor::{ConvSpec, Scalar, Tensor};
