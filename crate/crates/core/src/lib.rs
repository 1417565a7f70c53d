//! Bilingual language-model training lab.
//!
//! Trains a word-level LSTM language model on two monolingual corpora and
//! scores it on code-switched text. Four regimes are supported: either
//! language alone, strictly alternating batches from both languages with the
//! recurrent state carried across the language boundary, and alternating
//! batches with an extra mean-squared pull between the L1 and L2 rows of the
//! output projection.
//!
//! The numeric code is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below fix the common choices.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gradcheck;
mod io;
pub mod model;
pub mod numcore;
pub mod scalar;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use io::write_atomic;
pub use scalar::Scalar;

pub type Matrix32 = numcore::Matrix<f32>;
pub type Matrix64 = numcore::Matrix<f64>;
pub type Params32 = model::LstmLmParams<f32>;
pub type Params64 = model::LstmLmParams<f64>;
pub type State32 = model::HiddenState<f32>;
pub type State64 = model::HiddenState<f64>;
