//! Masked spectral-patch and temporal-frame prediction over log-mel
//! spectrograms: feature extraction, tokenization, a transformer encoder with
//! hand-written gradients, two-phase pretraining and frozen-encoder probing.

pub mod config;
pub mod data;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod gridding;
pub mod io;
pub mod masking;
pub mod model;
pub mod objective;
pub mod pipeline;
pub mod probe;
pub mod quantizer;
pub mod rng;
pub mod trainer;
pub mod wav;

pub use error::{Error, Result};
