//! Decoder-only speech recognition with CTC-compressed audio prompts.
//!
//! An encoder turns acoustic frames into features and a CTC head labels every
//! frame. Frames labelled blank are dropped, the rest are mapped into the
//! embedding space of a decoder-only transformer, and the decoder predicts the
//! transcript autoregressively after those prompt vectors. Because the decoder
//! is an ordinary autoregressive LM, text-only data trains it directly.

pub mod autodiff;
pub mod config;
pub mod ctc;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod io;
pub mod kernels;
pub mod layers;
pub mod model;
pub mod params;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
