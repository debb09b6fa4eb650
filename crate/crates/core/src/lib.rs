//! Image autoencoder whose bottleneck is a frozen text-token codebook.
//!
//! Images are encoded by a patch transformer, snapped to the nearest rows of
//! a frozen word-embedding table, partially masked, passed through a frozen
//! masked-denoising transformer and decoded back to pixels. The resulting
//! code sequences are plain text: they can be probed linearly or pasted into
//! a language-model prompt for few-shot classification.

pub mod autoencoder;
pub mod denoiser;
pub mod error;
pub mod fewshot;
pub mod probing;
pub mod quantizer;
pub mod rng;
pub mod tensor_io;
pub mod training;

pub use error::{LqaeError, Result, StageContext};
