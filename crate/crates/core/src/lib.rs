//! Replay prompting for multimodal transformers with missing modalities.
//!
//! Learnable private (per-modality) and shared token buffers are prepended
//! to the input of a frozen encoder, refreshed after every layer through a
//! gated residual update, and added back onto the prompt positions of the
//! following layers. See the guide in `book/` for the full walkthrough.

pub mod backbone;
pub mod data;
pub mod error;
pub mod experiment;
pub mod math;
pub mod missing;
pub mod rep;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
