//! Sequential diffusion over functional Tucker cores.
//!
//! A functional Tucker model turns irregular spatiotemporal fields into short
//! sequences of small core tensors. A GP-noise diffusion model learns the
//! distribution of those sequences, and message-passing guidance conditions
//! samples on sparse observations.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod ftm;
pub mod gp;
pub mod gpsd;
pub mod latent;
pub mod mpdps;
pub mod nn;
pub mod pipeline;
pub mod tucker;

pub use error::{Error, Result};
