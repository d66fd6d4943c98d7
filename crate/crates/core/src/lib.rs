//! Dual-stream identity injection for a toy diffusion transformer.
//!
//! The visual stream reduces a latent to per-channel mean and standard
//! deviation ([`visual`]). The semantic stream produces an N x D identity
//! embedding ([`semantic`]). [`modulation`] layer-normalizes the identity
//! tokens and adds the tiled visual descriptor as a shared bias whose strength
//! decays linearly over the denoising schedule ([`scheduler`]). The backbone
//! in [`dit`] injects the result through value-biased cross-attention, and
//! [`pipeline`] drives Euler sampling with classifier-free guidance.
//!
//! Every random quantity is derived from explicit seeds, so each run is a pure
//! function of its configuration.

pub mod dit;
pub mod error;
pub mod modulation;
pub mod pipeline;
pub mod scheduler;
pub mod semantic;
pub mod tensor;
pub mod visual;

pub use error::{DviError, Result};
