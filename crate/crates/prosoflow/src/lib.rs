//! Non-autoregressive text-to-speech acoustic model whose pitch and energy
//! are modeled by conditional normalizing flows.
//!
//! The crate is organized around the data path:
//!
//! - [`signal`]: waveform analysis (mel spectrogram, f0, energy) and
//!   Griffin-Lim resynthesis;
//! - [`tensor`]: a small f64 reverse-mode autodiff engine;
//! - [`flows`]: rational-quadratic spline coupling flows with exact
//!   log-determinants;
//! - [`model`]: phoneme encoder, duration predictor, length regulator,
//!   variance adapters and mel decoder;
//! - [`train`]: loss assembly, AdamW with Noam scheduling, checkpointing;
//! - [`control`] / [`eval`]: pitch shifting through the flow inverse, f0
//!   frame error rate, diversity sampling and latent diagnostics;
//! - [`data`]: toy corpus generation, feature preparation and caching.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod config;
pub mod control;
pub mod data;
pub mod eval;
pub mod flows;
pub mod model;
pub mod plot;
pub mod signal;
pub mod tensor;
pub mod train;
