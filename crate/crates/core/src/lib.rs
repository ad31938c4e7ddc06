//! Mamba U-Net speech enhancement on a from-scratch tensor core.
//!
//! Layers, bottom up:
//! - [`tensor`]: dense tensors with a define-by-run gradient tape
//! - [`signal`]: WAV I/O and the STFT/ISTFT pair around the network
//! - [`ssm`]: zero-order-hold discretization and (selective) state-space scans
//! - [`mamba`]: RMSNorm, the Mamba block, its bidirectional wrapper and the
//!   time-then-frequency composite
//! - [`model`]: feature encoder, three-level U-Net, magnitude/phase decoders,
//!   checkpoints and parameter/FLOP accounting
//! - [`train`]: synthetic data, losses, AdamW, SI-SDR, contrast stretching and
//!   the training loop
//! - [`cli`]: the `mseunet` command line

pub mod cli;
pub mod error;
pub mod mamba;
pub mod model;
pub mod nn;
pub mod signal;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
