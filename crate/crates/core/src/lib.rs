//! Adaptive neural-network equalizer for drifting optical channels.
//!
//! A small MLP equalizes PAM4 or 16QAM symbols from oversampled received
//! waveforms. After supervised offline training it keeps adapting online
//! using only its own predictions, with a choice of semi-supervised losses
//! (self-training, Π-model, VAT and augmented VAT).

pub mod baselines;
pub mod chansim;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod ssl;

pub use error::{Error, Result};
pub use nn::{Architecture, Mlp};
