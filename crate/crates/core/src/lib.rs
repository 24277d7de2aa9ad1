//! Learned pilot placement and deep channel estimation for OFDM frames.
//!
//! * [`channel`] synthesises Vehicular-A style fading frames and datasets.
//! * [`selection`] learns pilot locations with a Concrete selector autoencoder.
//! * [`estimators`] holds the LS, equally-spaced, decoder and LMMSE baselines.
//! * [`channelnet`] is the decoder, super-resolution and blind-denoising cascade.
//! * [`experiment`] drives the command-line workflow and reports.

pub mod channel;
pub mod channelnet;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod grid;
pub mod seed;
pub mod selection;

pub use error::{Error, Result};
pub use grid::{ComplexGrid, DEFAULT_NF, DEFAULT_NN};

pub type Grid32 = ComplexGrid<f32>;
pub type Grid64 = ComplexGrid<f64>;
