//! Classical and learned baselines.

pub mod lattice;
pub mod ls;
pub mod mmse;

pub use lattice::equally_spaced_pattern;
pub use ls::{ls_estimate, PilotObservation};
pub use mmse::{fit_statistics, mmse_estimate, ChannelStatistics};

use pilotforge_nn::Scalar;

use crate::error::Result;
use crate::grid::ComplexGrid;
use crate::selection::Decoder;

/// Decoder interpolation of `k` gathered pilots to the full frame.
pub fn decoder_interpolate<T: Scalar>(
    u: &[[T; 2]],
    decoder: &Decoder<T>,
) -> Result<ComplexGrid<T>> {
    decoder.interpolate(u)
}
