//! Sum-of-sinusoids fading and additive noise.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::profile::ChannelProfile;
use crate::error::{Error, Result};
use crate::grid::ComplexGrid;

/// Sinusoids per tap in the Doppler model.
pub const SINUSOIDS_PER_TAP: usize = 32;

/// One realisation of an `nf x nn` frequency response.
///
/// Each tap is a Gaussian-weighted sum of sinusoids whose Doppler shifts are
/// `f_d cos(theta)` with uniform arrival angles, giving Rayleigh amplitudes with a
/// Clarke spectrum. The frequency response at subcarrier `f`, symbol `n` is
/// `sum_l a_l(n T_s) exp(-j 2 pi f df tau_l)`.
pub fn generate_channel(
    profile: &ChannelProfile,
    nf: usize,
    nn: usize,
    seed: u64,
) -> Result<ComplexGrid<f64>> {
    profile.validate()?;
    if nf == 0 || nn == 0 {
        return Err(Error::Shape(format!(
            "grid dimensions must be positive, got {nf}x{nn}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let powers = profile.linear_powers();
    let fd = profile.doppler_hz();
    let taps = powers.len();

    // tap gains over time, [tap][symbol]
    let mut gains = vec![Complex64::new(0.0, 0.0); taps * nn];
    for (l, &p) in powers.iter().enumerate() {
        let scale = (p / (2.0 * SINUSOIDS_PER_TAP as f64)).sqrt();
        let mut weights = [Complex64::new(0.0, 0.0); SINUSOIDS_PER_TAP];
        let mut shifts = [0.0f64; SINUSOIDS_PER_TAP];
        let mut phases = [0.0f64; SINUSOIDS_PER_TAP];
        for m in 0..SINUSOIDS_PER_TAP {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            weights[m] = Complex64::new(re, im) * scale;
            shifts[m] = fd * (2.0 * PI * rng.random::<f64>()).cos();
            phases[m] = 2.0 * PI * rng.random::<f64>();
        }
        for n in 0..nn {
            let t = n as f64 * profile.symbol_duration_s;
            let mut acc = Complex64::new(0.0, 0.0);
            for m in 0..SINUSOIDS_PER_TAP {
                acc +=
                    weights[m] * Complex64::from_polar(1.0, 2.0 * PI * shifts[m] * t + phases[m]);
            }
            gains[l * nn + n] = acc;
        }
    }

    let mut values = Vec::with_capacity(nf * nn);
    for f in 0..nf {
        let rot: Vec<Complex64> = profile
            .delays_s
            .iter()
            .map(|tau| {
                Complex64::from_polar(
                    1.0,
                    -2.0 * PI * f as f64 * profile.subcarrier_spacing_hz * tau,
                )
            })
            .collect();
        for n in 0..nn {
            let mut h = Complex64::new(0.0, 0.0);
            for l in 0..taps {
                h += gains[l * nn + n] * rot[l];
            }
            values.push(h);
        }
    }
    ComplexGrid::new(nf, nn, values)
}

/// Adds circular complex Gaussian noise at `snr_db` relative to the grid's mean power.
///
/// `f64::INFINITY` disables noise and returns an exact copy.
pub fn add_awgn(grid: &ComplexGrid<f64>, snr_db: f64, seed: u64) -> Result<ComplexGrid<f64>> {
    if snr_db == f64::INFINITY {
        return Ok(grid.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!(
            "SNR must be finite or +inf, got {snr_db}"
        )));
    }
    let power = grid.mean_power();
    if power <= 0.0 {
        return Err(Error::Degenerate(
            "cannot set an SNR relative to a zero-power grid".into(),
        ));
    }
    let sigma = (noise_variance(power, snr_db) / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = grid
        .values()
        .iter()
        .map(|v| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            v + Complex64::new(re, im) * sigma
        })
        .collect();
    ComplexGrid::new(grid.nf(), grid.nn(), values)
}

/// Per-element complex noise variance for a signal of mean power `power` at `snr_db`.
pub fn noise_variance(power: f64, snr_db: f64) -> f64 {
    power * 10f64.powf(-snr_db / 10.0)
}
