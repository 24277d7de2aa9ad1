use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Tapped-delay-line channel description plus the OFDM numerology it is sampled on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub delays_s: Vec<f64>,
    pub powers_db: Vec<f64>,
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub symbol_duration_s: f64,
    pub speed_mps: f64,
}

impl ChannelProfile {
    /// ITU Vehicular-A taps at 2.1 GHz, 50 km/h, LTE numerology (15 kHz, 14 symbols per ms).
    pub fn veh_a() -> Self {
        Self {
            delays_s: [0.0, 310.0, 710.0, 1090.0, 1730.0, 2510.0]
                .iter()
                .map(|ns| ns * 1e-9)
                .collect(),
            powers_db: vec![0.0, -1.0, -9.0, -10.0, -15.0, -20.0],
            carrier_hz: 2.1e9,
            subcarrier_spacing_hz: 15e3,
            symbol_duration_s: 1e-3 / 14.0,
            speed_mps: 50.0 / 3.6,
        }
    }

    /// Single zero-delay tap: frequency-flat Rayleigh fading.
    pub fn flat(speed_mps: f64) -> Self {
        Self {
            delays_s: vec![0.0],
            powers_db: vec![0.0],
            speed_mps,
            ..Self::veh_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delays_s.is_empty() {
            return Err(Error::Profile("at least one tap is required".into()));
        }
        if self.delays_s.len() != self.powers_db.len() {
            return Err(Error::Profile(format!(
                "{} delays but {} powers",
                self.delays_s.len(),
                self.powers_db.len()
            )));
        }
        if self
            .delays_s
            .iter()
            .chain(&self.powers_db)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Profile(
                "tap delays and powers must be finite".into(),
            ));
        }
        if self.delays_s[0] < 0.0 || self.delays_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Profile(
                "delays must be non-negative and strictly increasing".into(),
            ));
        }
        for (name, v) in [
            ("carrier frequency", self.carrier_hz),
            ("subcarrier spacing", self.subcarrier_spacing_hz),
            ("symbol duration", self.symbol_duration_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Profile(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.speed_mps.is_finite() && self.speed_mps >= 0.0) {
            return Err(Error::Profile(format!(
                "speed must be non-negative, got {}",
                self.speed_mps
            )));
        }
        Ok(())
    }

    /// Tap powers in linear scale, normalised to sum to one.
    pub fn linear_powers(&self) -> Vec<f64> {
        let lin: Vec<f64> = self
            .powers_db
            .iter()
            .map(|db| 10f64.powf(db / 10.0))
            .collect();
        let total: f64 = lin.iter().sum();
        lin.iter().map(|p| p / total).collect()
    }

    /// Maximum Doppler shift `v * f_c / c`.
    pub fn doppler_hz(&self) -> f64 {
        self.speed_mps * self.carrier_hz / SPEED_OF_LIGHT
    }
}
