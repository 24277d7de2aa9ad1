use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelProfile, SplitCounts};
use crate::channelnet::{DncnnSpec, PipelineSpec, SrcnnSpec};
use crate::error::{Error, Result};
use crate::selection::{AnnealSchedule, DecoderSpec, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Every experiment-level constant, read from a flat TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub nf: usize,
    pub nn: usize,
    pub tap_delays_ns: Vec<f64>,
    pub tap_powers_db: Vec<f64>,
    pub carrier_ghz: f64,
    pub speed_kmh: f64,
    pub subcarrier_spacing_khz: f64,
    pub symbol_duration_us: f64,

    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    pub snr_db: Vec<f64>,

    /// Pilot counts for the MSE-vs-Np sweep.
    pub np_list: Vec<usize>,
    /// Pilot counts that get a full SNR sweep with every baseline.
    pub snr_sweep_np: Vec<usize>,
    pub np_sweep_snr_db: f64,
    /// Low window keeps SNR <= this, high window keeps SNR >= this.
    pub window_split_db: f64,

    pub t0: f64,
    pub tb: f64,
    pub selector_epochs: usize,
    pub selector_lr_scale: f64,

    pub decoder_hidden: Vec<usize>,
    pub decoder_slope: f64,
    pub decoder_dropout: f64,
    pub decoder_epochs: usize,

    pub srcnn_channels: [usize; 2],
    pub srcnn_kernels: [usize; 3],
    pub dncnn_depth: usize,
    pub dncnn_width: usize,
    pub dncnn_kernel: usize,
    pub fine_tune_decoder: bool,
    pub decoder_lr_scale: f64,
    pub e2e_epochs: usize,

    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let veh_a = ChannelProfile::veh_a();
        let pipeline = PipelineSpec::default();
        let decoder = DecoderSpec::default();
        Self {
            schema_version: SCHEMA_VERSION,
            out_dir: PathBuf::from("run"),
            seed: 2020,
            nf: crate::DEFAULT_NF,
            nn: crate::DEFAULT_NN,
            tap_delays_ns: veh_a.delays_s.iter().map(|d| d * 1e9).collect(),
            tap_powers_db: veh_a.powers_db.clone(),
            carrier_ghz: 2.1,
            speed_kmh: 50.0,
            subcarrier_spacing_khz: 15.0,
            symbol_duration_us: 1e3 / 14.0,
            train_frames: 3200,
            val_frames: 400,
            test_frames: 400,
            snr_db: (0..=10).map(|i| 3.0 * i as f64).collect(),
            np_list: vec![8, 16, 32, 48],
            snr_sweep_np: vec![8, 16],
            np_sweep_snr_db: 15.0,
            window_split_db: 15.0,
            t0: 10.0,
            tb: 0.01,
            selector_epochs: 100,
            selector_lr_scale: 100.0,
            decoder_hidden: decoder.hidden,
            decoder_slope: decoder.slope,
            decoder_dropout: decoder.dropout,
            decoder_epochs: 100,
            srcnn_channels: pipeline.srcnn.channels,
            srcnn_kernels: pipeline.srcnn.kernels,
            dncnn_depth: pipeline.dncnn.depth,
            dncnn_width: pipeline.dncnn.width,
            dncnn_kernel: pipeline.dncnn.kernel,
            fine_tune_decoder: pipeline.fine_tune_decoder,
            decoder_lr_scale: pipeline.decoder_lr_scale,
            e2e_epochs: 150,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "experiment config",
            path: path.to_string(),
            reason,
        };
        let table: toml::Table = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        if !table.contains_key("schema_version") {
            return Err(bad("missing `schema_version`".into()));
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                what: "config file".into(),
                path: path.display().to_string(),
            },
            _ => Error::io(path, e),
        })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.nf == 0 || self.nn == 0 {
            return Err(Error::Config("grid dimensions must be positive".into()));
        }
        if self.train_frames == 0 || self.val_frames == 0 || self.test_frames == 0 {
            return Err(Error::Config(
                "every dataset split needs at least one frame".into(),
            ));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config(
                "snr_db must be a non-empty list of finite values".into(),
            ));
        }
        if !self.np_sweep_snr_db.is_finite() || !self.window_split_db.is_finite() {
            return Err(Error::Config("sweep and window SNRs must be finite".into()));
        }
        if self.np_list.is_empty() {
            return Err(Error::Config("np_list must not be empty".into()));
        }
        for &np in self.np_list.iter().chain(&self.snr_sweep_np) {
            self.check_np(np)?;
        }
        if let Some(np) = self
            .snr_sweep_np
            .iter()
            .find(|np| !self.np_list.contains(np))
        {
            return Err(Error::Config(format!(
                "snr_sweep_np entry {np} is not in np_list"
            )));
        }
        if self.selector_epochs == 0 || self.decoder_epochs == 0 || self.e2e_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        self.profile().validate()?;
        self.schedule()?;
        self.decoder_spec().validate()?;
        self.pipeline_spec().validate()?;
        self.selector_train().validate()?;
        Ok(())
    }

    /// Pilot counts must be even and fit on the grid.
    pub fn check_np(&self, np: usize) -> Result<()> {
        if np == 0 || !np.is_multiple_of(2) || np > self.nf * self.nn {
            return Err(Error::Config(format!(
                "pilot count {np} must be even and within 2..={}",
                self.nf * self.nn
            )));
        }
        Ok(())
    }

    pub fn profile(&self) -> ChannelProfile {
        ChannelProfile {
            delays_s: self.tap_delays_ns.iter().map(|d| d * 1e-9).collect(),
            powers_db: self.tap_powers_db.clone(),
            carrier_hz: self.carrier_ghz * 1e9,
            subcarrier_spacing_hz: self.subcarrier_spacing_khz * 1e3,
            symbol_duration_s: self.symbol_duration_us * 1e-6,
            speed_mps: self.speed_kmh / 3.6,
        }
    }

    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train_frames,
            val: self.val_frames,
            test: self.test_frames,
        }
    }

    pub fn schedule(&self) -> Result<AnnealSchedule> {
        AnnealSchedule::new(self.t0, self.tb, self.selector_epochs)
    }

    pub fn decoder_spec(&self) -> DecoderSpec {
        DecoderSpec {
            hidden: self.decoder_hidden.clone(),
            slope: self.decoder_slope,
            dropout: self.decoder_dropout,
        }
    }

    pub fn pipeline_spec(&self) -> PipelineSpec {
        PipelineSpec {
            srcnn: SrcnnSpec {
                channels: self.srcnn_channels,
                kernels: self.srcnn_kernels,
            },
            dncnn: DncnnSpec {
                depth: self.dncnn_depth,
                width: self.dncnn_width,
                kernel: self.dncnn_kernel,
            },
            fine_tune_decoder: self.fine_tune_decoder,
            decoder_lr_scale: self.decoder_lr_scale,
        }
    }

    fn train(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            selector_lr_scale: self.selector_lr_scale,
            stop_below: None,
        }
    }

    pub fn selector_train(&self) -> TrainConfig {
        self.train(self.selector_epochs)
    }

    pub fn decoder_train(&self) -> TrainConfig {
        self.train(self.decoder_epochs)
    }

    pub fn e2e_train(&self) -> TrainConfig {
        self.train(self.e2e_epochs)
    }
}
