//! Training loops for the selector autoencoder and for fixed-pattern decoders.

use log::{info, warn};
use pilotforge_nn::{AdamState, Graph, NnError, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::concrete::{fill_gumbel, mean_max_probability, AnnealSchedule, ConcreteSelector};
use super::decoder::{Decoder, DecoderNet, DecoderSpec};
use super::pattern::{argmax_gather, interleave, PilotPattern};
use crate::channel::ChannelDataset;
use crate::error::{Error, Result};
use crate::seed;

pub const SELECTOR_LOGITS: &str = "selector.logits";

/// Below this final mean max-probability the selector is reported as not yet discrete.
pub const DISCRETE_WARN_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate multiplier for the selector logits.
    #[serde(default = "default_selector_lr_scale")]
    pub selector_lr_scale: f64,
    /// Stop once an epoch's mean loss falls below this value.
    #[serde(default)]
    pub stop_below: Option<f64>,
}

fn default_selector_lr_scale() -> f64 {
    100.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            selector_lr_scale: default_selector_lr_scale(),
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.selector_lr_scale > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Per-epoch diagnostics. Selector-only series stay empty for other trainings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub loss: Vec<f64>,
    pub mean_max_prob: Vec<f64>,
    pub temperature: Vec<f64>,
}

/// Dataset frames unpacked into contiguous network-ready arrays.
#[derive(Debug, Clone)]
pub struct Frames<T> {
    pub nf: usize,
    pub nn: usize,
    /// `[n, d]` real parts of the noisy grids.
    pub noisy_re: Vec<T>,
    /// `[n, d]` imaginary parts of the noisy grids.
    pub noisy_im: Vec<T>,
    /// `[n, 2d]` ideal grids, real plane then imaginary plane.
    pub target: Vec<T>,
    pub snr_db: Vec<f32>,
}

/// A mini-batch gathered from [`Frames`].
#[derive(Debug, Clone, Default)]
pub struct Batch<T> {
    pub size: usize,
    pub noisy_re: Vec<T>,
    pub noisy_im: Vec<T>,
    pub target: Vec<T>,
}

impl<T: Scalar> Frames<T> {
    pub fn from_dataset(ds: &ChannelDataset) -> Result<Self> {
        if ds.records.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let (nf, nn) = (ds.header.nf, ds.header.nn);
        let d = nf * nn;
        let n = ds.records.len();
        let cv = |x: f32| T::from_f64_lossy(x as f64);
        let mut f = Frames {
            nf,
            nn,
            noisy_re: Vec::with_capacity(n * d),
            noisy_im: Vec::with_capacity(n * d),
            target: Vec::with_capacity(2 * n * d),
            snr_db: Vec::with_capacity(n),
        };
        for r in &ds.records {
            f.noisy_re.extend(r.noisy.values().iter().map(|v| cv(v.re)));
            f.noisy_im.extend(r.noisy.values().iter().map(|v| cv(v.im)));
            f.target.extend(r.ideal.values().iter().map(|v| cv(v.re)));
            f.target.extend(r.ideal.values().iter().map(|v| cv(v.im)));
            f.snr_db.push(r.snr_db);
        }
        Ok(f)
    }

    pub fn len(&self) -> usize {
        self.snr_db.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snr_db.is_empty()
    }

    pub fn d(&self) -> usize {
        self.nf * self.nn
    }

    pub fn batch(&self, idx: &[usize]) -> Batch<T> {
        let d = self.d();
        let mut b = Batch {
            size: idx.len(),
            noisy_re: Vec::with_capacity(idx.len() * d),
            noisy_im: Vec::with_capacity(idx.len() * d),
            target: Vec::with_capacity(idx.len() * 2 * d),
        };
        for &i in idx {
            b.noisy_re
                .extend_from_slice(&self.noisy_re[i * d..(i + 1) * d]);
            b.noisy_im
                .extend_from_slice(&self.noisy_im[i * d..(i + 1) * d]);
            b.target
                .extend_from_slice(&self.target[2 * i * d..2 * (i + 1) * d]);
        }
        b
    }

    /// Interleaved pilot observations `[batch, 2k]` read from the noisy grids.
    pub fn gather(&self, idx: &[usize], flat_pattern: &[usize]) -> Vec<T> {
        let d = self.d();
        let mut out = Vec::with_capacity(idx.len() * 2 * flat_pattern.len());
        for &i in idx {
            for &j in flat_pattern {
                out.push(self.noisy_re[i * d + j]);
                out.push(self.noisy_im[i * d + j]);
            }
        }
        out
    }
}

/// Shuffled mini-batches of `0..n` for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
        seed,
        &[epoch as u64, 0x5A],
    )));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Mean per-frame reconstruction error of selector plus decoder on one batch.
#[allow(clippy::too_many_arguments)]
pub fn selector_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    logits: ParamId,
    decoder: &DecoderNet,
    batch: &Batch<T>,
    gumbel: &[T],
    temperature: T,
) -> Result<Var> {
    let u = g.concrete_select(
        store,
        logits,
        &batch.noisy_re,
        &batch.noisy_im,
        gumbel,
        temperature,
    )?;
    let y = decoder.forward(g, store, u)?;
    let scale = T::one() / T::from_usize(batch.size).unwrap();
    Ok(g.squared_error(y, &batch.target, scale)?)
}

/// Mean per-frame reconstruction error of a decoder fed `[batch, 2k]` pilots.
pub fn decoder_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    decoder: &DecoderNet,
    pilots: Vec<T>,
    target: &[T],
    batch: usize,
) -> Result<Var> {
    let x = g.input(
        Tensor::new(&[batch, 2 * decoder.k], pilots).map_err(|e| Error::Shape(e.to_string()))?,
    );
    let y = decoder.forward(g, store, x)?;
    let scale = T::one() / T::from_usize(batch).unwrap();
    Ok(g.squared_error(y, target, scale)?)
}

pub(crate) fn optimizer_step<T: Scalar>(
    adam: &mut AdamState<T>,
    store: &mut ParamStore<T>,
    stage: &'static str,
    epoch: usize,
) -> Result<()> {
    match adam.step(store) {
        Ok(()) => Ok(()),
        Err(NnError::NonFiniteGradient { name }) => {
            warn!("{stage}: non-finite gradient in `{name}` at epoch {epoch}");
            Err(Error::Diverged { stage, epoch })
        }
        Err(e) => Err(e.into()),
    }
}

pub(crate) fn check_loss(loss: f64, stage: &'static str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { stage, epoch })
    }
}

/// Result of selector training.
#[derive(Debug, Clone)]
pub struct SelectorOutcome {
    pub selector: ConcreteSelector<f32>,
    pub decoder: Decoder<f32>,
    pub history: History,
}

/// Jointly trains a `k`-node Concrete selector and its decoder on noisy-to-ideal pairs.
pub fn train_selector(
    dataset: &ChannelDataset,
    k: usize,
    schedule: &AnnealSchedule,
    decoder_spec: &DecoderSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SelectorOutcome> {
    schedule.validate()?;
    cfg.validate()?;
    let frames = Frames::<f32>::from_dataset(dataset)?;
    let d = frames.d();
    if k == 0 || k > d {
        return Err(Error::Config(format!(
            "selector size k={k} must be in 1..={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0x5E1]));
    let mut store = ParamStore::new();
    let init: Vec<f32> = (0..k * d)
        .map(|_| rng.random_range(-0.01f32..0.01))
        .collect();
    let logits = store.add(
        SELECTOR_LOGITS,
        Tensor::new(&[k, d], init).expect("k*d values"),
    );
    let decoder = DecoderNet::build(decoder_spec, k, frames.nf, frames.nn, &mut store, &mut rng)?;
    let mut adam = AdamState::new(cfg.lr);
    adam.set_lr_scale(logits, cfg.selector_lr_scale);

    let mut history = History::default();
    let mut gumbel = Vec::new();
    for epoch in 0..cfg.epochs {
        let temperature = schedule.temperature(epoch);
        let t = temperature as f32;
        let mut total = 0.0;
        for (step, idx) in epoch_batches(frames.len(), cfg.batch_size, seed, epoch)
            .iter()
            .enumerate()
        {
            let batch = frames.batch(idx);
            gumbel.resize(idx.len() * k * d, 0.0f32);
            let mut noise =
                ChaCha8Rng::seed_from_u64(seed::derive(seed, &[epoch as u64, step as u64, 1]));
            fill_gumbel(&mut noise, &mut gumbel);
            let mut g = Graph::training(seed::derive(seed, &[epoch as u64, step as u64, 2]));
            let loss = selector_loss(&mut g, &store, logits, &decoder, &batch, &gumbel, t)?;
            let value = g.value(loss).data()[0] as f64;
            check_loss(value, "selector", epoch)?;
            total += value * idx.len() as f64;
            g.backward(loss, &mut store)?;
            optimizer_step(&mut adam, &mut store, "selector", epoch)?;
        }
        let loss = total / frames.len() as f64;
        let mmp = mean_max_probability(store.get(logits).data(), k, d);
        info!("selector epoch {epoch}: T={temperature:.4} loss={loss:.5} mean-max-prob={mmp:.4}");
        history.loss.push(loss);
        history.mean_max_prob.push(mmp);
        history.temperature.push(temperature);
        if cfg.stop_below.is_some_and(|s| loss < s) {
            break;
        }
    }
    let final_mmp = history.mean_max_prob.last().copied().unwrap_or(0.0);
    if final_mmp < DISCRETE_WARN_THRESHOLD {
        warn!("selector mean max-probability {final_mmp:.3} is below {DISCRETE_WARN_THRESHOLD}; pattern may not be settled");
    }
    let selector = ConcreteSelector::from_log_alpha(store.get(logits).clone(), schedule.tb as f32)?;
    let decoder = Decoder::extract(&decoder, &store)?;
    Ok(SelectorOutcome {
        selector,
        decoder,
        history,
    })
}

/// Trains a decoder for a fixed pilot pattern on gathered noisy pilots.
pub fn train_decoder(
    dataset: &ChannelDataset,
    pattern: &PilotPattern,
    decoder_spec: &DecoderSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Decoder<f32>, History)> {
    cfg.validate()?;
    let frames = Frames::<f32>::from_dataset(dataset)?;
    if let Some(first) = dataset.records.first() {
        argmax_gather(&first.noisy, pattern)?;
    }
    let flat = pattern.flat_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0xDEC]));
    let mut dec = Decoder::new(decoder_spec, pattern.k(), frames.nf, frames.nn, &mut rng)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (step, idx) in epoch_batches(frames.len(), cfg.batch_size, seed, epoch)
            .iter()
            .enumerate()
        {
            let pilots = frames.gather(idx, &flat);
            let target = frames.batch_targets(idx);
            let mut g = Graph::training(seed::derive(seed, &[epoch as u64, step as u64, 3]));
            let loss = decoder_loss(&mut g, &dec.store, &dec.net, pilots, &target, idx.len())?;
            let value = g.value(loss).data()[0] as f64;
            check_loss(value, "decoder", epoch)?;
            total += value * idx.len() as f64;
            g.backward(loss, &mut dec.store)?;
            optimizer_step(&mut adam, &mut dec.store, "decoder", epoch)?;
        }
        let loss = total / frames.len() as f64;
        info!("decoder epoch {epoch}: loss={loss:.5}");
        history.loss.push(loss);
        if cfg.stop_below.is_some_and(|s| loss < s) {
            break;
        }
    }
    Ok((dec, history))
}

impl<T: Scalar> Frames<T> {
    pub fn batch_targets(&self, idx: &[usize]) -> Vec<T> {
        let d2 = 2 * self.d();
        let mut out = Vec::with_capacity(idx.len() * d2);
        for &i in idx {
            out.extend_from_slice(&self.target[i * d2..(i + 1) * d2]);
        }
        out
    }
}

/// Interleaved pilots for one grid, for callers holding a [`ComplexGrid`](crate::ComplexGrid).
pub fn gathered_input<T: Scalar>(
    grid: &crate::ComplexGrid<T>,
    pattern: &PilotPattern,
) -> Result<Vec<T>> {
    Ok(interleave(&argmax_gather(grid, pattern)?))
}
