use log::info;
use pilotforge_nn::{AdamState, Graph, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::pipeline::{EstimatorPipeline, PipelineSpec};
use crate::channel::ChannelDataset;
use crate::error::{Error, Result};
use crate::seed;
use crate::selection::train::{check_loss, epoch_batches, optimizer_step};
use crate::selection::{Decoder, Frames, History, PilotPattern, TrainConfig};

/// Mean per-frame squared error of the full cascade on `[batch, 2k]` pilots.
pub fn pipeline_loss<T: Scalar>(
    g: &mut Graph<T>,
    pipeline: &EstimatorPipeline<T>,
    pilots: Vec<T>,
    target: &[T],
    batch: usize,
) -> Result<Var> {
    let x = g.input(
        Tensor::new(&[batch, 2 * pipeline.pattern.k()], pilots)
            .map_err(|e| Error::Shape(e.to_string()))?,
    );
    let (_, out) = pipeline.forward(g, x)?;
    let scale = T::one() / T::from_usize(batch).unwrap();
    Ok(g.squared_error(out, target, scale)?)
}

/// Trains SRCNN and DnCNN-B behind `decoder` on one joint reconstruction loss.
pub fn train_end_to_end(
    dataset: &ChannelDataset,
    pattern: &PilotPattern,
    decoder: &Decoder<f32>,
    spec: &PipelineSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(EstimatorPipeline<f32>, History)> {
    cfg.validate()?;
    let frames = Frames::<f32>::from_dataset(dataset)?;
    if frames.nf != pattern.nf() || frames.nn != pattern.nn() {
        return Err(Error::Config(format!(
            "dataset frames are {}x{} but the pattern is for {}x{}",
            frames.nf,
            frames.nn,
            pattern.nf(),
            pattern.nn()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &[0xE2E]));
    let mut pipe = EstimatorPipeline::build(spec, pattern, decoder, &mut rng)?;
    let flat = pattern.flat_indices();
    let mut adam = AdamState::new(cfg.lr);
    for id in pipe.decoder.sequential().param_ids() {
        adam.set_lr_scale(id, spec.decoder_lr_scale);
    }
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let mut total = 0.0;
        for (step, idx) in epoch_batches(frames.len(), cfg.batch_size, seed, epoch)
            .iter()
            .enumerate()
        {
            let pilots = frames.gather(idx, &flat);
            let target = frames.batch_targets(idx);
            let mut g = Graph::training(seed::derive(seed, &[epoch as u64, step as u64, 4]));
            let loss = pipeline_loss(&mut g, &pipe, pilots, &target, idx.len())?;
            let value = g.value(loss).data()[0] as f64;
            check_loss(value, "end-to-end", epoch)?;
            total += value * idx.len() as f64;
            g.backward(loss, &mut pipe.store)?;
            g.apply_stat_updates(&mut pipe.store);
            optimizer_step(&mut adam, &mut pipe.store, "end-to-end", epoch)?;
        }
        let loss = total / frames.len() as f64;
        info!("end-to-end epoch {epoch}: loss={loss:.5}");
        history.loss.push(loss);
        if cfg.stop_below.is_some_and(|s| loss < s) {
            break;
        }
    }
    Ok((pipe, history))
}
