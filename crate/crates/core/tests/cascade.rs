use pilotforge::channel::{generate_split, ChannelDataset, ChannelProfile};
use pilotforge::channelnet::{
    dncnn_forward, dncnn_node, mse, pipeline_loss, train_end_to_end, DncnnSpec, EstimatorPipeline,
    PipelineSpec, SrcnnSpec,
};
use pilotforge::estimators::{equally_spaced_pattern, fit_statistics};
use pilotforge::experiment::{evaluate_mmse, evaluate_pipeline};
use pilotforge::selection::train::gathered_input;
use pilotforge::selection::{train_decoder, Decoder, DecoderSpec, PilotPattern, TrainConfig};
use pilotforge::ComplexGrid;
use pilotforge_nn::{AdamState, Graph, ParamStore, Sequential, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const NF: usize = 12;
const NN: usize = 6;

fn snrs() -> Vec<f64> {
    (0..=10).map(|i| 3.0 * i as f64).collect()
}

fn split(count: usize, seed: u64) -> ChannelDataset {
    generate_split(&ChannelProfile::veh_a(), NF, NN, count, &snrs(), seed).unwrap()
}

fn pattern() -> PilotPattern {
    equally_spaced_pattern(NF, NN, 6).unwrap()
}

fn decoder(train: &ChannelDataset, epochs: usize) -> Decoder<f32> {
    let spec = DecoderSpec {
        hidden: vec![64, 64],
        ..DecoderSpec::default()
    };
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        ..TrainConfig::default()
    };
    train_decoder(train, &pattern(), &spec, &cfg, 21).unwrap().0
}

fn cascade_spec(fine_tune_decoder: bool) -> PipelineSpec {
    PipelineSpec {
        srcnn: SrcnnSpec {
            channels: [8, 4],
            kernels: [3, 1, 3],
        },
        dncnn: DncnnSpec {
            depth: 3,
            width: 8,
            kernel: 3,
        },
        fine_tune_decoder,
        decoder_lr_scale: 0.1,
    }
}

#[test]
fn loss_does_not_rise_across_five_epoch_windows() {
    let train = split(96, 1);
    let dec = decoder(&train, 5);
    let cfg = TrainConfig {
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (_, history) =
        train_end_to_end(&train, &pattern(), &dec, &cascade_spec(true), &cfg, 2).unwrap();
    let means: Vec<f64> = history
        .loss
        .chunks(5)
        .map(|w| w.iter().sum::<f64>() / w.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

#[test]
fn every_stage_receives_gradient_when_fine_tuning() {
    let train = split(16, 3);
    let dec = decoder(&train, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut pipe =
        EstimatorPipeline::build(&cascade_spec(true), &pattern(), &dec, &mut rng).unwrap();
    let mut pilots = Vec::new();
    let mut target = Vec::new();
    for r in &train.records[..8] {
        pilots.extend(gathered_input(&r.noisy, &pattern()).unwrap());
        target.extend(r.ideal.to_planes());
    }
    let mut g = Graph::training(5);
    let loss = pipeline_loss(&mut g, &pipe, pilots, &target, 8).unwrap();
    g.backward(loss, &mut pipe.store).unwrap();
    let mut seen = [0usize; 3];
    for (_, p) in pipe.store.iter().filter(|(_, p)| p.trainable) {
        let grad = p.tensor.grad().unwrap_or(&[]);
        assert!(grad.iter().any(|v| *v != 0.0), "{} has no gradient", p.name);
        for (count, prefix) in seen
            .iter_mut()
            .zip(EstimatorPipeline::<f32>::stage_prefixes())
        {
            *count += p.name.starts_with(prefix) as usize;
        }
    }
    assert!(seen.iter().all(|&n| n > 0), "{seen:?}");
}

#[test]
fn denoiser_beats_identity_on_held_out_frames() {
    let snr = [5.0, 10.0, 15.0];
    let train = generate_split(&ChannelProfile::veh_a(), NF, NN, 240, &snr, 6).unwrap();
    let test = generate_split(&ChannelProfile::veh_a(), NF, NN, 60, &snr, 7).unwrap();
    let spec = DncnnSpec {
        depth: 4,
        width: 12,
        kernel: 3,
    };
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Sequential::build("dncnn", &spec.layers(), &mut store, &mut rng).unwrap();
    let mut adam = AdamState::new(1e-3);
    let batch = 12;
    for epoch in 0..40 {
        for (step, chunk) in train.records.chunks(batch).enumerate() {
            let input: Vec<f32> = chunk.iter().flat_map(|r| r.noisy.to_planes()).collect();
            let target: Vec<f32> = chunk.iter().flat_map(|r| r.ideal.to_planes()).collect();
            let mut g = Graph::training((epoch * 1000 + step) as u64);
            let x = g.input(Tensor::new(&[chunk.len(), 2, NF, NN], input).unwrap());
            let y = dncnn_node(&mut g, &store, &net, x).unwrap();
            let loss = g
                .squared_error(y, &target, 1.0 / chunk.len() as f32)
                .unwrap();
            g.backward(loss, &mut store).unwrap();
            g.apply_stat_updates(&mut store);
            adam.step(&mut store).unwrap();
        }
    }
    let (mut before, mut after) = (0.0, 0.0);
    for r in &test.records {
        let x = Tensor::new(&[1, 2, NF, NN], r.noisy.to_planes()).unwrap();
        let y = dncnn_forward(&store, &net, &x).unwrap();
        let denoised = ComplexGrid::from_planes(NF, NN, y.data()).unwrap();
        before += mse(&r.noisy, &r.ideal).unwrap().0;
        after += mse(&denoised, &r.ideal).unwrap().0;
    }
    assert!(after < before, "denoised {after:.4} vs noisy {before:.4}");
}

#[test]
fn cascade_improves_on_frozen_decoder_at_15_db() {
    let train = split(440, 9);
    let test = split(200, 10);
    let dec = decoder(&train, 8);
    let cfg = TrainConfig {
        epochs: 15,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let (pipe, _) =
        train_end_to_end(&train, &pattern(), &dec, &cascade_spec(false), &cfg, 11).unwrap();
    let [(decoder_mse, _), (cascade_mse, _)] = evaluate_pipeline(&pipe, &test, 15.0, 12).unwrap();
    assert!(
        cascade_mse < decoder_mse,
        "cascade {cascade_mse:.5} vs decoder {decoder_mse:.5}"
    );
}

#[test]
fn mmse_bounds_decoder_interpolation_over_1000_frames() {
    let train = split(440, 13);
    let test = split(1000, 14);
    let dec = decoder(&train, 20);
    let stats = fit_statistics(&train, &pattern()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let pipe = EstimatorPipeline::build(&cascade_spec(false), &pattern(), &dec, &mut rng).unwrap();
    for snr in [0.0, 15.0, 30.0] {
        let [(decoder_mse, _), _] = evaluate_pipeline(&pipe, &test, snr, 16).unwrap();
        let (mmse, _) = evaluate_mmse(&stats, &test, snr, 16).unwrap();
        assert!(
            mmse <= decoder_mse,
            "{snr} dB: mmse {mmse:.5} vs decoder {decoder_mse:.5}"
        );
    }
}
