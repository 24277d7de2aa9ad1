#![allow(dead_code)]

use pilotforge::channel::{generate_split, ChannelProfile};
use pilotforge::channelnet::{
    pipeline_loss, srcnn_node, DncnnSpec, EstimatorPipeline, PipelineSpec, SrcnnSpec,
};
use pilotforge::selection::{
    selector_loss, Batch, Decoder, DecoderNet, DecoderSpec, Frames, PilotPattern, SELECTOR_LOGITS,
};
use pilotforge_nn::{Graph64, LayerSpec, ParamId, ParamStore64, Sequential, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const TOL: f64 = 1e-3;

/// Norm-wise relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale > 1e-10 {
        diff / scale
    } else {
        diff
    }
}

/// Analytic gradients of every trainable tensor after one backward pass.
pub fn analytic_gradients<F>(
    store: &mut ParamStore64,
    graph_seed: u64,
    loss_fn: &F,
) -> Vec<(ParamId, Vec<f64>)>
where
    F: Fn(&mut Graph64, &ParamStore64) -> Var,
{
    store.zero_grad();
    let mut g = Graph64::training(graph_seed);
    let loss = loss_fn(&mut g, store);
    g.backward(loss, store).unwrap();
    store
        .ids()
        .filter(|&id| store.param(id).trainable)
        .map(|id| {
            let grad = store
                .get(id)
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
            (id, grad)
        })
        .collect()
}

pub fn loss_value<F>(store: &ParamStore64, graph_seed: u64, loss_fn: &F) -> f64
where
    F: Fn(&mut Graph64, &ParamStore64) -> Var,
{
    let mut g = Graph64::training(graph_seed);
    let l = loss_fn(&mut g, store);
    g.value(l).data()[0]
}

/// Central difference of the loss with respect to entry `i` of `id`, stepping the stored value.
pub fn numeric_entry<F>(
    store: &mut ParamStore64,
    id: ParamId,
    i: usize,
    graph_seed: u64,
    loss_fn: &F,
) -> f64
where
    F: Fn(&mut Graph64, &ParamStore64) -> Var,
{
    let orig = store.get(id).data()[i];
    store.get_mut(id).data_mut()[i] = orig + STEP;
    let plus = loss_value(store, graph_seed, loss_fn);
    store.get_mut(id).data_mut()[i] = orig - STEP;
    let minus = loss_value(store, graph_seed, loss_fn);
    store.get_mut(id).data_mut()[i] = orig;
    (plus - minus) / (2.0 * STEP)
}

/// Worst relative error over the trainable tensors not listed in `skip`.
pub fn max_relative_error<F>(
    store: &mut ParamStore64,
    graph_seed: u64,
    skip: &[ParamId],
    loss_fn: F,
) -> f64
where
    F: Fn(&mut Graph64, &ParamStore64) -> Var,
{
    let grads = analytic_gradients(store, graph_seed, &loss_fn);
    let mut worst = 0.0f64;
    for (id, analytic) in grads {
        if skip.contains(&id) {
            continue;
        }
        let numeric: Vec<f64> = (0..analytic.len())
            .map(|i| numeric_entry(store, id, i, graph_seed, &loss_fn))
            .collect();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// Small noisy/ideal frames on an `nf x nn` grid.
pub fn toy_frames(nf: usize, nn: usize, count: usize, seed: u64) -> Frames<f64> {
    let ds = generate_split(&ChannelProfile::veh_a(), nf, nn, count, &[5.0, 20.0], seed).unwrap();
    Frames::from_dataset(&ds).unwrap()
}

/// A selector-plus-decoder problem with logits perturbed away from uniform.
pub struct SelectorProblem {
    pub store: ParamStore64,
    pub logits: ParamId,
    pub decoder: DecoderNet,
    pub batch: Batch<f64>,
    pub gumbel: Vec<f64>,
    pub temperature: f64,
}

impl SelectorProblem {
    pub fn new(seed: u64) -> Self {
        let (nf, nn, k) = (8, 4, 3);
        let d = nf * nn;
        let frames = toy_frames(nf, nn, 2, seed);
        let batch = frames.batch(&[0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore64::new();
        let init: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let logits = store.add(SELECTOR_LOGITS, Tensor::new(&[k, d], init).unwrap());
        let spec = DecoderSpec {
            hidden: vec![6, 5],
            ..DecoderSpec::default()
        };
        let decoder = DecoderNet::build(&spec, k, nf, nn, &mut store, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") {
                store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let gumbel = pilotforge::selection::sample_gumbel(2 * k * d, seed ^ 0x9);
        Self {
            store,
            logits,
            decoder,
            batch,
            gumbel,
            temperature: 0.7,
        }
    }

    pub fn loss(&self) -> impl Fn(&mut Graph64, &ParamStore64) -> Var + '_ {
        move |g, s| {
            selector_loss(
                g,
                s,
                self.logits,
                &self.decoder,
                &self.batch,
                &self.gumbel,
                self.temperature,
            )
            .unwrap()
        }
    }

    /// Relative error of `dL/d alpha` computed as `dL/d ln(alpha) / alpha` against
    /// central differences taken directly in alpha.
    pub fn alpha_gradient_error(&self, graph_seed: u64) -> f64 {
        let loss = self.loss();
        let mut store = self.store.clone();
        let grads = analytic_gradients(&mut store, graph_seed, &loss);
        let dlog = &grads.iter().find(|(id, _)| *id == self.logits).unwrap().1;
        let logit = store.get(self.logits).data().to_vec();
        let analytic: Vec<f64> = dlog.iter().zip(&logit).map(|(g, l)| g / l.exp()).collect();
        let mut numeric = Vec::with_capacity(logit.len());
        for (i, l) in logit.iter().enumerate() {
            let alpha = l.exp();
            let h = STEP * alpha;
            let mut at = |a: f64| {
                store.get_mut(self.logits).data_mut()[i] = a.ln();
                loss_value(&store, graph_seed, &loss)
            };
            let d = (at(alpha + h) - at(alpha - h)) / (2.0 * h);
            store.get_mut(self.logits).data_mut()[i] = *l;
            numeric.push(d);
        }
        relative_error(&analytic, &numeric)
    }

    pub fn decoder_gradient_error(&self, graph_seed: u64) -> f64 {
        let mut store = self.store.clone();
        max_relative_error(&mut store, graph_seed, &[self.logits], self.loss())
    }
}

pub fn toy_pipeline_spec() -> PipelineSpec {
    PipelineSpec {
        srcnn: SrcnnSpec {
            channels: [4, 3],
            kernels: [3, 1, 3],
        },
        dncnn: DncnnSpec {
            depth: 3,
            width: 3,
            kernel: 3,
        },
        fine_tune_decoder: true,
        decoder_lr_scale: 0.1,
    }
}

fn min_abs_before_relus(
    store: &ParamStore64,
    name: &str,
    specs: &[LayerSpec],
    x: &Tensor<f64>,
    seed: u64,
) -> f64 {
    let mut margin = f64::INFINITY;
    for (i, spec) in specs.iter().enumerate() {
        if matches!(spec, LayerSpec::LeakyRelu { .. }) {
            let prefix = Sequential::bind(name, &specs[..i], store).unwrap();
            let mut g = Graph64::training(seed);
            let xi = g.input(x.clone());
            let y = prefix.forward(&mut g, store, xi).unwrap();
            margin = g.value(y).data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    margin
}

/// Smallest |pre-activation| of any rectifier in the cascade for these pilots.
pub fn cascade_kink_margin(pipe: &EstimatorPipeline<f64>, pilots: &Tensor<f64>, seed: u64) -> f64 {
    let dec = min_abs_before_relus(
        &pipe.store,
        "decoder",
        &pipe.decoder.sequential().specs(),
        pilots,
        seed,
    );
    let mut g = Graph64::training(seed);
    let x = g.input(pilots.clone());
    let (lr, _) = pipe.forward(&mut g, x).unwrap();
    let lr = g.value(lr).clone();
    let sr_margin = min_abs_before_relus(&pipe.store, "srcnn", &pipe.srcnn.specs(), &lr, seed);
    let mut g = Graph64::training(seed);
    let lr_var = g.input(lr);
    let sr = srcnn_node(&mut g, &pipe.store, &pipe.srcnn, lr_var).unwrap();
    let sr = g.value(sr).clone();
    let dn_margin = min_abs_before_relus(&pipe.store, "dncnn", &pipe.dncnn.specs(), &sr, seed);
    dec.min(sr_margin).min(dn_margin)
}

/// Worst relative gradient error of the joint cascade loss on an 8x4 toy grid.
pub fn cascade_gradient_error(seed: u64) -> f64 {
    let (nf, nn) = (8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = PilotPattern::new(nf, nn, vec![(0, 0), (3, 1), (6, 3)]).unwrap();
    let dspec = DecoderSpec {
        hidden: vec![5],
        ..DecoderSpec::default()
    };
    let dec = Decoder::<f64>::new(&dspec, pattern.k(), nf, nn, &mut rng).unwrap();
    let mut pipe =
        EstimatorPipeline::build(&toy_pipeline_spec(), &pattern, &dec, &mut rng).unwrap();
    for id in pipe.store.ids().collect::<Vec<_>>() {
        let name = pipe.store.name(id).to_string();
        if pipe.store.param(id).trainable && (name.ends_with("bias") || name.ends_with("beta")) {
            pipe.store
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let batch = 2;
    let frames = toy_frames(nf, nn, batch, seed ^ 0x77);
    let target = frames.batch_targets(&[0, 1]);
    let draw = |rng: &mut ChaCha8Rng| {
        Tensor::new(
            &[batch, 2 * pattern.k()],
            (0..batch * 2 * pattern.k())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    };
    let mut pilots = draw(&mut rng);
    for _ in 0..200 {
        if cascade_kink_margin(&pipe, &pilots, seed) > 1e3 * STEP {
            break;
        }
        pilots = draw(&mut rng);
    }
    let shell = EstimatorPipeline {
        store: ParamStore64::new(),
        ..pipe.clone()
    };
    let mut store = pipe.store.clone();
    max_relative_error(&mut store, seed, &[], |g, s| {
        let view = EstimatorPipeline {
            store: s.clone(),
            ..shell.clone()
        };
        pipeline_loss(g, &view, pilots.data().to_vec(), &target, batch).unwrap()
    })
}
