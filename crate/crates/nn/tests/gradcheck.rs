//! Analytic gradients versus central finite differences, in f64.

use pilotforge_nn::{Graph64, LayerSpec, ParamStore64, Result, Sequential, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-3;

/// Worst norm-wise relative error over all trainable tensors.
fn max_relative_error<F>(store: &mut ParamStore64, graph_seed: u64, loss_fn: F) -> f64
where
    F: Fn(&mut Graph64, &ParamStore64) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph64::training(graph_seed);
    let loss = loss_fn(&mut g, store).unwrap();
    g.backward(loss, store).unwrap();
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.param(id).trainable)
        .collect();
    let mut worst = 0.0f64;
    for id in ids {
        let analytic = store
            .get(id)
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).len()]);
        let mut numeric = vec![0.0; analytic.len()];
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            let mut eval = |v: f64| {
                store.get_mut(id).data_mut()[i] = v;
                let mut g = Graph64::training(graph_seed);
                let l = loss_fn(&mut g, store).unwrap();
                g.value(l).data()[0]
            };
            let plus = eval(orig + STEP);
            let minus = eval(orig - STEP);
            store.get_mut(id).data_mut()[i] = orig;
            numeric[i] = (plus - minus) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = analytic
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        } else {
            worst = worst.max(diff);
        }
    }
    worst
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Smallest |input| over every leaky-ReLU layer in the network.
fn kink_margin(store: &ParamStore64, specs: &[LayerSpec], seed: u64, x: &Tensor<f64>) -> f64 {
    let mut margin = f64::INFINITY;
    for (i, spec) in specs.iter().enumerate() {
        if matches!(spec, LayerSpec::LeakyRelu { .. }) {
            let prefix = Sequential::bind("net", &specs[..i], store).unwrap();
            let mut g = Graph64::training(seed);
            let xi = g.input(x.clone());
            let y = prefix.forward(&mut g, store, xi).unwrap();
            margin = g.value(y).data().iter().fold(margin, |m, v| m.min(v.abs()));
        }
    }
    margin
}

fn run_case(seed: u64, specs: &[LayerSpec], input_shape: &[usize]) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore64::new();
    let net = Sequential::build("net", specs, &mut store, &mut rng).unwrap();
    // perturb biases / batch-norm affine terms away from their trivial init
    for id in store.ids().collect::<Vec<_>>() {
        if store.param(id).trainable
            && (store.name(id).ends_with("bias") || store.name(id).ends_with("beta"))
        {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let mut x = random_input(&mut rng, input_shape);
    // central differences are meaningless across a ReLU kink
    for _ in 0..100 {
        if kink_margin(&store, specs, seed, &x) > 10.0 * STEP {
            break;
        }
        x = random_input(&mut rng, input_shape);
    }
    let mut probe = Graph64::inference();
    let xi = probe.input(x.clone());
    let out_len = net.forward(&mut probe, &store, xi).unwrap();
    let target: Vec<f64> = (0..probe.value(out_len).len())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    max_relative_error(&mut store, seed, |g, s| {
        let xi = g.input(x.clone());
        let y = net.forward(g, s, xi)?;
        g.squared_error(y, &target, 0.5)
    })
}

#[test]
fn dense_layers_match_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (b, i, o) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..6),
        );
        let err = run_case(
            seed,
            &[LayerSpec::Dense {
                inputs: i,
                units: o,
            }],
            &[b, i],
        );
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn dense_leaky_relu_network_matches_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (b, i, h, o) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(2..7),
            rng.random_range(1..5),
        );
        let specs = [
            LayerSpec::Dense {
                inputs: i,
                units: h,
            },
            LayerSpec::LeakyRelu { slope: 0.2 },
            LayerSpec::Dense {
                inputs: h,
                units: o,
            },
        ];
        let err = run_case(seed, &specs, &[b, i]);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn dropout_with_fixed_mask_matches_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (b, i, h) = (
            rng.random_range(1..4),
            rng.random_range(1..5),
            rng.random_range(2..7),
        );
        let specs = [
            LayerSpec::Dense {
                inputs: i,
                units: h,
            },
            LayerSpec::Dropout { p: 0.3 },
            LayerSpec::Dense {
                inputs: h,
                units: 2,
            },
        ];
        let err = run_case(seed, &specs, &[b, i]);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (b, ci, co) = (
            rng.random_range(1..3),
            rng.random_range(1..3),
            rng.random_range(1..3),
        );
        let k = [1, 3, 5][rng.random_range(0..3)];
        let (h, w) = (rng.random_range(1..6), rng.random_range(1..6));
        let specs = [
            LayerSpec::Conv2d {
                in_channels: ci,
                out_channels: co,
                kernel: k,
            },
            LayerSpec::LeakyRelu { slope: 0.1 },
            LayerSpec::Conv2d {
                in_channels: co,
                out_channels: 1,
                kernel: 3,
            },
        ];
        let err = run_case(seed, &specs, &[b, ci, h, w]);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn batch_norm_matches_finite_differences() {
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (b, c) = (rng.random_range(2..4), rng.random_range(1..3));
        let (h, w) = (rng.random_range(2..5), rng.random_range(1..4));
        let specs = [
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: c,
                kernel: 3,
            },
            LayerSpec::BatchNorm { channels: c },
            LayerSpec::LeakyRelu { slope: 0.0 },
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: 1,
                kernel: 1,
            },
        ];
        let err = run_case(seed, &specs, &[b, 1, h, w]);
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn linear_loss_gradient_is_input() {
    let mut store = ParamStore64::new();
    let w = store.add("w", Tensor::new(&[4], vec![0.3, -1.0, 2.0, 0.0]).unwrap());
    let x = vec![1.5, -2.0, 0.25, 9.0];
    let mut g = Graph64::training(0);
    let wv = g.param(&store, w);
    let xv = g.input(Tensor::new(&[4], x.clone()).unwrap());
    let prod = g.mul(wv, xv).unwrap();
    let loss = g.sum(prod);
    g.backward(loss, &mut store).unwrap();
    assert_eq!(store.get(w).grad().unwrap(), &x[..]);
}

#[test]
fn constant_loss_has_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore64::new();
    let net = Sequential::build(
        "n",
        &[LayerSpec::Dense {
            inputs: 3,
            units: 2,
        }],
        &mut store,
        &mut rng,
    )
    .unwrap();
    let mut g = Graph64::training(0);
    let x = g.input(Tensor::zeros(&[1, 3]));
    let y = net.forward(&mut g, &store, x).unwrap();
    let zero = g.input(Tensor::zeros(&[1, 2]));
    let k = g.mul(y, zero).unwrap();
    let loss = g.sum(k);
    g.backward(loss, &mut store).unwrap();
    for (_, p) in store.iter() {
        assert!(p
            .tensor
            .grad()
            .map_or(true, |g| g.iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn inputs_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore64::new();
    let net = Sequential::build(
        "n",
        &[LayerSpec::Dense {
            inputs: 2,
            units: 2,
        }],
        &mut store,
        &mut rng,
    )
    .unwrap();
    let frozen = store.add_buffer("frozen", Tensor::scalar(1.0));
    let mut g = Graph64::training(0);
    let x = g.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
    let y = net.forward(&mut g, &store, x).unwrap();
    let f = g.param(&store, frozen);
    let s = g.sum(y);
    let total = g.mul(s, f).unwrap();
    g.backward(total, &mut store).unwrap();
    assert!(store.get(frozen).grad().is_none());
    assert!(net.param_ids().all(|id| store.get(id).grad().is_some()));
}

#[test]
fn forward_is_deterministic_for_seed() {
    let specs = [
        LayerSpec::Dense {
            inputs: 4,
            units: 8,
        },
        LayerSpec::LeakyRelu { slope: 0.2 },
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::Dense {
            inputs: 8,
            units: 3,
        },
    ];
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore64::new();
        let net = Sequential::build("n", &specs, &mut store, &mut rng).unwrap();
        let mut g = Graph64::training(5);
        let x = g.input(random_input(&mut rng, &[3, 4]));
        let y = net.forward(&mut g, &store, x).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}
