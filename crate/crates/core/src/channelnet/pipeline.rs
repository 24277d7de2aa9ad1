use std::path::Path;

use pilotforge_nn::{Checkpoint, Graph, LayerSpec, ParamStore, Scalar, Sequential, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ComplexGrid;
use crate::selection::decoder::{meta_parse, meta_str};
use crate::selection::{Decoder, DecoderNet, DecoderSpec, PilotPattern, DECODER_NAME};

/// Initial scale of the last convolution in each residual branch.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

const SRCNN_NAME: &str = "srcnn";
const DNCNN_NAME: &str = "dncnn";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrcnnSpec {
    /// Feature maps after the first and second convolutions.
    pub channels: [usize; 2],
    pub kernels: [usize; 3],
}

impl Default for SrcnnSpec {
    fn default() -> Self {
        Self {
            channels: [64, 32],
            kernels: [9, 1, 5],
        }
    }
}

impl SrcnnSpec {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let [c1, c2] = self.channels;
        let [k1, k2, k3] = self.kernels;
        vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: c1,
                kernel: k1,
            },
            LayerSpec::LeakyRelu { slope: 0.0 },
            LayerSpec::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kernel: k2,
            },
            LayerSpec::LeakyRelu { slope: 0.0 },
            LayerSpec::Conv2d {
                in_channels: c2,
                out_channels: 2,
                kernel: k3,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DncnnSpec {
    /// Total convolution count, at least 2.
    pub depth: usize,
    pub width: usize,
    pub kernel: usize,
}

impl Default for DncnnSpec {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 32,
            kernel: 3,
        }
    }
}

impl DncnnSpec {
    pub fn layers(&self) -> Vec<LayerSpec> {
        let (w, k) = (self.width, self.kernel);
        let mut specs = vec![
            LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: w,
                kernel: k,
            },
            LayerSpec::LeakyRelu { slope: 0.0 },
        ];
        for _ in 0..self.depth.saturating_sub(2) {
            specs.push(LayerSpec::Conv2d {
                in_channels: w,
                out_channels: w,
                kernel: k,
            });
            specs.push(LayerSpec::BatchNorm { channels: w });
            specs.push(LayerSpec::LeakyRelu { slope: 0.0 });
        }
        specs.push(LayerSpec::Conv2d {
            in_channels: w,
            out_channels: 2,
            kernel: k,
        });
        specs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default)]
    pub srcnn: SrcnnSpec,
    #[serde(default)]
    pub dncnn: DncnnSpec,
    #[serde(default = "yes")]
    pub fine_tune_decoder: bool,
    /// Learning-rate multiplier for the decoder while it is fine-tuned.
    #[serde(default = "decoder_lr_scale")]
    pub decoder_lr_scale: f64,
}

fn yes() -> bool {
    true
}

fn decoder_lr_scale() -> f64 {
    0.1
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            srcnn: SrcnnSpec::default(),
            dncnn: DncnnSpec::default(),
            fine_tune_decoder: true,
            decoder_lr_scale: decoder_lr_scale(),
        }
    }
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.decoder_lr_scale > 0.0 && self.decoder_lr_scale.is_finite()) {
            return Err(Error::Config(format!(
                "decoder_lr_scale must be positive, got {}",
                self.decoder_lr_scale
            )));
        }
        if self.dncnn.depth < 2 {
            return Err(Error::Config(format!(
                "DnCNN depth {} must be at least 2",
                self.dncnn.depth
            )));
        }
        for spec in self.srcnn.layers().iter().chain(&self.dncnn.layers()) {
            spec.validate()?;
        }
        Ok(())
    }
}

/// SRCNN refinement with an identity skip: `x + S(x)`.
pub fn srcnn_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &Sequential,
    x: Var,
) -> Result<Var> {
    let r = net.forward(g, store, x)?;
    Ok(g.add(x, r)?)
}

/// Residual denoiser: `x - R(x)`.
pub fn dncnn_node<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    net: &Sequential,
    x: Var,
) -> Result<Var> {
    let r = net.forward(g, store, x)?;
    Ok(g.sub(x, r)?)
}

fn apply_inference<T: Scalar>(
    store: &ParamStore<T>,
    net: &Sequential,
    x: &Tensor<T>,
    node: fn(&mut Graph<T>, &ParamStore<T>, &Sequential, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    if x.shape().len() != 4 || x.shape()[1] != 2 {
        return Err(Error::Shape(format!(
            "expected [batch, 2, nf, nn] planes, got {:?}",
            x.shape()
        )));
    }
    let mut g = Graph::inference();
    let xi = g.input(x.clone());
    let y = node(&mut g, store, net, xi)?;
    Ok(g.take_value(y))
}

/// Inference-mode SRCNN stage on `[batch, 2, nf, nn]` planes.
pub fn srcnn_forward<T: Scalar>(
    store: &ParamStore<T>,
    net: &Sequential,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    apply_inference(store, net, x, srcnn_node)
}

/// Inference-mode DnCNN-B stage on `[batch, 2, nf, nn]` planes.
pub fn dncnn_forward<T: Scalar>(
    store: &ParamStore<T>,
    net: &Sequential,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    apply_inference(store, net, x, dncnn_node)
}

/// `(mean |est - ideal|^2, that / mean |ideal|^2)`.
pub fn mse<T: Scalar>(estimate: &ComplexGrid<T>, ideal: &ComplexGrid<T>) -> Result<(f64, f64)> {
    if !estimate.same_shape(ideal) {
        return Err(Error::Shape(format!(
            "estimate is {}x{} but ideal grid is {}x{}",
            estimate.nf(),
            estimate.nn(),
            ideal.nf(),
            ideal.nn()
        )));
    }
    let n = ideal.len() as f64;
    let raw = estimate
        .values()
        .iter()
        .zip(ideal.values())
        .map(|(a, b)| (a - b).norm_sqr().to_f64_lossy())
        .sum::<f64>()
        / n;
    let power = ideal.mean_power().to_f64_lossy();
    let norm = if power > 0.0 {
        raw / power
    } else {
        f64::INFINITY
    };
    Ok((raw, norm))
}

/// Trained cascade bound to its pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorPipeline<T> {
    pub spec: PipelineSpec,
    pub pattern: PilotPattern,
    pub decoder: DecoderNet,
    pub srcnn: Sequential,
    pub dncnn: Sequential,
    pub store: ParamStore<T>,
}

impl<T: Scalar> EstimatorPipeline<T> {
    /// Fresh SRCNN and DnCNN-B stages behind a copy of `decoder`.
    pub fn build<R: Rng + ?Sized>(
        spec: &PipelineSpec,
        pattern: &PilotPattern,
        decoder: &Decoder<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        if decoder.k() != pattern.k()
            || decoder.net.nf != pattern.nf()
            || decoder.net.nn != pattern.nn()
        {
            return Err(Error::Config(format!(
                "decoder for k={} on {}x{} does not match the {}-pilot {}x{} pattern",
                decoder.k(),
                decoder.net.nf,
                decoder.net.nn,
                pattern.k(),
                pattern.nf(),
                pattern.nn()
            )));
        }
        let mut store = decoder.store.clone();
        store.zero_grad();
        let dec = DecoderNet::bind(
            &decoder.net.spec,
            decoder.k(),
            pattern.nf(),
            pattern.nn(),
            &store,
        )?;
        for id in dec.sequential().param_ids() {
            store.set_trainable(id, spec.fine_tune_decoder);
        }
        let srcnn = Sequential::build(SRCNN_NAME, &spec.srcnn.layers(), &mut store, rng)?;
        let dncnn = Sequential::build(DNCNN_NAME, &spec.dncnn.layers(), &mut store, rng)?;
        for net in [&srcnn, &dncnn] {
            let last = net.layers().last().expect("non-empty stage").params()[0];
            let scale = T::from_f64_lossy(RESIDUAL_INIT_SCALE);
            store
                .get_mut(last)
                .data_mut()
                .iter_mut()
                .for_each(|w| *w *= scale);
        }
        Ok(Self {
            spec: spec.clone(),
            pattern: pattern.clone(),
            decoder: dec,
            srcnn,
            dncnn,
            store,
        })
    }

    pub fn nf(&self) -> usize {
        self.pattern.nf()
    }

    pub fn nn(&self) -> usize {
        self.pattern.nn()
    }

    /// Graph for `[batch, 2k]` pilots; returns the decoder planes and the cascade output,
    /// both `[batch, 2, nf, nn]`.
    pub fn forward(&self, g: &mut Graph<T>, pilots: Var) -> Result<(Var, Var)> {
        let batch = g.value(pilots).shape()[0];
        let flat = self.decoder.forward(g, &self.store, pilots)?;
        let lr = g.reshape(flat, &[batch, 2, self.nf(), self.nn()])?;
        let sr = srcnn_node(g, &self.store, &self.srcnn, lr)?;
        let out = dncnn_node(g, &self.store, &self.dncnn, sr)?;
        Ok((lr, out))
    }

    /// Decoder-only and full-cascade plane outputs for `[batch, 2k]` pilots.
    pub fn run_batch(&self, pilots: Vec<T>, batch: usize) -> Result<(Vec<T>, Vec<T>)> {
        let mut g = Graph::inference();
        let x = g.input(
            Tensor::new(&[batch, 2 * self.pattern.k()], pilots)
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
        let (lr, out) = self.forward(&mut g, x)?;
        let lr = g.value(lr).data().to_vec();
        Ok((lr, g.take_value(out).into_data()))
    }

    /// Cascade estimate of the full grid from a received frame.
    pub fn estimate(&self, noisy: &ComplexGrid<T>) -> Result<ComplexGrid<T>> {
        Ok(self.estimate_with_decoder(noisy)?.1)
    }

    /// `(decoder-only estimate, cascade estimate)` for one received frame.
    pub fn estimate_with_decoder(
        &self,
        noisy: &ComplexGrid<T>,
    ) -> Result<(ComplexGrid<T>, ComplexGrid<T>)> {
        self.pattern.fits(noisy)?;
        let pilots = crate::selection::train::gathered_input(noisy, &self.pattern)?;
        let (lr, out) = self.run_batch(pilots, 1)?;
        Ok((
            ComplexGrid::from_planes(self.nf(), self.nn(), &lr)?,
            ComplexGrid::from_planes(self.nf(), self.nn(), &out)?,
        ))
    }

    pub fn estimate_batch(&self, noisy: &[ComplexGrid<T>]) -> Result<Vec<ComplexGrid<T>>> {
        if noisy.is_empty() {
            return Ok(Vec::new());
        }
        let mut pilots = Vec::with_capacity(noisy.len() * 2 * self.pattern.k());
        for grid in noisy {
            self.pattern.fits(grid)?;
            pilots.extend(crate::selection::train::gathered_input(
                grid,
                &self.pattern,
            )?);
        }
        let (_, out) = self.run_batch(pilots, noisy.len())?;
        out.chunks(2 * self.nf() * self.nn())
            .map(|planes| ComplexGrid::from_planes(self.nf(), self.nn(), planes))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new(self.store.clone());
        ckpt.params.zero_grad();
        self.decoder.write_meta(&mut ckpt.meta);
        let join = |net: &Sequential| {
            net.specs()
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(";")
        };
        let meta = [
            ("kind", "pipeline".to_string()),
            ("srcnn.layers", join(&self.srcnn)),
            ("dncnn.layers", join(&self.dncnn)),
            (
                "srcnn.channels",
                format!(
                    "{},{}",
                    self.spec.srcnn.channels[0], self.spec.srcnn.channels[1]
                ),
            ),
            (
                "srcnn.kernels",
                self.spec
                    .srcnn
                    .kernels
                    .iter()
                    .map(|k| k.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("dncnn.depth", self.spec.dncnn.depth.to_string()),
            ("dncnn.width", self.spec.dncnn.width.to_string()),
            ("dncnn.kernel", self.spec.dncnn.kernel.to_string()),
            ("fine_tune_decoder", self.spec.fine_tune_decoder.to_string()),
            ("decoder_lr_scale", self.spec.decoder_lr_scale.to_string()),
            ("pattern", self.pattern.to_text()),
            ("pattern.sha256", self.pattern.hash()),
        ];
        for (k, v) in meta {
            ckpt.meta.insert(k.into(), v);
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let meta = &ckpt.meta;
        if meta.get("kind").map(String::as_str) != Some("pipeline") {
            return Err(Error::Config(
                "checkpoint does not hold an estimation pipeline".into(),
            ));
        }
        let pattern = PilotPattern::from_text(meta_str(meta, "pattern")?)?;
        if pattern.hash() != meta_str(meta, "pattern.sha256")? {
            return Err(Error::Config(
                "pipeline pattern does not match its recorded hash".into(),
            ));
        }
        let list = |key: &str| -> Result<Vec<usize>> {
            meta_str(meta, key)?
                .split(',')
                .map(|s| {
                    s.parse()
                        .map_err(|_| Error::Config(format!("bad `{key}` entry `{s}`")))
                })
                .collect()
        };
        let ch = list("srcnn.channels")?;
        let ks = list("srcnn.kernels")?;
        if ch.len() != 2 || ks.len() != 3 {
            return Err(Error::Config("malformed SRCNN layout in checkpoint".into()));
        }
        let spec = PipelineSpec {
            srcnn: SrcnnSpec {
                channels: [ch[0], ch[1]],
                kernels: [ks[0], ks[1], ks[2]],
            },
            dncnn: DncnnSpec {
                depth: meta_parse(meta, "dncnn.depth")?,
                width: meta_parse(meta, "dncnn.width")?,
                kernel: meta_parse(meta, "dncnn.kernel")?,
            },
            fine_tune_decoder: meta_parse(meta, "fine_tune_decoder")?,
            decoder_lr_scale: meta_parse(meta, "decoder_lr_scale")?,
        };
        spec.validate()?;
        let decoder = DecoderNet::from_meta(meta, &ckpt.params)?;
        if decoder.k != pattern.k() {
            return Err(Error::Config(
                "pipeline decoder width disagrees with its pattern".into(),
            ));
        }
        let srcnn = Sequential::bind(SRCNN_NAME, &spec.srcnn.layers(), &ckpt.params)?;
        let dncnn = Sequential::bind(DNCNN_NAME, &spec.dncnn.layers(), &ckpt.params)?;
        Ok(Self {
            spec,
            pattern,
            decoder,
            srcnn,
            dncnn,
            store: ckpt.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// The decoder part as a standalone network.
    pub fn decoder(&self) -> Result<Decoder<T>> {
        Decoder::extract(&self.decoder, &self.store)
    }

    pub fn decoder_spec(&self) -> &DecoderSpec {
        &self.decoder.spec
    }

    pub fn stage_prefixes() -> [&'static str; 3] {
        [DECODER_NAME, SRCNN_NAME, DNCNN_NAME]
    }
}
