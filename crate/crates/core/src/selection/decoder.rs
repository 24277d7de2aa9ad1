//! MLP decoder from `k` pilot observations to a full `2 x nf x nn` grid.

use std::collections::BTreeMap;
use std::path::Path;

use pilotforge_nn::{Checkpoint, Graph, LayerSpec, ParamStore, Scalar, Sequential, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ComplexGrid;

pub const DECODER_NAME: &str = "decoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub dropout: f64,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            hidden: vec![256, 512, 1024],
            slope: 0.2,
            dropout: 0.1,
        }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) {
            return Err(Error::Config(
                "decoder hidden widths must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "decoder dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if !self.slope.is_finite() {
            return Err(Error::Config("decoder slope must be finite".into()));
        }
        Ok(())
    }

    /// Layer list for `k` pilots on a `d`-location frame: input `2k`, output `2d`.
    pub fn layers(&self, k: usize, d: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(3 * self.hidden.len() + 1);
        let mut prev = 2 * k;
        for &h in &self.hidden {
            specs.push(LayerSpec::Dense {
                inputs: prev,
                units: h,
            });
            specs.push(LayerSpec::LeakyRelu { slope: self.slope });
            if self.dropout > 0.0 {
                specs.push(LayerSpec::Dropout { p: self.dropout });
            }
            prev = h;
        }
        specs.push(LayerSpec::Dense {
            inputs: prev,
            units: 2 * d,
        });
        specs
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, String>) {
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        meta.insert("decoder.hidden".into(), hidden.join(","));
        meta.insert("decoder.slope".into(), self.slope.to_string());
        meta.insert("decoder.dropout".into(), self.dropout.to_string());
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let hidden = meta_str(meta, "decoder.hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("bad decoder width `{s}`")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let spec = Self {
            hidden,
            slope: meta_parse(meta, "decoder.slope")?,
            dropout: meta_parse(meta, "decoder.dropout")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn meta_str<'a>(meta: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{key}`")))
}

pub(crate) fn meta_parse<V: std::str::FromStr>(
    meta: &BTreeMap<String, String>,
    key: &str,
) -> Result<V> {
    meta_str(meta, key)?
        .parse()
        .map_err(|_| Error::Config(format!("checkpoint metadata `{key}` is malformed")))
}

/// Decoder layers bound to parameters in some store.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub spec: DecoderSpec,
    pub k: usize,
    pub nf: usize,
    pub nn: usize,
    net: Sequential,
}

impl DecoderNet {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: &DecoderSpec,
        k: usize,
        nf: usize,
        nn: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let net = Sequential::build(DECODER_NAME, &spec.layers(k, nf * nn), store, rng)?;
        Ok(Self {
            spec: spec.clone(),
            k,
            nf,
            nn,
            net,
        })
    }

    pub fn bind<T: Scalar>(
        spec: &DecoderSpec,
        k: usize,
        nf: usize,
        nn: usize,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        spec.validate()?;
        let net = Sequential::bind(DECODER_NAME, &spec.layers(k, nf * nn), store)?;
        Ok(Self {
            spec: spec.clone(),
            k,
            nf,
            nn,
            net,
        })
    }

    pub fn sequential(&self) -> &Sequential {
        &self.net
    }

    /// `[batch, 2k]` interleaved pilots to `[batch, 2d]` real plane then imaginary plane.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        u: Var,
    ) -> Result<Var> {
        let width = g.value(u).shape().last().copied().unwrap_or(0);
        if width != 2 * self.k {
            return Err(Error::Shape(format!(
                "decoder trained for k={} expects {} inputs per frame, got {width}",
                self.k,
                2 * self.k
            )));
        }
        Ok(self.net.forward(g, store, u)?)
    }

    pub fn write_meta(&self, meta: &mut BTreeMap<String, String>) {
        self.spec.to_meta(meta);
        meta.insert("decoder.k".into(), self.k.to_string());
        meta.insert("grid.nf".into(), self.nf.to_string());
        meta.insert("grid.nn".into(), self.nn.to_string());
    }

    pub fn from_meta<T: Scalar>(
        meta: &BTreeMap<String, String>,
        store: &ParamStore<T>,
    ) -> Result<Self> {
        let spec = DecoderSpec::from_meta(meta)?;
        Self::bind(
            &spec,
            meta_parse(meta, "decoder.k")?,
            meta_parse(meta, "grid.nf")?,
            meta_parse(meta, "grid.nn")?,
            store,
        )
    }
}

/// A standalone decoder owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub net: DecoderNet,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(
        spec: &DecoderSpec,
        k: usize,
        nf: usize,
        nn: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = DecoderNet::build(spec, k, nf, nn, &mut store, rng)?;
        Ok(Self { net, store })
    }

    /// Copies the `decoder.*` parameters out of a larger store.
    pub fn extract(net: &DecoderNet, store: &ParamStore<T>) -> Result<Self> {
        let own = store.subset(&format!("{DECODER_NAME}."));
        let net = DecoderNet::bind(&net.spec, net.k, net.nf, net.nn, &own)?;
        Ok(Self { net, store: own })
    }

    pub fn k(&self) -> usize {
        self.net.k
    }

    /// Decodes a batch of interleaved pilot rows into plane-layout grids `[batch, 2d]`.
    pub fn decode_batch(&self, u: &[T], batch: usize) -> Result<Vec<T>> {
        let mut g = Graph::inference();
        let x = g.input(
            Tensor::new(&[batch, 2 * self.k()], u.to_vec())
                .map_err(|e| Error::Shape(e.to_string()))?,
        );
        let y = self.net.forward(&mut g, &self.store, x)?;
        Ok(g.take_value(y).into_data())
    }

    pub fn interpolate(&self, u: &[[T; 2]]) -> Result<ComplexGrid<T>> {
        if u.len() != self.k() {
            return Err(Error::Shape(format!(
                "decoder trained for k={} received {} pilots",
                self.k(),
                u.len()
            )));
        }
        let flat: Vec<T> = u.iter().flat_map(|p| p.iter().copied()).collect();
        let planes = self.decode_batch(&flat, 1)?;
        ComplexGrid::from_planes(self.net.nf, self.net.nn, &planes)
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut ckpt = Checkpoint::new(self.store.clone());
        self.net.write_meta(&mut ckpt.meta);
        ckpt.meta.insert("kind".into(), "decoder".into());
        ckpt
    }

    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let net = DecoderNet::from_meta(&ckpt.meta, &ckpt.params)?;
        Ok(Self {
            net,
            store: ckpt.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}
