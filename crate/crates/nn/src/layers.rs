use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{kaiming_uniform, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Declarative description of one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        units: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Dropout {
        p: f64,
    },
    BatchNorm {
        channels: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { inputs, units } if inputs == 0 || units == 0 => {
                Err(NnError::Config("dense layer needs non-zero widths".into()))
            }
            LayerSpec::Conv2d { kernel, .. } if kernel % 2 == 0 => Err(NnError::Config(format!(
                "conv2d kernel {kernel} must be odd for same padding"
            ))),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                ..
            } if in_channels == 0 || out_channels == 0 => Err(NnError::Config(
                "conv2d needs non-zero channel counts".into(),
            )),
            LayerSpec::Dropout { p } if !(0.0..1.0).contains(&p) => Err(NnError::Config(format!(
                "dropout probability {p} outside [0, 1)"
            ))),
            LayerSpec::LeakyRelu { slope } if !slope.is_finite() => {
                Err(NnError::Config("leaky relu slope must be finite".into()))
            }
            LayerSpec::BatchNorm { channels: 0 } => {
                Err(NnError::Config("batch norm over zero channels".into()))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dense { inputs, units } => write!(f, "dense({inputs},{units})"),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                write!(f, "conv2d({in_channels},{out_channels},{kernel})")
            }
            LayerSpec::LeakyRelu { slope } => write!(f, "leaky_relu({slope})"),
            LayerSpec::Dropout { p } => write!(f, "dropout({p})"),
            LayerSpec::BatchNorm { channels } => write!(f, "batch_norm({channels})"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || NnError::Config(format!("unparseable layer spec `{s}`"));
        let (kind, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest.strip_suffix(')').ok_or_else(bad)?.split(',').collect();
        let int = |i: usize| -> Result<usize> {
            args.get(i)
                .and_then(|a| a.trim().parse().ok())
                .ok_or_else(bad)
        };
        let float = |i: usize| -> Result<f64> {
            args.get(i)
                .and_then(|a| a.trim().parse().ok())
                .ok_or_else(bad)
        };
        let spec = match kind {
            "dense" => LayerSpec::Dense {
                inputs: int(0)?,
                units: int(1)?,
            },
            "conv2d" => LayerSpec::Conv2d {
                in_channels: int(0)?,
                out_channels: int(1)?,
                kernel: int(2)?,
            },
            "leaky_relu" => LayerSpec::LeakyRelu { slope: float(0)? },
            "dropout" => LayerSpec::Dropout { p: float(0)? },
            "batch_norm" => LayerSpec::BatchNorm { channels: int(0)? },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A layer bound to its parameters in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    params: Vec<ParamId>,
}

impl Layer {
    /// Registers the layer's parameters under `name` and initialises them.
    ///
    /// `next_slope` is the negative slope of the activation that follows, used for
    /// the Kaiming gain.
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        spec: LayerSpec,
        store: &mut ParamStore<T>,
        name: &str,
        next_slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Dense { inputs, units } => vec![
                store.add(
                    format!("{name}.weight"),
                    kaiming_uniform(&[units, inputs], inputs, next_slope, rng),
                ),
                store.add(format!("{name}.bias"), Tensor::zeros(&[units])),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let fan_in = in_channels * kernel * kernel;
                vec![
                    store.add(
                        format!("{name}.weight"),
                        kaiming_uniform(&[out_channels, fan_in], fan_in, next_slope, rng),
                    ),
                    store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
                ]
            }
            LayerSpec::BatchNorm { channels } => vec![
                store.add(
                    format!("{name}.gamma"),
                    Tensor::filled(&[channels], T::one()),
                ),
                store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
                store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
                store.add_buffer(
                    format!("{name}.running_var"),
                    Tensor::filled(&[channels], T::one()),
                ),
            ],
            LayerSpec::LeakyRelu { .. } | LayerSpec::Dropout { .. } => Vec::new(),
        };
        Ok(Self { spec, params })
    }

    /// Rebinds a layer to parameters already present in `store` (e.g. loaded from a checkpoint).
    pub fn bind<T: Scalar>(spec: LayerSpec, store: &ParamStore<T>, name: &str) -> Result<Self> {
        spec.validate()?;
        let find = |suffix: &str| {
            store
                .find(&format!("{name}.{suffix}"))
                .ok_or_else(|| NnError::Checkpoint(format!("missing parameter `{name}.{suffix}`")))
        };
        let params = match spec {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                vec![find("weight")?, find("bias")?]
            }
            LayerSpec::BatchNorm { .. } => vec![
                find("gamma")?,
                find("beta")?,
                find("running_mean")?,
                find("running_var")?,
            ],
            _ => Vec::new(),
        };
        Ok(Self { spec, params })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        match self.spec {
            LayerSpec::Dense { .. } => g.dense(store, x, self.params[0], self.params[1]),
            LayerSpec::Conv2d { kernel, .. } => {
                g.conv2d(store, x, self.params[0], self.params[1], kernel)
            }
            LayerSpec::LeakyRelu { slope } => Ok(g.leaky_relu(x, T::from_f64_lossy(slope))),
            LayerSpec::Dropout { p } => g.dropout(x, p),
            LayerSpec::BatchNorm { .. } => g.batch_norm(
                store,
                x,
                self.params[0],
                self.params[1],
                self.params[2],
                self.params[3],
                BN_EPS,
                BN_MOMENTUM,
            ),
        }
    }
}

/// Layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    name: String,
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn build<T: Scalar, R: Rng + ?Sized>(
        name: &str,
        specs: &[LayerSpec],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let next_slope = specs[i + 1..]
                .iter()
                .find_map(|s| match s {
                    LayerSpec::LeakyRelu { slope } => Some(*slope),
                    LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => Some(1.0),
                    _ => None,
                })
                .unwrap_or(1.0);
            layers.push(Layer::build(
                *spec,
                store,
                &format!("{name}.{i}"),
                next_slope,
                rng,
            )?);
        }
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn bind<T: Scalar>(name: &str, specs: &[LayerSpec], store: &ParamStore<T>) -> Result<Self> {
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, s)| Layer::bind(*s, store, &format!("{name}.{i}")))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| l.params().iter().copied())
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, store, x)?;
        }
        Ok(x)
    }
}
