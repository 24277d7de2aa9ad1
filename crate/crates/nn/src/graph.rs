//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into the `grad` buffers of the trainable tensors held
//! by a [`ParamStore`]. Parameters are never copied into the tape for the
//! heavy ops (dense, conv, batch-norm); the store is passed to both passes.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Dense {
        x: Var,
        w: ParamId,
        b: ParamId,
    },
    Conv2d {
        x: Var,
        w: ParamId,
        b: ParamId,
        kernel: usize,
        cols: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Reshape(Var),
    SquaredError {
        pred: Var,
        target: Vec<T>,
        scale: T,
    },
    Concrete {
        logits: ParamId,
        re: Vec<T>,
        im: Vec<T>,
        soft: Vec<T>,
        temperature: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub mean: (ParamId, Vec<T>),
    pub var: (ParamId, Vec<T>),
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    record: bool,
    training: bool,
    rng: ChaCha8Rng,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> Graph<T> {
    /// Graph for a training step: records the tape, dropout and batch-norm in training mode.
    pub fn training(seed: u64) -> Self {
        Self::with_mode(true, true, seed)
    }

    /// Graph that records the tape but evaluates dropout/batch-norm in inference mode.
    pub fn recording_eval() -> Self {
        Self::with_mode(true, false, 0)
    }

    /// Inference-only graph; nothing needed for `backward` is kept.
    pub fn inference() -> Self {
        Self::with_mode(false, false, 0)
    }

    pub fn with_mode(record: bool, training: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            record,
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stat_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Places a parameter on the tape as a leaf so that generic ops can consume it.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.clear_grad();
        self.push(value, Op::Param(id))
    }

    /// `y = x W^T + b` with `x: [batch, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, store: &ParamStore<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let xv = self.value(x);
        let wt = store.get(w);
        let (out_f, in_f) = (wt.shape()[0], wt.shape()[1]);
        if xv.shape().len() != 2 || xv.shape()[1] != in_f {
            return Err(shape_err(
                "dense",
                format!("[batch, {in_f}]"),
                format!("{:?}", xv.shape()),
            ));
        }
        let batch = xv.shape()[0];
        let bias = store.get(b).data();
        let mut out = Vec::with_capacity(batch * out_f);
        for _ in 0..batch {
            out.extend_from_slice(bias);
        }
        gemm(
            MatRef::new(xv.data(), batch, in_f),
            MatRef::new(wt.data(), out_f, in_f).t(),
            &mut out,
            true,
        );
        let value = Tensor::new(&[batch, out_f], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }))
    }

    /// Same-padded 2-D convolution. `x: [batch, c_in, h, w]`, `W: [c_out, c_in*k*k]`, `b: [c_out]`.
    pub fn conv2d(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        w: ParamId,
        b: ParamId,
        kernel: usize,
    ) -> Result<Var> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!(
                "conv2d kernel {kernel} must be odd"
            )));
        }
        let xv = self.value(x);
        let wt = store.get(w);
        let (c_out, patch) = (wt.shape()[0], wt.shape()[1]);
        if xv.shape().len() != 4 || xv.shape()[1] * kernel * kernel != patch {
            return Err(shape_err(
                "conv2d",
                format!("[batch, {}, h, w]", patch / (kernel * kernel)),
                format!("{:?}", xv.shape()),
            ));
        }
        let (batch, c_in, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let hw = h * wd;
        let bias = store.get(b).data();
        let mut out = vec![T::zero(); batch * c_out * hw];
        let mut cols_all = if self.record {
            vec![T::zero(); batch * patch * hw]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); patch * hw];
        for s in 0..batch {
            let cols: &mut [T] = if self.record {
                &mut cols_all[s * patch * hw..(s + 1) * patch * hw]
            } else {
                &mut scratch
            };
            im2col(
                &xv.data()[s * c_in * hw..(s + 1) * c_in * hw],
                c_in,
                h,
                wd,
                kernel,
                cols,
            );
            let o = &mut out[s * c_out * hw..(s + 1) * c_out * hw];
            for (c, row) in o.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = bias[c]);
            }
            gemm(
                MatRef::new(wt.data(), c_out, patch),
                MatRef::new(cols, patch, hw),
                o,
                true,
            );
        }
        let value = Tensor::new(&[batch, c_out, h, wd], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                kernel,
                cols: cols_all,
            },
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v * slope })
            .collect();
        let value = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(value, Op::LeakyRelu { x, slope })
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !self.training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Per-channel batch normalisation over `[batch, c, h, w]` (or `[batch, c]`).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<T>,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || shape[1] != store.get(gamma).len() {
            return Err(shape_err(
                "batch_norm",
                format!("[batch, {}, ...]", store.get(gamma).len()),
                format!("{shape:?}"),
            ));
        }
        let (batch, ch) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let count = batch * spatial;
        let eps_t = T::from_f64_lossy(eps);
        let g = store.get(gamma).data();
        let bta = store.get(beta).data();
        let data = xv.data();

        let (mean, var) = if self.training {
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            let n = T::from_usize(count).unwrap();
            for c in 0..ch {
                let mut acc = T::zero();
                for s in 0..batch {
                    let off = (s * ch + c) * spatial;
                    acc += data[off..off + spatial].iter().copied().sum();
                }
                mean[c] = acc / n;
                let mut acc2 = T::zero();
                for s in 0..batch {
                    let off = (s * ch + c) * spatial;
                    acc2 += data[off..off + spatial]
                        .iter()
                        .map(|&v| (v - mean[c]) * (v - mean[c]))
                        .sum();
                }
                var[c] = acc2 / n;
            }
            (mean, var)
        } else {
            (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            )
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for s in 0..batch {
            for c in 0..ch {
                let off = (s * ch + c) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (data[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + bta[c];
                }
            }
        }

        if self.training {
            let m = T::from_f64_lossy(momentum);
            let unbias = if count > 1 {
                T::from_usize(count).unwrap() / T::from_usize(count - 1).unwrap()
            } else {
                T::one()
            };
            let rm = store.get(running_mean).data();
            let rv = store.get(running_var).data();
            self.stat_updates.push(StatUpdate {
                mean: (
                    running_mean,
                    (0..ch)
                        .map(|c| (T::one() - m) * rm[c] + m * mean[c])
                        .collect(),
                ),
                var: (
                    running_var,
                    (0..ch)
                        .map(|c| (T::one() - m) * rv[c] + m * var[c] * unbias)
                        .collect(),
                ),
            });
        }

        let value = Tensor::new(&shape, out)?;
        let batch_stats = self.training;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: if self.record { xhat } else { Vec::new() },
                inv_std,
                batch_stats,
            },
        ))
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                name,
                format!("{:?}", av.shape()),
                format!("{:?}", bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `scale * sum((pred - target)^2)` as a scalar node.
    pub fn squared_error(&mut self, pred: Var, target: &[T], scale: T) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(shape_err(
                "squared_error",
                format!("{} target values", pv.len()),
                format!("{}", target.len()),
            ));
        }
        let sse: T = pv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let v = Tensor::scalar(scale * sse);
        Ok(self.push(
            v,
            Op::SquaredError {
                pred,
                target: target.to_vec(),
                scale,
            },
        ))
    }

    /// Concrete selector layer.
    ///
    /// `logits` is a `[k, d]` parameter holding `log(alpha)`. For each sample `b` and
    /// node `i`, the soft one-hot `m = softmax((logits_i + gumbel_bi) / temperature)`
    /// weights both the real and imaginary input planes. Output is `[batch, 2k]` laid
    /// out as `(re_0, im_0, re_1, im_1, ...)`.
    pub fn concrete_select(
        &mut self,
        store: &ParamStore<T>,
        logits: ParamId,
        re: &[T],
        im: &[T],
        gumbel: &[T],
        temperature: T,
    ) -> Result<Var> {
        let lt = store.get(logits);
        let (k, d) = (lt.shape()[0], lt.shape()[1]);
        if re.len() != im.len() || !re.len().is_multiple_of(d) || re.is_empty() {
            return Err(shape_err(
                "concrete_select",
                format!("batch x {d} real and imaginary planes"),
                format!("{} / {} values", re.len(), im.len()),
            ));
        }
        let batch = re.len() / d;
        if gumbel.len() != batch * k * d {
            return Err(shape_err(
                "concrete_select",
                format!("{} gumbel samples", batch * k * d),
                format!("{}", gumbel.len()),
            ));
        }
        if !(temperature > T::zero()) {
            return Err(NnError::Config("temperature must be positive".into()));
        }
        let mut soft = vec![T::zero(); batch * k * d];
        let mut out = vec![T::zero(); batch * 2 * k];
        let l = lt.data();
        for s in 0..batch {
            let (rs, is) = (&re[s * d..(s + 1) * d], &im[s * d..(s + 1) * d]);
            for i in 0..k {
                let base = (s * k + i) * d;
                let m = &mut soft[base..base + d];
                softmax_into(
                    &l[i * d..(i + 1) * d],
                    &gumbel[base..base + d],
                    temperature,
                    m,
                );
                let (mut ur, mut ui) = (T::zero(), T::zero());
                for j in 0..d {
                    ur += rs[j] * m[j];
                    ui += is[j] * m[j];
                }
                out[s * 2 * k + 2 * i] = ur;
                out[s * 2 * k + 2 * i + 1] = ui;
            }
        }
        let value = Tensor::new(&[batch, 2 * k], out)?;
        let record = self.record;
        Ok(self.push(
            value,
            Op::Concrete {
                logits,
                re: if record { re.to_vec() } else { Vec::new() },
                im: if record { im.to_vec() } else { Vec::new() },
                soft: if record { soft } else { Vec::new() },
                temperature,
            },
        ))
    }

    /// Running-statistics updates gathered during a training-mode forward pass.
    pub fn apply_stat_updates(&mut self, store: &mut ParamStore<T>) {
        for u in self.stat_updates.drain(..) {
            store
                .get_mut(u.mean.0)
                .data_mut()
                .copy_from_slice(&u.mean.1);
            store.get_mut(u.var.0).data_mut().copy_from_slice(&u.var.1);
        }
    }

    /// Back-propagates from the scalar `loss`, accumulating into trainable parameter grads.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if !self.record {
            return Err(NnError::NoGraph("graph was built in inference mode"));
        }
        if loss.0 >= self.nodes.len() {
            return Err(NnError::NoGraph("loss node does not belong to this graph"));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NoGraph("backward requires a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    if store.param(*id).trainable {
                        store.get_mut(*id).accumulate_grad(&gy);
                    }
                }
                Op::Dense { x, w, b } => {
                    let xv = self.value(*x);
                    let (batch, in_f) = (xv.shape()[0], xv.shape()[1]);
                    let out_f = store.get(*w).shape()[0];
                    if store.param(*w).trainable {
                        let mut dw = vec![T::zero(); out_f * in_f];
                        gemm(
                            MatRef::new(&gy, batch, out_f).t(),
                            MatRef::new(xv.data(), batch, in_f),
                            &mut dw,
                            false,
                        );
                        store.get_mut(*w).accumulate_grad(&dw);
                    }
                    if store.param(*b).trainable {
                        let mut db = vec![T::zero(); out_f];
                        for row in gy.chunks(out_f) {
                            db.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                        }
                        store.get_mut(*b).accumulate_grad(&db);
                    }
                    if self.wants_grad(*x) {
                        let mut dx = vec![T::zero(); batch * in_f];
                        gemm(
                            MatRef::new(&gy, batch, out_f),
                            MatRef::new(store.get(*w).data(), out_f, in_f),
                            &mut dx,
                            false,
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    kernel,
                    cols,
                } => {
                    let xv = self.value(*x);
                    let (batch, c_in, h, wd) =
                        (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                    let hw = h * wd;
                    let (c_out, patch) = (store.get(*w).shape()[0], store.get(*w).shape()[1]);
                    if store.param(*w).trainable {
                        let mut dw = vec![T::zero(); c_out * patch];
                        for s in 0..batch {
                            gemm(
                                MatRef::new(&gy[s * c_out * hw..(s + 1) * c_out * hw], c_out, hw),
                                MatRef::new(&cols[s * patch * hw..(s + 1) * patch * hw], patch, hw)
                                    .t(),
                                &mut dw,
                                true,
                            );
                        }
                        store.get_mut(*w).accumulate_grad(&dw);
                    }
                    if store.param(*b).trainable {
                        let mut db = vec![T::zero(); c_out];
                        for s in 0..batch {
                            for c in 0..c_out {
                                let off = (s * c_out + c) * hw;
                                db[c] += gy[off..off + hw].iter().copied().sum();
                            }
                        }
                        store.get_mut(*b).accumulate_grad(&db);
                    }
                    if self.wants_grad(*x) {
                        let mut dx = vec![T::zero(); batch * c_in * hw];
                        let mut dcols = vec![T::zero(); patch * hw];
                        let wt = store.get(*w).data();
                        for s in 0..batch {
                            gemm(
                                MatRef::new(wt, c_out, patch).t(),
                                MatRef::new(&gy[s * c_out * hw..(s + 1) * c_out * hw], c_out, hw),
                                &mut dcols,
                                false,
                            );
                            col2im(
                                &dcols,
                                c_in,
                                h,
                                wd,
                                *kernel,
                                &mut dx[s * c_in * hw..(s + 1) * c_in * hw],
                            );
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::LeakyRelu { x, slope } => {
                    let xv = self.value(*x).data();
                    let dx = gy
                        .iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { g * *slope })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Dropout { x, mask } => {
                    let dx = gy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let shape = self.value(*x).shape();
                    let (batch, ch) = (shape[0], shape[1]);
                    let spatial: usize = shape[2..].iter().product();
                    let g = store.get(*gamma).data().to_vec();
                    let mut dgamma = vec![T::zero(); ch];
                    let mut dbeta = vec![T::zero(); ch];
                    for s in 0..batch {
                        for c in 0..ch {
                            let off = (s * ch + c) * spatial;
                            for i in off..off + spatial {
                                dgamma[c] += gy[i] * xhat[i];
                                dbeta[c] += gy[i];
                            }
                        }
                    }
                    let mut dx = vec![T::zero(); gy.len()];
                    if *batch_stats {
                        let n = T::from_usize(batch * spatial).unwrap();
                        for c in 0..ch {
                            // sums of dxhat and dxhat * xhat over the channel
                            let s1 = g[c] * dbeta[c];
                            let s2 = g[c] * dgamma[c];
                            for s in 0..batch {
                                let off = (s * ch + c) * spatial;
                                for i in off..off + spatial {
                                    let dxhat = gy[i] * g[c];
                                    dx[i] = inv_std[c] / n * (n * dxhat - s1 - xhat[i] * s2);
                                }
                            }
                        }
                    } else {
                        for s in 0..batch {
                            for c in 0..ch {
                                let off = (s * ch + c) * spatial;
                                for i in off..off + spatial {
                                    dx[i] = gy[i] * g[c] * inv_std[c];
                                }
                            }
                        }
                    }
                    if store.param(*gamma).trainable {
                        store.get_mut(*gamma).accumulate_grad(&dgamma);
                    }
                    if store.param(*beta).trainable {
                        store.get_mut(*beta).accumulate_grad(&dbeta);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy);
                }
                Op::Sub(a, b) => {
                    let neg = gy.iter().map(|&v| -v).collect();
                    accumulate(&mut grads, *a, gy);
                    accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da = gy.iter().zip(bv).map(|(&g, &v)| g * v).collect();
                    let db = gy.iter().zip(av).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, vec![gy[0]; n]);
                }
                Op::Reshape(x) => accumulate(&mut grads, *x, gy),
                Op::SquaredError {
                    pred,
                    target,
                    scale,
                } => {
                    let two = T::from_f64_lossy(2.0) * *scale * gy[0];
                    let dp = self
                        .value(*pred)
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| two * (p - t))
                        .collect();
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Concrete {
                    logits,
                    re,
                    im,
                    soft,
                    temperature,
                } => {
                    if !store.param(*logits).trainable {
                        continue;
                    }
                    let (k, d) = {
                        let s = store.get(*logits).shape();
                        (s[0], s[1])
                    };
                    let batch = re.len() / d;
                    let mut dl = vec![T::zero(); k * d];
                    let inv_t = T::one() / *temperature;
                    let mut dm = vec![T::zero(); d];
                    for s in 0..batch {
                        let (rs, is) = (&re[s * d..(s + 1) * d], &im[s * d..(s + 1) * d]);
                        for i in 0..k {
                            let (gr, gi) = (gy[s * 2 * k + 2 * i], gy[s * 2 * k + 2 * i + 1]);
                            let m = &soft[(s * k + i) * d..(s * k + i + 1) * d];
                            let mut dot = T::zero();
                            for j in 0..d {
                                dm[j] = gr * rs[j] + gi * is[j];
                                dot += m[j] * dm[j];
                            }
                            let row = &mut dl[i * d..(i + 1) * d];
                            for j in 0..d {
                                row[j] += m[j] * (dm[j] - dot) * inv_t;
                            }
                        }
                    }
                    store.get_mut(*logits).accumulate_grad(&dl);
                }
            }
        }
        Ok(())
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Input)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable `softmax((logits + noise) / temperature)` written into `out`.
pub fn softmax_into<T: Scalar>(logits: &[T], noise: &[T], temperature: T, out: &mut [T]) {
    let mut max = T::neg_infinity();
    for j in 0..logits.len() {
        let z = (logits[j] + noise[j]) / temperature;
        out[j] = z;
        if z > max {
            max = z;
        }
    }
    let mut total = T::zero();
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// Columns `[c_in*k*k, h*w]` of zero-padded patches, for same-size convolution.
fn im2col<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (ys, ye) = valid_range(h, ki, pad);
                let (xs, xe) = valid_range(w, kj, pad);
                if xs == xe {
                    dst.fill(T::zero());
                    continue;
                }
                dst[..ys * w].fill(T::zero());
                dst[ye * w..].fill(T::zero());
                for y in ys..ye {
                    let sy = y + ki - pad;
                    let line = &mut dst[y * w..(y + 1) * w];
                    line[..xs].fill(T::zero());
                    line[xe..].fill(T::zero());
                    line[xs..xe]
                        .copy_from_slice(&plane[sy * w + xs + kj - pad..sy * w + xe + kj - pad]);
                }
            }
        }
    }
}

/// Output positions `[start, end)` whose input `pos + offset - pad` lies inside `0..len`.
fn valid_range(len: usize, offset: usize, pad: usize) -> (usize, usize) {
    let start = pad.saturating_sub(offset).min(len);
    let end = (len + pad).saturating_sub(offset).min(len).max(start);
    (start, end)
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input planes.
fn col2im<T: Scalar>(cols: &[T], c_in: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let (ys, ye) = valid_range(h, ki, pad);
                let (xs, xe) = valid_range(w, kj, pad);
                if xs == xe {
                    continue;
                }
                for y in ys..ye {
                    let sy = y + ki - pad;
                    let from = &src[y * w + xs..y * w + xe];
                    let to = &mut plane[sy * w + xs + kj - pad..sy * w + xe + kj - pad];
                    to.iter_mut().zip(from).for_each(|(a, &g)| *a += g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_normalised_and_stable() {
        let logits = [1000.0f64, 1001.0, 999.0];
        let mut out = [0.0; 3];
        softmax_into(&logits, &[0.0; 3], 1.0, &mut out);
        assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(out[1] > out[0] && out[0] > out[2]);
    }

    fn naive_im2col(x: &[f64], c_in: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
        let pad = (k / 2) as isize;
        let mut out = Vec::with_capacity(c_in * k * k * h * w);
        for c in 0..c_in {
            for ki in 0..k as isize {
                for kj in 0..k as isize {
                    for y in 0..h as isize {
                        for xx in 0..w as isize {
                            let (sy, sx) = (y + ki - pad, xx + kj - pad);
                            let inside = sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize;
                            out.push(if inside {
                                x[c * h * w + sy as usize * w + sx as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_patches() {
        for (c, h, w, k) in [
            (1, 1, 1, 5),
            (2, 4, 3, 3),
            (1, 2, 5, 5),
            (3, 6, 1, 3),
            (1, 3, 2, 9),
            (2, 1, 4, 1),
        ] {
            let x: Vec<f64> = (0..c * h * w).map(|i| i as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; c * k * k * h * w];
            im2col(&x, c, h, w, k, &mut cols);
            assert_eq!(cols, naive_im2col(&x, c, h, w, k), "{c} {h} {w} {k}");
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        for (c, h, w, k) in [
            (2, 4, 3, 3),
            (1, 1, 1, 5),
            (1, 2, 5, 5),
            (3, 6, 1, 3),
            (1, 3, 2, 9),
            (2, 4, 4, 3),
        ] {
            let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let y: Vec<f64> = (0..c * k * k * h * w)
                .map(|i| (i as f64 * 0.11).cos())
                .collect();
            let mut cols = vec![0.0; y.len()];
            im2col(&x, c, h, w, k, &mut cols);
            let mut back = vec![0.0; x.len()];
            col2im(&y, c, h, w, k, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{c} {h} {w} {k}");
        }
    }

    #[test]
    fn backward_on_inference_graph_is_rejected() {
        let mut store = ParamStore::<f32>::new();
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::scalar(1.0));
        let s = g.sum(x);
        assert!(matches!(
            g.backward(s, &mut store),
            Err(NnError::NoGraph(_))
        ));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut store = ParamStore::<f32>::new();
        let mut g = Graph::<f32>::training(0);
        let x = g.input(Tensor::zeros(&[3]));
        assert!(g.backward(x, &mut store).is_err());
    }
}
