//! Concrete (Gumbel-softmax) relaxation of a one-hot location choice.

use pilotforge_nn::{softmax_into, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Draws `count` standard Gumbel variates `-ln(-ln u)` with `u` uniform on (0, 1).
pub fn sample_gumbel<T: Scalar>(count: usize, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![T::zero(); count];
    fill_gumbel(&mut rng, &mut out);
    out
}

pub fn fill_gumbel<T: Scalar, R: Rng + ?Sized>(rng: &mut R, out: &mut [T]) {
    for v in out.iter_mut() {
        *v = gumbel_from_uniform(T::from_f64_lossy(rng.random::<f64>()));
    }
}

/// Inverse-CDF transform; `u` is clamped away from 0 and 1.
pub fn gumbel_from_uniform<T: Scalar>(u: T) -> T {
    let u = u.max(T::epsilon()).min(T::one() - T::epsilon());
    -(-u.ln()).ln()
}

/// One Concrete sample `m_j = softmax_j((ln alpha_j + g_j) / T)`.
pub fn concrete_forward<T: Scalar>(alpha: &[T], temperature: T, gumbel: &[T]) -> Result<Vec<T>> {
    if alpha.len() != gumbel.len() || alpha.is_empty() {
        return Err(Error::Shape(format!(
            "alpha has {} entries but gumbel noise has {}",
            alpha.len(),
            gumbel.len()
        )));
    }
    if !(temperature > T::zero()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some(index) = alpha.iter().position(|&a| !(a > T::zero())) {
        return Err(Error::NonPositiveAlpha {
            index,
            value: alpha[index].to_f64_lossy(),
        });
    }
    let logits: Vec<T> = alpha.iter().map(|a| a.ln()).collect();
    let mut out = vec![T::zero(); alpha.len()];
    softmax_into(&logits, gumbel, temperature, &mut out);
    Ok(out)
}

/// Exponential temperature decay from `t0` to `tb` over `total_epochs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub t0: f64,
    pub tb: f64,
    pub total_epochs: usize,
}

impl AnnealSchedule {
    pub fn new(t0: f64, tb: f64, total_epochs: usize) -> Result<Self> {
        let s = Self {
            t0,
            tb,
            total_epochs,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > self.tb && self.tb > 0.0 && self.t0.is_finite()) {
            return Err(Error::Config(format!(
                "annealing needs t0 > tb > 0, got t0={} tb={}",
                self.t0, self.tb
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("annealing needs at least one epoch".into()));
        }
        Ok(())
    }

    /// `t0 * (tb / t0)^(epoch / total_epochs)`; epochs past the end stay at `tb`.
    pub fn temperature(&self, epoch: usize) -> f64 {
        let frac = (epoch.min(self.total_epochs)) as f64 / self.total_epochs as f64;
        if epoch >= self.total_epochs {
            return self.tb;
        }
        self.t0 * (self.tb / self.t0).powf(frac)
    }
}

/// Free-function form of [`AnnealSchedule::temperature`].
pub fn anneal(schedule: &AnnealSchedule, epoch: usize) -> f64 {
    schedule.temperature(epoch)
}

/// `k` selector nodes over `d` grid locations.
///
/// Stores `ln(alpha)` so that every alpha stays strictly positive under gradient updates.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteSelector<T> {
    logits: Tensor<T>,
    pub temperature: T,
}

impl<T: Scalar> ConcreteSelector<T> {
    pub fn from_log_alpha(logits: Tensor<T>, temperature: T) -> Result<Self> {
        if logits.shape().len() != 2
            || logits.shape()[0] == 0
            || logits.shape()[0] > logits.shape()[1]
        {
            return Err(Error::Shape(format!(
                "selector logits must be [k, d] with 1 <= k <= d, got {:?}",
                logits.shape()
            )));
        }
        if !(temperature > T::zero()) {
            return Err(Error::Config(
                "selector temperature must be positive".into(),
            ));
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "selector logits contain non-finite values".into(),
            ));
        }
        Ok(Self {
            logits,
            temperature,
        })
    }

    pub fn from_alpha(k: usize, d: usize, alpha: &[T], temperature: T) -> Result<Self> {
        if let Some(index) = alpha.iter().position(|&a| !(a > T::zero())) {
            return Err(Error::NonPositiveAlpha {
                index,
                value: alpha[index].to_f64_lossy(),
            });
        }
        let logits = Tensor::new(&[k, d], alpha.iter().map(|a| a.ln()).collect())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::from_log_alpha(logits, temperature)
    }

    pub fn k(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn log_alpha(&self) -> &Tensor<T> {
        &self.logits
    }

    pub fn log_alpha_row(&self, node: usize) -> &[T] {
        let d = self.d();
        &self.logits.data()[node * d..(node + 1) * d]
    }

    pub fn alpha(&self) -> Vec<T> {
        self.logits.data().iter().map(|v| v.exp()).collect()
    }

    /// Mean over nodes of `max_j alpha_ij / sum_j alpha_ij`.
    pub fn mean_max_probability(&self) -> f64 {
        mean_max_probability(self.logits.data(), self.k(), self.d())
    }
}

pub(crate) fn mean_max_probability<T: Scalar>(logits: &[T], k: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..k {
        let row = &logits[i * d..(i + 1) * d];
        let max = row
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64_lossy()));
        let z: f64 = row.iter().map(|v| (v.to_f64_lossy() - max).exp()).sum();
        total += 1.0 / z;
    }
    total / k as f64
}

/// Stochastic selector layer on one frame.
///
/// Node `i` draws one Concrete sample `m_i` and returns `(<re, m_i>, <im, m_i>)`.
pub fn selector_forward<T: Scalar>(
    sel: &ConcreteSelector<T>,
    re: &[T],
    im: &[T],
    seed: u64,
) -> Result<Vec<[T; 2]>> {
    let gumbel = sample_gumbel::<T>(sel.k() * sel.d(), seed);
    selector_forward_with_noise(sel, re, im, &gumbel)
}

/// [`selector_forward`] with caller-provided `[k, d]` Gumbel noise.
pub fn selector_forward_with_noise<T: Scalar>(
    sel: &ConcreteSelector<T>,
    re: &[T],
    im: &[T],
    gumbel: &[T],
) -> Result<Vec<[T; 2]>> {
    let (k, d) = (sel.k(), sel.d());
    if re.len() != d || im.len() != d {
        return Err(Error::Shape(format!(
            "selector expects {d}-long real and imaginary vectors, got {} and {}",
            re.len(),
            im.len()
        )));
    }
    if gumbel.len() != k * d {
        return Err(Error::Shape(format!(
            "expected {} gumbel values, got {}",
            k * d,
            gumbel.len()
        )));
    }
    let mut m = vec![T::zero(); d];
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        softmax_into(
            sel.log_alpha_row(i),
            &gumbel[i * d..(i + 1) * d],
            sel.temperature,
            &mut m,
        );
        let ur = re.iter().zip(&m).map(|(&x, &w)| x * w).sum();
        let ui = im.iter().zip(&m).map(|(&x, &w)| x * w).sum();
        out.push([ur, ui]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_closed_form_at_inverse_e() {
        let g = gumbel_from_uniform((-1.0f64).exp());
        assert!(g.abs() < 1e-15);
    }

    #[test]
    fn gumbel_clamps_extremes() {
        assert!(gumbel_from_uniform(0.0_f64).is_finite());
        assert!(gumbel_from_uniform(1.0_f64).is_finite());
    }

    #[test]
    fn gumbel_is_seeded() {
        assert_eq!(sample_gumbel::<f64>(16, 4), sample_gumbel::<f64>(16, 4));
        assert_ne!(sample_gumbel::<f64>(16, 4), sample_gumbel::<f64>(16, 5));
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let n = 1_000_000;
        let mean: f64 = sample_gumbel::<f64>(n, 99).iter().sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn uniform_alpha_without_noise_is_uniform() {
        let m = concrete_forward(&[2.0f64; 5], 1.0, &[0.0; 5]).unwrap();
        assert!(m.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn cold_sample_is_one_hot() {
        let alpha = [0.5f64, 2.0, 1.0, 0.1];
        let g = [0.3, -0.2, 0.9, 0.0];
        // ln(alpha) + g = [-0.393, 0.493, 0.9, -2.303] -> argmax 2
        let m = concrete_forward(&alpha, 1e-4, &g).unwrap();
        assert!((m[2] - 1.0).abs() < 1e-6);
        assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_positive_alpha_is_a_domain_error() {
        let err = concrete_forward(&[1.0f64, 0.0], 1.0, &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::NonPositiveAlpha { index: 1, .. }));
        assert!(concrete_forward(&[1.0f64, -1.0], 1.0, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn anneal_endpoints_and_midpoint() {
        let s = AnnealSchedule::new(10.0, 0.01, 100).unwrap();
        assert_eq!(anneal(&s, 0), 10.0);
        assert!((anneal(&s, 100) - 0.01).abs() < 1e-15);
        assert!((anneal(&s, 50) - (10.0f64 * 0.01).sqrt()).abs() < 1e-12);
        assert!((anneal(&s, 50) - 0.316).abs() < 1e-3);
        assert!(AnnealSchedule::new(0.01, 10.0, 5).is_err());
        assert!(AnnealSchedule::new(1.0, 0.0, 5).is_err());
    }

    #[test]
    fn toy_selector_matches_hand_softmax() {
        // d = 4, fixed noise, T = 1: m_j = alpha_j e^{g_j} / sum_k alpha_k e^{g_k}
        let alpha = [1.0f64, 2.0, 3.0, 4.0];
        let g = [0.5, 0.0, -0.5, 0.25];
        let w: Vec<f64> = alpha
            .iter()
            .zip(&g)
            .map(|(a, b)| a * f64::exp(*b))
            .collect();
        let z: f64 = w.iter().sum();
        let re = [1.0, -2.0, 0.5, 3.0];
        let im = [0.0, 1.0, -1.0, 2.0];
        let expect_re: f64 = w.iter().zip(&re).map(|(a, b)| a / z * b).sum();
        let expect_im: f64 = w.iter().zip(&im).map(|(a, b)| a / z * b).sum();

        let sel = ConcreteSelector::from_alpha(1, 4, &alpha, 1.0).unwrap();
        let u = selector_forward_with_noise(&sel, &re, &im, &g).unwrap();
        assert!((u[0][0] - expect_re).abs() < 1e-12);
        assert!((u[0][1] - expect_im).abs() < 1e-12);
    }

    #[test]
    fn zero_grid_gives_zero_outputs() {
        let sel = ConcreteSelector::from_alpha(3, 6, &[1.5f64; 18], 0.7).unwrap();
        let u = selector_forward(&sel, &[0.0; 6], &[0.0; 6], 1).unwrap();
        assert!(u.iter().all(|p| p[0] == 0.0 && p[1] == 0.0));
    }

    #[test]
    fn selector_rejects_bad_dimensions() {
        let sel = ConcreteSelector::from_alpha(2, 4, &[1.0f64; 8], 1.0).unwrap();
        assert!(selector_forward(&sel, &[0.0; 3], &[0.0; 4], 0).is_err());
        assert!(ConcreteSelector::from_alpha(5, 4, &[1.0f64; 20], 1.0).is_err());
    }
}
