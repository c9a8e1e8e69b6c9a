//! Conditional latent diffusion: noise schedule, forward process, the
//! noise-prediction loss, and strided DDPM ancestral sampling.

pub mod denoiser;
pub mod train;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub use denoiser::{Denoiser, DenoiserConfig, Parametrization};

/// Offset of the cosine schedule.
const COSINE_S: f64 = 0.008;
/// Per-step beta ceiling; keeps `alpha_bar_T` strictly positive.
const MAX_BETA: f64 = 0.999;
/// Predicted clean latents are clipped to this magnitude while sampling.
pub const X0_CLIP: f64 = 4.0;

/// Cumulative signal coefficients `alpha_bar[0..=T]`, with `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule with `steps` diffusion steps.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + COSINE_S) / (1.0 + COSINE_S) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=steps {
            let beta = (1.0 - (f(t) / f0) / (f(t - 1) / f0)).clamp(1e-8, MAX_BETA);
            let prev = alpha_bar[t - 1];
            alpha_bar.push(prev * (1.0 - beta));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Builds a schedule from explicit coefficients, checking monotonicity.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 || alpha_bar[0] != 1.0 {
            return Err(Error::Config("alpha_bar must start at 1 and have T >= 1".into()));
        }
        if alpha_bar.windows(2).any(|w| !(w[1] < w[0])) || alpha_bar.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("alpha_bar must be positive and strictly decreasing".into()));
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// `count` timesteps evenly strided from `T` down towards 1.
    pub fn strided_timesteps(&self, count: usize) -> Result<Vec<usize>> {
        let t_max = self.steps();
        if count == 0 || count > t_max {
            return Err(Error::invalid(format!("sample steps {count} outside 1..={t_max}")));
        }
        let mut ts: Vec<usize> = (1..=count)
            .rev()
            .map(|i| ((i * t_max) as f64 / count as f64).round() as usize)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` with `ab = alpha_bar[t]`.
pub fn forward_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    schedule.check_t(t)?;
    forward_noise_ab(schedule.alpha_bar(t), x0, eps)
}

/// Forward mix for an explicit coefficient `ab` in `[0, 1]`.
pub fn forward_noise_ab(ab: f64, x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&ab) {
        return Err(Error::invalid(format!("alpha_bar {ab} outside [0, 1]")));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Uniform draw in dB over `[lo, hi]`; `None` means a noiseless channel.
pub fn sample_snr<R: Rng + ?Sized>(range: Option<(f64, f64)>, rng: &mut R) -> f64 {
    match range {
        None => f64::INFINITY,
        Some((lo, hi)) if lo == hi => lo,
        Some((lo, hi)) => rng.gen_range(lo..=hi),
    }
}

/// Noise-prediction network used by the sampler.
pub trait NoisePredictor {
    /// Predicted noise for `x_t` (`[B, L, h, w]`) at per-item timesteps `t`
    /// given the received embeddings `cond` (`[B, C, s, s]`).
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor>;
}

/// Graph pieces of one loss evaluation.
pub struct LossTerms {
    pub loss: Var,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

/// `mean ||eps - predict(x_t, t, cond)||^2` with `t ~ U{1..T}` and `eps ~ N(0, I)`.
///
/// `predict` builds the network's prediction on `g`; the timestep and noise
/// for batch item `i` are drawn in item order from `rng`.
pub fn training_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    cond: Var,
    rng: &mut R,
    predict: impl FnOnce(&mut Graph, Var, &[usize], Var) -> Result<Var>,
) -> Result<LossTerms> {
    let b = x0.batch();
    let per = x0.numel() / b.max(1);
    let mut timesteps = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(x0.numel());
    let mut mixed = Vec::with_capacity(x0.numel());
    for i in 0..b {
        let t = rng.gen_range(1..=schedule.steps());
        timesteps.push(t);
        let ab = schedule.alpha_bar(t);
        let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
        for &x in &x0.data()[i * per..(i + 1) * per] {
            let e: f64 = rng.sample(StandardNormal);
            noise.push(e);
            mixed.push(a * x + s * e);
        }
    }
    let noise = Tensor::new(x0.shape().to_vec(), noise)?;
    let x_t = g.constant(Tensor::new(x0.shape().to_vec(), mixed)?);
    let eps = g.constant(noise.clone());
    let pred = predict(g, x_t, &timesteps, cond)?;
    let loss = g.mse(pred, eps)?;
    Ok(LossTerms {
        loss,
        timesteps,
        noise,
    })
}

/// DDPM ancestral sampling over `steps` evenly strided timesteps, starting
/// from pure noise of `shape` (`[B, L, h, w]`).
///
/// Uses the posterior variance `(1 - ab_prev) / (1 - ab_t) * beta_t`, with
/// `beta_t = 1 - ab_t / ab_prev` for the strided pair.
pub fn sample<P: NoisePredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    schedule: &NoiseSchedule,
    cond: &Tensor,
    shape: &[usize],
    steps: usize,
    rng: &mut R,
) -> Result<Tensor> {
    if shape.first() != cond.shape().first() {
        return Err(Error::shape("sample", shape, cond.shape()));
    }
    let ts = schedule.strided_timesteps(steps)?;
    let n: usize = shape.iter().product();
    let mut x = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect())?;
    let b = shape[0];
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (ab, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
        let beta = 1.0 - ab / ab_prev;
        let eps = model.predict_noise(&x, &vec![t; b], cond)?;
        if eps.shape() != x.shape() {
            return Err(Error::shape("predict_noise", eps.shape(), x.shape()));
        }
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = ((1.0 - ab_prev) / (1.0 - ab) * beta).max(0.0).sqrt();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xt, &e)| {
                let x0 = ((xt - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-X0_CLIP, X0_CLIP);
                let mean = c0 * x0 + ct * xt;
                if t_prev == 0 {
                    mean
                } else {
                    mean + sigma * rng.sample::<f64, _>(StandardNormal)
                }
            })
            .collect();
        x = Tensor::new(shape.to_vec(), data)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn cosine_schedule_is_valid() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(1000) > 0.0 && s.alpha_bar(1000) < 1e-4);
        assert!(NoiseSchedule::from_alpha_bar(s.alpha_bars().to_vec()).is_ok());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let x = Tensor::from_vec(vec![2.0]);
        let e = Tensor::from_vec(vec![1.0]);
        assert_eq!(forward_noise_ab(1.0, &x, &e).unwrap().data(), &[2.0]);
        assert_eq!(forward_noise_ab(0.0, &x, &e).unwrap().data(), &[1.0]);
        let v = forward_noise_ab(0.25, &x, &e).unwrap().data()[0];
        assert!((v - (1.0 + 0.75f64.sqrt())).abs() < 1e-15);
        let s = NoiseSchedule::cosine(10).unwrap();
        assert!(forward_noise(&s, &x, 0, &e).is_err());
        assert!(forward_noise(&s, &x, 11, &e).is_err());
    }

    #[test]
    fn strided_timesteps_cover_range() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let ts = s.strided_timesteps(20).unwrap();
        assert_eq!(ts.len(), 20);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 50);
        assert!(s.strided_timesteps(1001).is_err());
    }

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict_noise(&self, x_t: &Tensor, _: &[usize], _: &Tensor) -> Result<Tensor> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let cond = Tensor::zeros(&[2, 4]);
        let a = sample(&Zero, &s, &cond, &[2, 3, 2, 2], 10, &mut seeded(1)).unwrap();
        let b = sample(&Zero, &s, &cond, &[2, 3, 2, 2], 10, &mut seeded(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 3, 2, 2]);
    }

    #[test]
    fn collapsed_snr_range_is_constant() {
        let mut rng = seeded(2);
        assert!((0..10).all(|_| sample_snr(Some((20.0, 20.0)), &mut rng) == 20.0));
        assert_eq!(sample_snr(None, &mut rng), f64::INFINITY);
    }
}
