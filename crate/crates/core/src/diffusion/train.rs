//! Denoiser training on channel-corrupted conditioning.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sample_snr, training_loss, Denoiser, NoiseSchedule};
use crate::channel::{transmit, ChannelConfig};
use crate::error::{Error, Result};
use crate::tensor::nn::ParamSet;
use crate::tensor::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// SNR range in dB drawn uniformly per example; `None` trains on clean embeddings.
    pub snr_range: Option<(f64, f64)>,
    pub opt: AdamWConfig,
    /// Decay of the exponential moving average of the weights that the
    /// returned denoiser carries; 0 keeps the raw final weights.
    pub ema_decay: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 5000,
            batch_size: 4,
            snr_range: Some((1.0, 20.0)),
            opt: AdamWConfig::default(),
            ema_decay: 0.999,
        }
    }
}

/// Clean latent (already scaled for diffusion) and the matching embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub latent: Tensor,
    pub embedding: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub snr_db: Vec<f64>,
    pub timesteps: Vec<usize>,
}

/// Training state handed to the per-step callback.
pub struct Progress<'a> {
    pub report: StepReport,
    live: &'a Denoiser,
    ema: Option<&'a ParamSet>,
}

impl Progress<'_> {
    /// Model with the raw optimizer weights.
    pub fn live(&self) -> &Denoiser {
        self.live
    }

    /// Model with the weights `finetune` would return if it stopped now.
    pub fn weights(&self) -> Denoiser {
        let mut d = self.live.clone();
        if let Some(e) = self.ema {
            d.params = e.clone();
        }
        d
    }
}

fn ema_update(ema: &mut ParamSet, live: &ParamSet, decay: f64) {
    for ((_, e), (_, l)) in ema.iter_mut().zip(live.iter()) {
        for (a, &b) in e.data_mut().iter_mut().zip(l.data()) {
            *a = decay * *a + (1.0 - decay) * b;
        }
    }
}

/// Runs `cfg.steps` AdamW steps of the noise-prediction objective. Each
/// example's embedding passes through an AWGN channel at its own SNR. With a
/// nonzero `ema_decay` the denoiser ends up holding the averaged weights.
pub fn finetune<R: Rng + ?Sized>(
    denoiser: &mut Denoiser,
    schedule: &NoiseSchedule,
    data: &[TrainingPair],
    cfg: &FinetuneConfig,
    rng: &mut R,
    mut on_step: impl FnMut(&Progress) -> Result<()>,
) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Dataset("diffusion training set is empty".into()));
    }
    if let Some((lo, hi)) = cfg.snr_range {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid SNR range [{lo}, {hi}]")));
        }
    }
    if !(0.0..1.0).contains(&cfg.ema_decay) {
        return Err(Error::Config(format!("ema_decay {} outside [0, 1)", cfg.ema_decay)));
    }
    let mut state = AdamWState::new(&denoiser.params);
    let mut ema = (cfg.ema_decay > 0.0).then(|| denoiser.params.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut latents = Vec::with_capacity(cfg.batch_size);
        let mut conds = Vec::with_capacity(cfg.batch_size);
        let mut snrs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let pair = &data[order[cursor]];
            cursor += 1;
            let snr = sample_snr(cfg.snr_range, rng);
            let noisy = transmit(pair.embedding.data(), &ChannelConfig::new(snr), rng)?;
            conds.push(Tensor::new(pair.embedding.shape().to_vec(), noisy)?);
            latents.push(pair.latent.clone());
            snrs.push(snr);
        }
        let x0 = Tensor::batch_of(&latents)?;
        let cond = Tensor::batch_of(&conds)?;
        let mut g = Graph::new();
        let p = denoiser.params.bind(&mut g);
        let c = g.constant(cond);
        let model = &*denoiser;
        let terms = training_loss(&mut g, schedule, &x0, c, rng, |g, x_t, t, c| model.forward(g, &p, x_t, t, c))?;
        let loss = g.value(terms.loss).item();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "diffusion loss".into(),
                detail: format!("step {step}, t {:?}, snr_db {snrs:?}", terms.timesteps),
            });
        }
        g.backward(terms.loss)?;
        denoiser.params.collect_grads(&g, &p);
        adamw_step(&mut denoiser.params, &mut state, &cfg.opt.at_step(step, cfg.steps))?;
        if let Some(e) = ema.as_mut() {
            // Shorter memory early on so the average is not anchored to the init.
            let n = (step + 1) as f64;
            ema_update(e, &denoiser.params, cfg.ema_decay.min((1.0 + n) / (10.0 + n)));
        }
        on_step(&Progress {
            report: StepReport {
                step,
                loss,
                snr_db: snrs,
                timesteps: terms.timesteps,
            },
            live: denoiser,
            ema: ema.as_ref(),
        })?;
    }
    if let Some(e) = ema {
        denoiser.params = e;
    }
    Ok(())
}
