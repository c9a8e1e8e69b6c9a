//! End-to-end semantic link: extract `Z`, send it over AWGN, regenerate the VQ
//! latent by conditional diffusion, and decode it to pixels.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::channel::{transmit_with_noise, ChannelConfig};
use crate::diffusion::train::TrainingPair;
use crate::diffusion::{sample, Denoiser, NoiseSchedule};
use crate::error::{Error, Result};
use crate::semantic::SemanticEncoder;
use crate::tensor::Tensor;
use crate::vq::VqModel;

/// Receiver-side model mapping received embeddings `[B, C, s, s]` to VQ
/// latents `[B, L, h, w]`.
pub trait LatentGenerator {
    fn generate(&self, received: &Tensor, rng: &mut dyn rand::RngCore) -> Result<Tensor>;
}

/// Trained denoiser plus everything needed to sample from it.
#[derive(Clone, Debug)]
pub struct DiffusionReceiver {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub sample_steps: usize,
    /// Multiplier applied to VQ latents before diffusion.
    pub latent_scale: f64,
}

impl LatentGenerator for DiffusionReceiver {
    fn generate(&self, received: &Tensor, rng: &mut dyn rand::RngCore) -> Result<Tensor> {
        let c = &self.denoiser.cfg;
        let shape = [received.batch(), c.latent_channels, c.latent_size, c.latent_size];
        let x = sample(&self.denoiser, &self.schedule, received, &shape, self.sample_steps, rng)?;
        Ok(x.map(|v| v / self.latent_scale))
    }
}

/// `1 / rms` of a latent population, so scaled latents have unit mean square.
pub fn latent_scale_for(latents: &[Tensor]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for t in latents {
        sum += t.data().iter().map(|v| v * v).sum::<f64>();
        n += t.numel();
    }
    if n == 0 || sum == 0.0 {
        return Err(Error::invalid("cannot scale an empty or all-zero latent set"));
    }
    Ok(1.0 / (sum / n as f64).sqrt())
}

/// Runs frozen encoders over `images` (each `[3, S, S]`) in chunks of `chunk`.
pub fn training_pairs(
    vq: &VqModel,
    encoder: &SemanticEncoder,
    images: &[Tensor],
    latent_scale: Option<f64>,
    chunk: usize,
) -> Result<(Vec<TrainingPair>, f64)> {
    let mut latents = Vec::with_capacity(images.len());
    let mut embeddings = Vec::with_capacity(images.len());
    for part in images.chunks(chunk.max(1)) {
        let batch = Tensor::batch_of(part)?;
        let (z, _) = vq.encode(&batch)?;
        let e = encoder.extract_batch(&batch)?;
        for i in 0..part.len() {
            let zi = z.batch_item(i);
            let shape = zi.shape()[1..].to_vec();
            latents.push(zi.reshape(&shape)?);
            let ei = e.batch_item(i);
            let shape = ei.shape()[1..].to_vec();
            embeddings.push(ei.reshape(&shape)?);
        }
    }
    let scale = match latent_scale {
        Some(s) => s,
        None => latent_scale_for(&latents)?,
    };
    let pairs = latents
        .into_iter()
        .zip(embeddings)
        .map(|(l, e)| TrainingPair {
            latent: l.map(|v| v * scale),
            embedding: e,
        })
        .collect();
    Ok((pairs, scale))
}

/// Transmitter and receiver models of the semantic link.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub vq: VqModel,
    pub encoder: SemanticEncoder,
    pub receiver: DiffusionReceiver,
}

impl Pipeline {
    /// Embeddings of `images` (`[B, 3, S, S]`) after the channel, using the
    /// caller's unit-variance noise (length `B * C * s * s`).
    pub fn transmit(&self, images: &Tensor, channel: &ChannelConfig, unit_noise: &[f64]) -> Result<Tensor> {
        transmit_embeddings(&self.encoder, images, channel, unit_noise)
    }

    /// Full link with channel and sampler noise drawn from `rng`.
    pub fn reconstruct<R: Rng>(&self, images: &Tensor, snr_db: f64, rng: &mut R) -> Result<Tensor> {
        reconstruct_with(&self.vq, &self.encoder, &self.receiver, images, snr_db, rng)
    }
}

/// Standardized embeddings plus scaled noise, one `[B, C, s, s]` tensor.
pub fn transmit_embeddings(
    encoder: &SemanticEncoder,
    images: &Tensor,
    channel: &ChannelConfig,
    unit_noise: &[f64],
) -> Result<Tensor> {
    let z = encoder.extract_batch(images)?;
    let per = encoder.cfg.embedding_len();
    if unit_noise.len() != z.numel() {
        return Err(Error::shape("transmit", &[unit_noise.len()], z.shape()));
    }
    let mut out = Vec::with_capacity(z.numel());
    for (zi, ni) in z.data().chunks(per).zip(unit_noise.chunks(per)) {
        out.extend(transmit_with_noise(zi, ni, channel)?);
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Unit-variance Gaussian noise for a channel use of `len` values.
pub fn unit_noise<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// `vq_decode(generate(transmit(extract(X), snr)))` with any latent generator.
pub fn reconstruct_with<G: LatentGenerator + ?Sized, R: Rng>(
    vq: &VqModel,
    encoder: &SemanticEncoder,
    generator: &G,
    images: &Tensor,
    snr_db: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let noise = unit_noise(images.batch() * encoder.cfg.embedding_len(), rng);
    let received = transmit_embeddings(encoder, images, &ChannelConfig::new(snr_db), &noise)?;
    let latent = generator.generate(&received, rng)?;
    vq.decode(&latent)
}
