//! Evaluation protocols. Every random draw comes from a named stream keyed by
//! image or repeat index, never by SNR, so all SNR points share the same
//! underlying noise (common random numbers) and reruns are bit-exact.

use std::time::Instant;

use serde::Serialize;

use super::report::{SweepRow, TimingRow};
use crate::baseline::{block_error_rates, BaselineOutcome, BaselineSystem};
use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::metrics::{predictability, Distance, MetricReport, PairStats};
use crate::pipeline::{transmit_embeddings, unit_noise, LatentGenerator, Pipeline};
use crate::rng::stream;
use crate::semantic::standardize;
use crate::tensor::Tensor;

/// Peak-to-peak range of normalized images.
pub const PEAK: f64 = 2.0;

/// Identifies the run in result rows; deterministic so reruns match.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTag {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
}

impl RunTag {
    pub fn new(command: &str, config_hash: &str, seed: u64) -> Self {
        RunTag {
            run_id: format!("{command}-{config_hash}"),
            config_hash: config_hash.to_string(),
            seed,
        }
    }

    fn row(&self, variant: &str, snr_db: f64, image_index: usize, m: MetricReport) -> SweepRow {
        SweepRow {
            run_id: self.run_id.clone(),
            config_hash: self.config_hash.clone(),
            variant: variant.to_string(),
            snr_db,
            image_index,
            psnr_db: m.psnr_db,
            ssim: m.ssim,
            mse: m.mse,
            failed: m.failed,
        }
    }
}

fn score(reference: &Tensor, output: &Tensor, i: usize) -> Result<MetricReport> {
    let s = reference.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let a = &reference.data()[i * per..(i + 1) * per];
    let b = &output.data()[i * per..(i + 1) * per];
    MetricReport::evaluate(a, b, c, h, w, PEAK)
}

/// Scores the semantic link on `images` (each `[3, S, S]`) at every SNR in
/// `snrs`, `chunk` images per sampler batch.
pub fn semantic_sweep(
    pipe: &Pipeline,
    images: &[Tensor],
    snrs: &[f64],
    chunk: usize,
    tag: &RunTag,
    variant: &str,
) -> Result<(Vec<SweepRow>, Vec<TimingRow>)> {
    let mut rows = Vec::with_capacity(images.len() * snrs.len());
    let mut timing = Vec::with_capacity(snrs.len());
    let chunk = chunk.max(1);
    for &snr in snrs {
        let start = Instant::now();
        for (ci, part) in images.chunks(chunk).enumerate() {
            let first = ci * chunk;
            let batch = Tensor::batch_of(part)?;
            let noise = unit_noise(
                part.len() * pipe.encoder.cfg.embedding_len(),
                &mut stream(tag.seed, "eval/channel", first as u64),
            );
            let received = transmit_embeddings(&pipe.encoder, &batch, &ChannelConfig::new(snr), &noise)?;
            let latent = pipe
                .receiver
                .generate(&received, &mut stream(tag.seed, "eval/sampler", first as u64))?;
            let out = pipe.vq.decode(&latent)?;
            for i in 0..part.len() {
                rows.push(tag.row(variant, snr, first + i, score(&batch, &out, i)?));
            }
        }
        let secs = start.elapsed().as_secs_f64();
        log::info!("{variant} @ {snr} dB: {} images in {secs:.2}s", images.len());
        timing.push(TimingRow {
            run_id: tag.run_id.clone(),
            variant: variant.to_string(),
            snr_db: snr,
            images: images.len(),
            seconds: secs,
            seconds_per_image: secs / images.len().max(1) as f64,
        });
    }
    Ok((rows, timing))
}

/// Scores the classical chain; undecodable images get [`MetricReport::failure`].
pub fn baseline_sweep(sys: &BaselineSystem, images: &[Tensor], snrs: &[f64], tag: &RunTag) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(images.len() * snrs.len());
    for &snr in snrs {
        for (i, img) in images.iter().enumerate() {
            let mut rng = stream(tag.seed, "baseline/channel", i as u64);
            let m = match sys.transmit(img, snr, &mut rng)? {
                BaselineOutcome::Delivered { image, .. } => {
                    let s = img.shape();
                    MetricReport::evaluate(img.data(), image.data(), s[0], s[1], s[2], PEAK)?
                }
                BaselineOutcome::Failure { .. } => MetricReport::failure(PEAK),
            };
            rows.push(tag.row("baseline", snr, i, m));
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockRow {
    pub run_id: String,
    pub config_hash: String,
    pub snr_db: f64,
    pub blocks: usize,
    pub failure_rate: f64,
    pub bit_error_rate: f64,
}

/// Decoding failure rate of random blocks at each SNR.
pub fn block_sweep(sys: &BaselineSystem, snrs: &[f64], blocks: usize, tag: &RunTag) -> Result<Vec<BlockRow>> {
    snrs.iter()
        .map(|&snr| {
            let (fer, ber) = block_error_rates(sys, snr, blocks, &mut stream(tag.seed, "baseline/blocks", 0))?;
            Ok(BlockRow {
                run_id: tag.run_id.clone(),
                config_hash: tag.config_hash.clone(),
                snr_db: snr,
                blocks,
                failure_rate: fer,
                bit_error_rate: ber,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictabilityRow {
    pub run_id: String,
    pub config_hash: String,
    pub variant: String,
    pub snr_db: f64,
    pub image_index: usize,
    pub repeats: usize,
    pub pairs: usize,
    pub mean_distance: f64,
    pub std_distance: f64,
    pub relative_spread: f64,
    pub mean_psnr_db: f64,
}

/// Reconstructions of `repeats` independent transmissions of one embedding
/// batch row, as flat `[3*S*S]` vectors.
fn repeated_outputs(
    pipe: &Pipeline,
    embeddings: &Tensor,
    snr: f64,
    seed: u64,
    stream_prefix: &str,
) -> Result<Tensor> {
    let noise = unit_noise(embeddings.numel(), &mut stream(seed, &format!("{stream_prefix}/channel"), 0));
    let cfg = ChannelConfig::new(snr);
    let per = pipe.encoder.cfg.embedding_len();
    let mut rx = Vec::with_capacity(embeddings.numel());
    for (z, n) in embeddings.data().chunks(per).zip(noise.chunks(per)) {
        rx.extend(crate::channel::transmit_with_noise(z, n, &cfg)?);
    }
    let received = Tensor::new(embeddings.shape().to_vec(), rx)?;
    let latent = pipe
        .receiver
        .generate(&received, &mut stream(seed, &format!("{stream_prefix}/sampler"), 0))?;
    pipe.vq.decode(&latent)
}

fn pair_row(
    tag: &RunTag,
    variant: &str,
    snr: f64,
    image_index: usize,
    reference: &Tensor,
    outputs: &Tensor,
) -> Result<(PredictabilityRow, PairStats)> {
    let n = outputs.batch();
    let per = outputs.numel() / n.max(1);
    let flat: Vec<&[f64]> = outputs.data().chunks(per).collect();
    let stats = predictability(&flat, Distance::Mse)?;
    let mut psnr = 0.0;
    for f in &flat {
        psnr += crate::metrics::psnr(reference.data(), f, PEAK)?;
    }
    Ok((
        PredictabilityRow {
            run_id: tag.run_id.clone(),
            config_hash: tag.config_hash.clone(),
            variant: variant.to_string(),
            snr_db: snr,
            image_index,
            repeats: n,
            pairs: stats.pairs,
            mean_distance: stats.mean,
            std_distance: stats.std,
            relative_spread: stats.relative_spread(),
            mean_psnr_db: psnr / n as f64,
        },
        stats,
    ))
}

/// Transmits one image `repeats` times at each SNR and reports pairwise-MSE
/// statistics of the reconstructions, alongside an unconditioned control in
/// which every repeat conditions on a fresh random standardized embedding.
pub fn predictability_sweep(
    pipe: &Pipeline,
    image: &Tensor,
    image_index: usize,
    snrs: &[f64],
    repeats: usize,
    tag: &RunTag,
) -> Result<Vec<PredictabilityRow>> {
    if repeats < 2 {
        return Err(Error::invalid(format!("predictability needs at least 2 repeats, got {repeats}")));
    }
    let reference = if image.ndim() == 4 {
        image.clone()
    } else {
        image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?
    };
    let z = pipe.encoder.extract_batch(&reference)?;
    let per = z.numel();
    let mut shape = z.shape().to_vec();
    shape[0] = repeats;
    let mut conditioned = Vec::with_capacity(per * repeats);
    for _ in 0..repeats {
        conditioned.extend_from_slice(z.data());
    }
    let conditioned = Tensor::new(shape.clone(), conditioned)?;
    let mut control = Tensor::randn(&shape, 1.0, &mut stream(tag.seed, "predict/control", 0)).into_data();
    for c in control.chunks_mut(per) {
        standardize(c);
    }
    let control = Tensor::new(shape, control)?;
    let mut rows = Vec::with_capacity(2 * snrs.len());
    for &snr in snrs {
        let out = repeated_outputs(pipe, &conditioned, snr, tag.seed, "predict")?;
        rows.push(pair_row(tag, "conditioned", snr, image_index, &reference, &out)?.0);
        let out = repeated_outputs(pipe, &control, snr, tag.seed, "predict/unconditioned")?;
        rows.push(pair_row(tag, "unconditioned", snr, image_index, &reference, &out)?.0);
    }
    Ok(rows)
}
