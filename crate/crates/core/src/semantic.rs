//! Compact semantic encoder producing the embedding `Z` that crosses the channel.
//!
//! A stack of stride-2 convolutions reduces the image to `spatial x spatial`,
//! a 1x1 projection sets the channel count, and each embedding is standardized
//! so its mean square (the transmit power) is 1. Pretraining pairs a linear
//! thumbnail decoder with a consistency term between two augmented views.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::compression_ratio;
use crate::tensor::nn::{groups_for, Bound, Conv2d, GroupNorm, Linear, ParamSet};
use crate::tensor::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::{Graph, Tensor, Var};

/// Variance floor used while training; extraction standardizes exactly.
const TRAIN_STD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub channels: usize,
    pub spatial: usize,
    pub standardize: bool,
    pub width: usize,
    /// Side of the pooled thumbnail the pretraining head reconstructs.
    pub thumbnail: usize,
    pub consistency_weight: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            channels: 16,
            spatial: 2,
            standardize: true,
            width: 16,
            thumbnail: 8,
            consistency_weight: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let (s, z) = (self.image_size, self.spatial);
        if z == 0 || s % z != 0 || !(s / z).is_power_of_two() || s / z < 2 {
            return Err(Error::Config(format!(
                "encoder.spatial {z} must divide image_size {s} by a power of two >= 2"
            )));
        }
        if self.thumbnail == 0 || s % self.thumbnail != 0 {
            return Err(Error::Config(format!(
                "encoder.thumbnail {} must divide image_size {s}",
                self.thumbnail
            )));
        }
        if self.channels == 0 || self.width == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        let cr = compression_ratio(&[3, s, s], &self.embedding_shape())?;
        if cr <= 1.0 {
            return Err(Error::Config(format!("embedding is not smaller than the image (ratio {cr})")));
        }
        Ok(())
    }

    pub fn embedding_shape(&self) -> [usize; 3] {
        [self.channels, self.spatial, self.spatial]
    }

    pub fn embedding_len(&self) -> usize {
        self.channels * self.spatial * self.spatial
    }

    pub fn compression_ratio(&self) -> Result<f64> {
        compression_ratio(&[3, self.image_size, self.image_size], &self.embedding_shape())
    }

    fn stages(&self) -> usize {
        (self.image_size / self.spatial).trailing_zeros() as usize
    }
}

/// One transmitted embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// `[channels, spatial, spatial]`.
    pub values: Tensor,
    /// Mean square of `values`.
    pub source_power: f64,
}

impl Embedding {
    pub fn new(values: Tensor) -> Self {
        let source_power = values.mean_square();
        Embedding { values, source_power }
    }
}

/// Loss components of one pretraining step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderLosses {
    pub total: f64,
    pub thumbnail: f64,
    pub consistency: f64,
}

#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub cfg: EncoderConfig,
    pub params: ParamSet,
    convs: Vec<Conv2d>,
    norms: Vec<GroupNorm>,
    proj: Conv2d,
    thumb: Linear,
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut in_c = 3;
        for i in 0..cfg.stages() {
            let out_c = if i == 0 { cfg.width } else { 2 * cfg.width };
            convs.push(Conv2d::new(&mut ps, &format!("enc.{i}"), in_c, out_c, 3, 2, 1.0, rng));
            norms.push(GroupNorm::new(&mut ps, &format!("enc.n{i}"), out_c, groups_for(out_c)));
            in_c = out_c;
        }
        let proj = Conv2d::new(&mut ps, "proj", in_c, cfg.channels, 1, 1, 1.0, rng);
        let t = cfg.thumbnail;
        let thumb = Linear::new(&mut ps, "thumb", cfg.embedding_len(), 3 * t * t, 0.5, rng);
        Ok(SemanticEncoder {
            cfg,
            params: ps,
            convs,
            norms,
            proj,
            thumb,
        })
    }

    /// Embedding batch `[B, C, s, s]` on the graph (standardized if configured).
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let z = self.forward_raw(g, p, x)?;
        if self.cfg.standardize {
            g.group_norm(z, None, None, 1, TRAIN_STD_EPS)
        } else {
            Ok(z)
        }
    }

    /// Projection output before standardization.
    pub fn forward_raw(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let n = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != n || s[3] != n {
            return Err(Error::shape("extract", &s, &[0, 3, n, n]));
        }
        let mut h = x;
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = conv.forward(g, p, h)?;
            h = norm.forward(g, p, h)?;
            h = g.silu(h);
        }
        self.proj.forward(g, p, h)
    }

    /// Deterministic embedding of each image of a `[B, 3, S, S]` batch.
    pub fn extract(&self, images: &Tensor) -> Result<Vec<Embedding>> {
        let z = self.extract_batch(images)?;
        Ok((0..z.batch())
            .map(|i| {
                let item = z.batch_item(i);
                Embedding::new(item.reshape(&self.cfg.embedding_shape()).expect("embedding shape"))
            })
            .collect())
    }

    /// Embeddings as one `[B, C, s, s]` tensor.
    pub fn extract_batch(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let z = self.forward_raw(&mut g, &p, x)?;
        let mut z = g.value(z).clone();
        if self.cfg.standardize {
            let per = self.cfg.embedding_len();
            for chunk in z.data_mut().chunks_mut(per) {
                standardize(chunk);
            }
        }
        Ok(z)
    }

    fn thumbnail_target(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let k = self.cfg.image_size / self.cfg.thumbnail;
        let pooled = g.avg_pool2d(x, k)?;
        let b = g.shape(pooled)[0];
        g.reshape(pooled, &[b, 3 * self.cfg.thumbnail * self.cfg.thumbnail])
    }

    /// Linear thumbnail prediction from embeddings `[B, C, s, s]`.
    pub fn predict_thumbnail(&self, embeddings: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let b = embeddings.batch();
        let z = g.constant(embeddings.clone().reshape(&[b, self.cfg.embedding_len()])?);
        let out = self.thumb.forward(&mut g, &p, z)?;
        Ok(g.value(out).clone())
    }

    /// Average-pooled thumbnails of a `[B, 3, S, S]` batch, flattened per image.
    pub fn thumbnails(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let t = self.thumbnail_target(&mut g, x)?;
        Ok(g.value(t).clone())
    }

    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor,
        state: &mut AdamWState,
        opt: &AdamWConfig,
        rng: &mut R,
    ) -> Result<EncoderLosses> {
        let view_a = augment(batch, rng);
        let view_b = augment(batch, rng);
        let b = batch.batch();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(batch.clone());
        let target = self.thumbnail_target(&mut g, x)?;
        let mut thumb_loss = None;
        let mut zs = Vec::new();
        for view in [view_a, view_b] {
            let xv = g.constant(view);
            let z = self.forward(&mut g, &p, xv)?;
            let flat = g.reshape(z, &[b, self.cfg.embedding_len()])?;
            let pred = self.thumb.forward(&mut g, &p, flat)?;
            let l = g.mse(pred, target)?;
            thumb_loss = Some(match thumb_loss {
                None => l,
                Some(prev) => g.add(prev, l)?,
            });
            zs.push(z);
        }
        let thumb_loss = g.scale(thumb_loss.expect("two views"), 0.5);
        let consistency = g.mse(zs[0], zs[1])?;
        let weighted = g.scale(consistency, self.cfg.consistency_weight);
        let total = g.add(thumb_loss, weighted)?;
        let losses = EncoderLosses {
            total: g.value(total).item(),
            thumbnail: g.value(thumb_loss).item(),
            consistency: g.value(consistency).item(),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                what: "encoder loss".into(),
                detail: format!("{losses:?}"),
            });
        }
        g.backward(total)?;
        self.params.collect_grads(&g, &p);
        adamw_step(&mut self.params, state, opt)?;
        Ok(losses)
    }
}

/// In-place `(z - mean) / std`; constant inputs map to zeros.
pub fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
}

/// Photometric jitter: per-image contrast and brightness, plus pixel noise.
pub fn augment<R: Rng + ?Sized>(batch: &Tensor, rng: &mut R) -> Tensor {
    let b = batch.batch();
    let per = batch.numel() / b.max(1);
    let mut out = batch.clone();
    for chunk in out.data_mut().chunks_mut(per) {
        let contrast = rng.gen_range(0.8..1.2);
        let brightness = rng.gen_range(-0.1..0.1);
        for v in chunk.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v * contrast + brightness + 0.03 * n).clamp(-1.0, 1.0);
        }
    }
    out
}

/// Pretrains `encoder` on random batches of `images` (each `[3, S, S]`).
pub fn pretrain<R: Rng + ?Sized>(
    encoder: &mut SemanticEncoder,
    images: &[Tensor],
    steps: usize,
    batch_size: usize,
    opt: &AdamWConfig,
    rng: &mut R,
    mut log: impl FnMut(usize, &EncoderLosses),
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Dataset("encoder training set is empty".into()));
    }
    let mut state = AdamWState::new(&encoder.params);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = order.len();
    for step in 0..steps {
        let mut picked = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            picked.push(images[order[cursor]].clone());
            cursor += 1;
        }
        let losses = encoder.train_step(&Tensor::batch_of(&picked)?, &mut state, &opt.at_step(step, steps), rng)?;
        log(step, &losses);
    }
    Ok(())
}
