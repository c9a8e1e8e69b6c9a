//! Vector-quantized convolutional autoencoder that shrinks each image side by 4.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::nn::{groups_for, Bound, Conv2d, GroupNorm, ParamId, ParamSet};
use crate::tensor::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub latent_channels: usize,
    pub downsample_factor: usize,
    pub codebook_size: usize,
    pub commitment_beta: f64,
    /// Channel width of the outermost conv layers; inner layers use twice this.
    pub width: usize,
    /// Codebook rows unused for this many consecutive steps are re-seeded.
    pub dead_code_steps: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            image_channels: 3,
            image_size: 32,
            latent_channels: 8,
            downsample_factor: 4,
            codebook_size: 256,
            commitment_beta: 0.25,
            width: 16,
            dead_code_steps: 200,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor != 4 {
            return Err(Error::Config(format!(
                "vq.downsample_factor is fixed at 4, got {}",
                self.downsample_factor
            )));
        }
        if self.image_size == 0 || self.image_size % self.downsample_factor != 0 {
            return Err(Error::Config(format!(
                "vq.image_size {} is not divisible by {}",
                self.image_size, self.downsample_factor
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("vq.codebook_size must be at least 2".into()));
        }
        if self.latent_channels == 0 || self.width == 0 || self.image_channels == 0 {
            return Err(Error::Config("vq channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample_factor
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        let s = self.latent_size();
        [self.latent_channels, s, s]
    }
}

/// Loss components of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqLosses {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
}

/// Graph handles produced by [`VqModel::quantize`].
pub struct Quantized {
    /// Quantized latent `[B, L, s, s]` whose gradient flows straight through to `z_e`.
    pub latent: Var,
    pub indices: Vec<usize>,
    pub codebook_loss: Var,
    pub commitment_loss: Var,
}

#[derive(Clone, Debug)]
pub struct VqModel {
    pub cfg: VqConfig,
    pub params: ParamSet,
    enc: [Conv2d; 4],
    enc_norm: [GroupNorm; 3],
    dec: [Conv2d; 4],
    dec_norm: [GroupNorm; 3],
    pub codebook: ParamId,
    last_used: Vec<u64>,
    steps: u64,
    codebook_ready: bool,
}

fn norm_act(g: &mut Graph, p: &Bound, n: &GroupNorm, x: Var) -> Result<Var> {
    let y = n.forward(g, p, x)?;
    Ok(g.silu(y))
}

impl VqModel {
    pub fn new<R: Rng + ?Sized>(cfg: VqConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let (c, w, l) = (cfg.image_channels, cfg.width, cfg.latent_channels);
        let enc = [
            Conv2d::new(&mut ps, "enc.0", c, w, 3, 1, 1.0, rng),
            Conv2d::new(&mut ps, "enc.1", w, 2 * w, 3, 2, 1.0, rng),
            Conv2d::new(&mut ps, "enc.2", 2 * w, 2 * w, 3, 2, 1.0, rng),
            Conv2d::new(&mut ps, "enc.3", 2 * w, l, 1, 1, 1.0, rng),
        ];
        let enc_norm = [
            GroupNorm::new(&mut ps, "enc.n0", w, groups_for(w)),
            GroupNorm::new(&mut ps, "enc.n1", 2 * w, groups_for(2 * w)),
            GroupNorm::new(&mut ps, "enc.n2", 2 * w, groups_for(2 * w)),
        ];
        let dec = [
            Conv2d::new(&mut ps, "dec.0", l, 2 * w, 3, 1, 1.0, rng),
            Conv2d::new(&mut ps, "dec.1", 2 * w, 2 * w, 3, 1, 1.0, rng),
            Conv2d::new(&mut ps, "dec.2", 2 * w, w, 3, 1, 1.0, rng),
            Conv2d::new(&mut ps, "dec.3", w, c, 3, 1, 1.0, rng),
        ];
        let dec_norm = [
            GroupNorm::new(&mut ps, "dec.n0", 2 * w, groups_for(2 * w)),
            GroupNorm::new(&mut ps, "dec.n1", 2 * w, groups_for(2 * w)),
            GroupNorm::new(&mut ps, "dec.n2", w, groups_for(w)),
        ];
        let codebook = ps.add("codebook", Tensor::randn(&[cfg.codebook_size, l], 1.0, rng));
        Ok(VqModel {
            last_used: vec![0; cfg.codebook_size],
            cfg,
            params: ps,
            enc,
            enc_norm,
            dec,
            dec_norm,
            codebook,
            steps: 0,
            codebook_ready: false,
        })
    }

    /// Marks the codebook as already fitted (after loading weights).
    pub fn mark_trained(&mut self) {
        self.codebook_ready = true;
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != self.cfg.image_channels || shape[2] != s || shape[3] != s {
            return Err(Error::shape("vq_encode", shape, &[0, self.cfg.image_channels, s, s]));
        }
        Ok(())
    }

    fn check_latent(&self, shape: &[usize]) -> Result<()> {
        let [l, s, _] = self.cfg.latent_shape();
        if shape.len() != 4 || shape[1] != l || shape[2] != s || shape[3] != s {
            return Err(Error::shape("vq_decode", shape, &[0, l, s, s]));
        }
        Ok(())
    }

    /// Pre-quantization encoder output `z_e`, `[B, L, S/4, S/4]`.
    pub fn encoder_forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_images(g.shape(x))?;
        let mut h = x;
        for i in 0..3 {
            h = self.enc[i].forward(g, p, h)?;
            h = norm_act(g, p, &self.enc_norm[i], h)?;
        }
        self.enc[3].forward(g, p, h)
    }

    pub fn decoder_forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        self.check_latent(g.shape(z))?;
        let mut h = self.dec[0].forward(g, p, z)?;
        h = norm_act(g, p, &self.dec_norm[0], h)?;
        h = g.upsample_nearest2d(h, 2)?;
        h = self.dec[1].forward(g, p, h)?;
        h = norm_act(g, p, &self.dec_norm[1], h)?;
        h = g.upsample_nearest2d(h, 2)?;
        h = self.dec[2].forward(g, p, h)?;
        h = norm_act(g, p, &self.dec_norm[2], h)?;
        let out = self.dec[3].forward(g, p, h)?;
        Ok(g.tanh(out))
    }

    /// Index of the nearest codebook row (squared L2) for each `L`-vector.
    pub fn nearest_indices(&self, rows: &[f64]) -> Vec<usize> {
        nearest_rows(self.params.get(self.codebook), rows)
    }

    /// Nearest-row replacement with straight-through gradient and VQ losses.
    pub fn quantize(&self, g: &mut Graph, p: &Bound, z_e: Var) -> Result<Quantized> {
        let s = g.shape(z_e).to_vec();
        let l = self.cfg.latent_channels;
        let rows_n = s[0] * s[2] * s[3];
        let nhwc = g.permute(z_e, &[0, 2, 3, 1])?;
        let rows = g.reshape(nhwc, &[rows_n, l])?;
        let indices = nearest_rows(g.value(p[self.codebook]), g.value(rows).data());
        let picked = g.gather_rows(p[self.codebook], &indices)?;
        let rows_sg = g.detach(rows);
        let codebook_loss = g.mse(picked, rows_sg)?;
        let picked_sg = g.detach(picked);
        let commitment_loss = g.mse(rows, picked_sg)?;
        let value = g.value(picked).clone();
        let st = g.straight_through(rows, value)?;
        let st = g.reshape(st, &[s[0], s[2], s[3], l])?;
        let latent = g.permute(st, &[0, 3, 1, 2])?;
        Ok(Quantized {
            latent,
            indices,
            codebook_loss,
            commitment_loss,
        })
    }

    /// Quantized latent `X_VG` and code indices for a batch `[B, 3, S, S]` in `[-1, 1]`.
    pub fn encode(&self, images: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let z = self.encoder_forward(&mut g, &p, x)?;
        let q = self.quantize(&mut g, &p, z)?;
        Ok((g.value(q.latent).clone(), q.indices))
    }

    /// Continuous (pre-quantization) encoder output.
    pub fn encode_continuous(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(images.clone());
        let z = self.encoder_forward(&mut g, &p, x)?;
        Ok(g.value(z).clone())
    }

    /// Snaps every latent vector of `[B, L, s, s]` to its nearest codebook row.
    pub fn snap(&self, latent: &Tensor) -> Result<Tensor> {
        self.check_latent(latent.shape())?;
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = g.constant(latent.clone());
        let q = self.quantize(&mut g, &p, z)?;
        Ok(g.value(q.latent).clone())
    }

    /// Image `[B, 3, S, S]` in `[-1, 1]` from a latent `[B, L, S/4, S/4]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let z = g.constant(latent.clone());
        let out = self.decoder_forward(&mut g, &p, z)?;
        Ok(g.value(out).clone())
    }

    /// Sets codebook rows to randomly chosen encoder outputs (plus jitter).
    fn seed_rows<R: Rng + ?Sized>(&mut self, rows: &[usize], z_rows: &[f64], rng: &mut R) {
        let l = self.cfg.latent_channels;
        let n = z_rows.len() / l;
        let cb = self.params.get_mut(self.codebook).data_mut();
        for &r in rows {
            let src = rng.gen_range(0..n);
            for j in 0..l {
                cb[r * l + j] = z_rows[src * l + j] + 0.01 * (rng.gen::<f64>() - 0.5);
            }
        }
    }

    /// One AdamW step on `reconstruction + codebook + beta * commitment`.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &Tensor,
        state: &mut AdamWState,
        opt: &AdamWConfig,
        rng: &mut R,
    ) -> Result<VqLosses> {
        let l = self.cfg.latent_channels;
        if !self.codebook_ready {
            let z = self.encode_continuous(batch)?;
            let rows = nhwc_rows(&z);
            let all: Vec<usize> = (0..self.cfg.codebook_size).collect();
            self.seed_rows(&all, &rows, rng);
            self.codebook_ready = true;
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(batch.clone());
        let z_e = self.encoder_forward(&mut g, &p, x)?;
        let q = self.quantize(&mut g, &p, z_e)?;
        let recon = self.decoder_forward(&mut g, &p, q.latent)?;
        let rec_loss = g.mse(recon, x)?;
        let commit = g.scale(q.commitment_loss, self.cfg.commitment_beta);
        let vq = g.add(q.codebook_loss, commit)?;
        let total = g.add(rec_loss, vq)?;
        let losses = VqLosses {
            total: g.value(total).item(),
            reconstruction: g.value(rec_loss).item(),
            codebook: g.value(q.codebook_loss).item(),
            commitment: g.value(q.commitment_loss).item(),
        };
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                what: "vq loss".into(),
                detail: format!("step {}: {losses:?}", self.steps),
            });
        }
        g.backward(total)?;
        self.params.collect_grads(&g, &p);
        adamw_step(&mut self.params, state, opt)?;
        self.steps += 1;
        for &i in &q.indices {
            self.last_used[i] = self.steps;
        }
        let dead: Vec<usize> = (0..self.cfg.codebook_size)
            .filter(|&i| self.steps - self.last_used[i] >= self.cfg.dead_code_steps)
            .collect();
        if !dead.is_empty() {
            let rows = g.value(z_e).clone();
            let rows = nhwc_rows(&rows);
            debug_assert_eq!(rows.len() % l, 0);
            self.seed_rows(&dead, &rows, rng);
            for &i in &dead {
                self.last_used[i] = self.steps;
            }
        }
        Ok(losses)
    }
}

/// `[B, L, h, w]` values rearranged to `B*h*w` rows of length `L`.
pub fn nhwc_rows(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (b, l, hw) = (s[0], s[1], s[2] * s[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(d.len());
    for bi in 0..b {
        for pos in 0..hw {
            for c in 0..l {
                out.push(d[bi * l * hw + c * hw + pos]);
            }
        }
    }
    out
}

/// Nearest row of `table` (`[K, D]`) for each `D`-vector in `rows`; ties go to
/// the lower index.
pub fn nearest_rows(table: &Tensor, rows: &[f64]) -> Vec<usize> {
    let d = table.shape()[1];
    let t = table.data();
    rows.chunks(d)
        .map(|r| {
            let mut best = (f64::INFINITY, 0);
            for (k, row) in t.chunks(d).enumerate() {
                let dist: f64 = row.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, k);
                }
            }
            best.1
        })
        .collect()
}

/// Trains for `steps` AdamW steps on random batches drawn from `images`
/// (each `[3, S, S]`), calling `log` with every step's losses.
pub fn train<R: Rng + ?Sized>(
    model: &mut VqModel,
    images: &[Tensor],
    steps: usize,
    batch_size: usize,
    opt: &AdamWConfig,
    rng: &mut R,
    mut log: impl FnMut(usize, &VqLosses),
) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Dataset("vq training set is empty".into()));
    }
    let mut state = AdamWState::new(&model.params);
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
        let batch = Tensor::batch_of(&picked)?;
        let losses = model.train_step(&batch, &mut state, &opt.at_step(step, steps), rng)?;
        log(step, &losses);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small() -> VqModel {
        let cfg = VqConfig {
            image_size: 16,
            codebook_size: 8,
            width: 4,
            ..Default::default()
        };
        VqModel::new(cfg, &mut seeded(1)).unwrap()
    }

    #[test]
    fn nearest_row_prefers_closer() {
        let table = Tensor::new(vec![2, 2], vec![0.0, 0.0, 10.0, 10.0]).unwrap();
        assert_eq!(nearest_rows(&table, &[1.0, 2.0, 9.0, 6.0]), vec![0, 1]);
    }

    #[test]
    fn shapes_round_trip() {
        let m = small();
        let x = Tensor::randn(&[2, 3, 16, 16], 0.5, &mut seeded(2));
        let (z, idx) = m.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 8, 4, 4]);
        assert_eq!(idx.len(), 32);
        assert_eq!(m.decode(&z).unwrap().shape(), x.shape());
        assert!(m.encode(&Tensor::zeros(&[1, 3, 12, 12])).is_err());
        assert!(m.decode(&Tensor::zeros(&[1, 4, 4, 4])).is_err());
    }

    #[test]
    fn snapping_is_idempotent() {
        let m = small();
        let z = Tensor::randn(&[1, 8, 4, 4], 1.0, &mut seeded(3));
        let once = m.snap(&z).unwrap();
        assert_eq!(m.snap(&once).unwrap(), once);
    }

    #[test]
    fn config_validation() {
        let bad = VqConfig {
            image_size: 30,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = VqConfig {
            codebook_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
