//! Small two-level UNet that predicts the noise in a VQ latent.
//!
//! Conditioning enters twice: the received embedding is upsampled to the
//! latent grid and concatenated to the input, and it drives per-channel FiLM
//! (scale, shift) after every group norm together with the timestep.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::nn::{groups_for, Bound, Conv2d, GroupNorm, Linear, ParamSet};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub embed_channels: usize,
    pub embed_spatial: usize,
    pub width: usize,
    /// Width of the joint time/conditioning embedding.
    pub emb_dim: usize,
    /// Length of the sinusoidal timestep features.
    pub time_features: usize,
    /// Channels of a dense projection of the embedding onto the latent grid,
    /// concatenated to the input (0 disables it).
    pub cond_map_channels: usize,
    pub output: Parametrization,
}

/// What the final convolution predicts. The denoiser always returns noise;
/// with `Velocity` the network output `v` is converted through
/// `eps = sqrt(1 - ab) * x_t + sqrt(ab) * v`, which keeps the implied clean
/// latent bounded when `ab` is close to zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    Epsilon,
    #[default]
    Velocity,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_channels: 8,
            latent_size: 8,
            embed_channels: 16,
            embed_spatial: 2,
            width: 48,
            emb_dim: 64,
            time_features: 32,
            cond_map_channels: 8,
            output: Parametrization::Velocity,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size % 2 != 0 || self.latent_size == 0 {
            return Err(Error::Config(format!("denoiser.latent_size {} must be even", self.latent_size)));
        }
        if self.embed_spatial == 0 || self.latent_size % self.embed_spatial != 0 {
            return Err(Error::Config(format!(
                "embedding side {} must divide latent side {}",
                self.embed_spatial, self.latent_size
            )));
        }
        if self.time_features % 2 != 0 || self.width == 0 || self.emb_dim == 0 {
            return Err(Error::Config("denoiser widths must be positive and time_features even".into()));
        }
        Ok(())
    }

    fn cond_len(&self) -> usize {
        self.embed_channels * self.embed_spatial * self.embed_spatial
    }
}

/// Group norm followed by FiLM from the shared embedding.
#[derive(Clone, Debug)]
struct FilmNorm {
    norm: GroupNorm,
    scale: Linear,
    shift: Linear,
}

impl FilmNorm {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, ch: usize, emb: usize, rng: &mut R) -> Self {
        FilmNorm {
            norm: GroupNorm::new(ps, &format!("{name}.gn"), ch, groups_for(ch)),
            scale: Linear::new(ps, &format!("{name}.scale"), emb, ch, 0.1, rng),
            shift: Linear::new(ps, &format!("{name}.shift"), emb, ch, 0.1, rng),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, emb: Var) -> Result<Var> {
        let h = self.norm.forward(g, p, x)?;
        let s = self.scale.forward(g, p, emb)?;
        let s = g.add_scalar(s, 1.0);
        let b = self.shift.forward(g, p, emb)?;
        g.film(h, s, b)
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    n1: FilmNorm,
    c1: Conv2d,
    n2: FilmNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, in_c: usize, out_c: usize, emb: usize, rng: &mut R) -> Self {
        ResBlock {
            n1: FilmNorm::new(ps, &format!("{name}.n1"), in_c, emb, rng),
            c1: Conv2d::new(ps, &format!("{name}.c1"), in_c, out_c, 3, 1, 1.0, rng),
            n2: FilmNorm::new(ps, &format!("{name}.n2"), out_c, emb, rng),
            c2: Conv2d::new(ps, &format!("{name}.c2"), out_c, out_c, 3, 1, 0.5, rng),
            skip: (in_c != out_c).then(|| Conv2d::new(ps, &format!("{name}.skip"), in_c, out_c, 1, 1, 1.0, rng)),
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, emb: Var) -> Result<Var> {
        let mut h = self.n1.forward(g, p, x, emb)?;
        h = g.silu(h);
        h = self.c1.forward(g, p, h)?;
        h = self.n2.forward(g, p, h, emb)?;
        h = g.silu(h);
        h = self.c2.forward(g, p, h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        g.add(h, skip)
    }
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamSet,
    alpha_bar: Vec<f64>,
    time1: Linear,
    time2: Linear,
    cond_map: Option<Linear>,
    cond1: Linear,
    cond2: Linear,
    conv_in: Conv2d,
    rb_hi: ResBlock,
    down: Conv2d,
    rb_lo1: ResBlock,
    rb_lo2: ResBlock,
    up: Conv2d,
    rb_out: ResBlock,
    out_norm: FilmNorm,
    conv_out: Conv2d,
}

/// Sinusoidal features `[B, dim]` of integer timesteps.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            data.push((ti as f64 * freq).sin());
        }
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            data.push((ti as f64 * freq).cos());
        }
    }
    Tensor::new(vec![t.len(), dim], data).expect("feature shape")
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let (w, e) = (cfg.width, cfg.emb_dim);
        let in_c = cfg.latent_channels + cfg.cond_map_channels;
        let grid = cfg.cond_map_channels * cfg.latent_size * cfg.latent_size;
        Ok(Denoiser {
            time1: Linear::new(&mut ps, "time1", cfg.time_features, e, 1.0, &mut *rng),
            time2: Linear::new(&mut ps, "time2", e, e, 1.0, &mut *rng),
            cond_map: (grid > 0).then(|| Linear::new(&mut ps, "cond_map", cfg.cond_len(), grid, 1.0, &mut *rng)),
            cond1: Linear::new(&mut ps, "cond1", cfg.cond_len(), e, 1.0, &mut *rng),
            cond2: Linear::new(&mut ps, "cond2", e, e, 1.0, &mut *rng),
            conv_in: Conv2d::new(&mut ps, "conv_in", in_c, w, 3, 1, 1.0, &mut *rng),
            rb_hi: ResBlock::new(&mut ps, "rb_hi", w, w, e, &mut *rng),
            down: Conv2d::new(&mut ps, "down", w, w, 3, 2, 1.0, &mut *rng),
            rb_lo1: ResBlock::new(&mut ps, "rb_lo1", w, w, e, &mut *rng),
            rb_lo2: ResBlock::new(&mut ps, "rb_lo2", w, w, e, &mut *rng),
            up: Conv2d::new(&mut ps, "up", w, w, 3, 1, 1.0, &mut *rng),
            rb_out: ResBlock::new(&mut ps, "rb_out", 2 * w, w, e, &mut *rng),
            out_norm: FilmNorm::new(&mut ps, "out", w, e, &mut *rng),
            conv_out: Conv2d::new(&mut ps, "conv_out", w, cfg.latent_channels, 3, 1, 0.1, &mut *rng),
            alpha_bar: schedule.alpha_bars().to_vec(),
            cfg,
            params: ps,
        })
    }

    /// Predicted noise `[B, L, h, w]` on the graph.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x_t: Var, t: &[usize], cond: Var) -> Result<Var> {
        let c = &self.cfg;
        let xs = g.shape(x_t).to_vec();
        let b = xs[0];
        if xs.len() != 4 || xs[1] != c.latent_channels || xs[2] != c.latent_size || xs[3] != c.latent_size {
            return Err(Error::shape("denoiser", &xs, &[b, c.latent_channels, c.latent_size, c.latent_size]));
        }
        if t.len() != b {
            return Err(Error::shape("denoiser timesteps", &xs, &[t.len()]));
        }
        if let Some(&bad) = t.iter().find(|&&ti| ti >= self.alpha_bar.len()) {
            return Err(Error::invalid(format!("timestep {bad} outside 0..={}", self.alpha_bar.len() - 1)));
        }
        let cs = g.shape(cond).to_vec();
        let expect = [b, c.embed_channels, c.embed_spatial, c.embed_spatial];
        if cs.iter().product::<usize>() != expect.iter().product::<usize>() || cs[0] != b {
            return Err(Error::shape("denoiser conditioning", &cs, &expect));
        }
        let cond = g.reshape(cond, &expect)?;

        let tf = g.constant(timestep_features(t, c.time_features));
        let mut temb = self.time1.forward(g, p, tf)?;
        temb = g.silu(temb);
        temb = self.time2.forward(g, p, temb)?;
        let flat = g.reshape(cond, &[b, c.cond_len()])?;
        let mut cemb = self.cond1.forward(g, p, flat)?;
        cemb = g.silu(cemb);
        cemb = self.cond2.forward(g, p, cemb)?;
        let emb = g.add(temb, cemb)?;
        let emb = g.silu(emb);

        let input = match &self.cond_map {
            Some(m) => {
                let map = m.forward(g, p, flat)?;
                let map = g.reshape(map, &[b, c.cond_map_channels, c.latent_size, c.latent_size])?;
                g.concat(&[x_t, map], 1)?
            }
            None => x_t,
        };
        let h0 = self.conv_in.forward(g, p, input)?;
        let hi = self.rb_hi.forward(g, p, h0, emb)?;
        let mut lo = self.down.forward(g, p, hi)?;
        lo = self.rb_lo1.forward(g, p, lo, emb)?;
        lo = self.rb_lo2.forward(g, p, lo, emb)?;
        let mut up = g.upsample_nearest2d(lo, 2)?;
        up = self.up.forward(g, p, up)?;
        let cat = g.concat(&[up, hi], 1)?;
        let mut h = self.rb_out.forward(g, p, cat, emb)?;
        h = self.out_norm.forward(g, p, h, emb)?;
        h = g.silu(h);
        let out = self.conv_out.forward(g, p, h)?;
        match c.output {
            Parametrization::Epsilon => Ok(out),
            Parametrization::Velocity => {
                let per = xs[1] * xs[2] * xs[3];
                let (mut kx, mut kv) = (Vec::with_capacity(b * per), Vec::with_capacity(b * per));
                for &ti in t {
                    let ab = self.alpha_bar[ti];
                    kx.extend(std::iter::repeat((1.0 - ab).sqrt()).take(per));
                    kv.extend(std::iter::repeat(ab.sqrt()).take(per));
                }
                let kx = g.constant(Tensor::new(xs.clone(), kx)?);
                let kv = g.constant(Tensor::new(xs.clone(), kv)?);
                let a = g.mul(kx, x_t)?;
                let v = g.mul(kv, out)?;
                g.add(a, v)
            }
        }
    }
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize], cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(x_t.clone());
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, &p, x, t, c)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny() -> Denoiser {
        let cfg = DenoiserConfig {
            width: 8,
            emb_dim: 8,
            time_features: 8,
            ..Default::default()
        };
        Denoiser::new(cfg, &NoiseSchedule::cosine(1000).unwrap(), &mut seeded(1)).unwrap()
    }

    #[test]
    fn output_matches_latent_shape() {
        let d = tiny();
        let x = Tensor::randn(&[3, 8, 8, 8], 1.0, &mut seeded(2));
        let c = Tensor::randn(&[3, 16, 2, 2], 1.0, &mut seeded(3));
        for t in [1, 500, 1000] {
            assert_eq!(d.predict_noise(&x, &[t; 3], &c).unwrap().shape(), x.shape());
        }
        assert!(d.predict_noise(&x, &[1; 2], &c).is_err());
    }

    #[test]
    fn conditioning_changes_output() {
        let d = tiny();
        let x = Tensor::randn(&[1, 8, 8, 8], 1.0, &mut seeded(4));
        let c1 = Tensor::randn(&[1, 16, 2, 2], 1.0, &mut seeded(5));
        let c2 = Tensor::randn(&[1, 16, 2, 2], 1.0, &mut seeded(6));
        let a = d.predict_noise(&x, &[10], &c1).unwrap();
        let b = d.predict_noise(&x, &[10], &c2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn timestep_features_are_bounded() {
        let f = timestep_features(&[0, 1, 999], 16);
        assert_eq!(f.shape(), &[3, 16]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(f.data()[8], 1.0);
    }
}
