//! Experiment configuration (TOML) and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::BaselineConfig;
use crate::dataset::Family;
use crate::diffusion::train::FinetuneConfig;
use crate::diffusion::{DenoiserConfig, Parametrization};
use crate::error::{Error, Result};
use crate::semantic::EncoderConfig;
use crate::tensor::optim::{AdamWConfig, LrDecay};
use crate::vq::VqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Synthetic family used for training and the standard evaluation.
    pub family: Family,
    /// Directory of PPM/PNG images; replaces the synthetic training family when set.
    pub dir: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    /// Family evaluated by `generalize` when none is given on the command line.
    pub unseen_family: Family,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            family: Family::Shapes,
            dir: None,
            train_count: 512,
            test_count: 64,
            unseen_family: Family::Textures,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqSection {
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub commitment_beta: f64,
    pub width: usize,
    pub dead_code_steps: u64,
    pub steps: usize,
    /// Overrides the top-level batch size for this stage.
    pub batch_size: Option<usize>,
    /// Overrides the top-level learning rate for this stage.
    pub lr: Option<f64>,
}

impl Default for VqSection {
    fn default() -> Self {
        let m = VqConfig::default();
        VqSection {
            latent_channels: m.latent_channels,
            codebook_size: m.codebook_size,
            commitment_beta: m.commitment_beta,
            width: m.width,
            dead_code_steps: m.dead_code_steps,
            steps: 3000,
            batch_size: None,
            lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub channels: usize,
    pub spatial: usize,
    pub standardize: bool,
    pub width: usize,
    pub thumbnail: usize,
    pub consistency_weight: f64,
    pub steps: usize,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let m = EncoderConfig::default();
        EncoderSection {
            channels: m.channels,
            spatial: m.spatial,
            standardize: m.standardize,
            width: m.width,
            thumbnail: m.thumbnail,
            consistency_weight: m.consistency_weight,
            steps: 2000,
            batch_size: None,
            lr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub width: usize,
    pub emb_dim: usize,
    pub time_features: usize,
    pub cond_map_channels: usize,
    pub output: Parametrization,
    /// Length `T` of the cosine schedule.
    pub timesteps: usize,
    pub sample_steps: usize,
    pub steps: usize,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// Train on clean embeddings instead of channel-corrupted ones.
    pub clean: bool,
    pub ema_decay: f64,
    /// Steps between intermediate checkpoint writes (0 disables them).
    pub checkpoint_every: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let m = DenoiserConfig::default();
        DiffusionSection {
            width: m.width,
            emb_dim: m.emb_dim,
            time_features: m.time_features,
            cond_map_channels: m.cond_map_channels,
            output: m.output,
            timesteps: 1000,
            sample_steps: 20,
            steps: 5000,
            batch_size: None,
            lr: None,
            snr_min_db: 1.0,
            snr_max_db: 20.0,
            clean: false,
            ema_decay: 0.999,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub snr_grid: Vec<f64>,
    pub samples: usize,
    pub repeats: usize,
    pub predictability_snrs: Vec<f64>,
    /// Test image used by the predictability protocol.
    pub predictability_image: usize,
    /// Images per sampler batch during evaluation.
    pub chunk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_grid: vec![1.0, 5.0, 10.0, 15.0, 20.0],
            samples: 100,
            repeats: 25,
            predictability_snrs: vec![1.0, 5.0, 10.0, 15.0, 20.0],
            predictability_image: 0,
            chunk: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub image_size: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub dataset: DatasetConfig,
    pub vq: VqSection,
    pub encoder: EncoderSection,
    pub diffusion: DiffusionSection,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            image_size: 32,
            batch_size: 4,
            lr: 1e-4,
            lr_decay: LrDecay::Constant,
            dataset: DatasetConfig::default(),
            vq: VqSection::default(),
            encoder: EncoderSection::default(),
            diffusion: DiffusionSection::default(),
            eval: EvalConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, msg: String| Err(Error::Config(format!("{path}: {msg}")));
        for (path, b) in [
            ("batch_size", Some(self.batch_size)),
            ("vq.batch_size", self.vq.batch_size),
            ("encoder.batch_size", self.encoder.batch_size),
            ("diffusion.batch_size", self.diffusion.batch_size),
        ] {
            if b == Some(0) {
                return field(path, "must be positive".into());
            }
        }
        if !(self.lr > 0.0) {
            return field("lr", format!("must be positive, got {}", self.lr));
        }
        if self.dataset.train_count == 0 || self.dataset.test_count == 0 {
            return field("dataset", "train_count and test_count must be positive".into());
        }
        let d = &self.diffusion;
        if !(d.snr_min_db <= d.snr_max_db) {
            return field(
                "diffusion.snr_min_db",
                format!("{} exceeds snr_max_db {}", d.snr_min_db, d.snr_max_db),
            );
        }
        if d.sample_steps == 0 || d.sample_steps > d.timesteps {
            return field(
                "diffusion.sample_steps",
                format!("{} outside 1..={}", d.sample_steps, d.timesteps),
            );
        }
        if self.eval.repeats < 2 {
            return field("eval.repeats", "needs at least 2".into());
        }
        if self.eval.snr_grid.iter().any(|s| s.is_nan()) {
            return field("eval.snr_grid", "contains NaN".into());
        }
        self.vq_config().validate().map_err(|e| Error::Config(format!("vq: {e}")))?;
        self.encoder_config().validate().map_err(|e| Error::Config(format!("encoder: {e}")))?;
        self.denoiser_config().validate().map_err(|e| Error::Config(format!("diffusion: {e}")))?;
        Ok(())
    }

    pub fn vq_config(&self) -> VqConfig {
        VqConfig {
            image_channels: 3,
            image_size: self.image_size,
            latent_channels: self.vq.latent_channels,
            downsample_factor: 4,
            codebook_size: self.vq.codebook_size,
            commitment_beta: self.vq.commitment_beta,
            width: self.vq.width,
            dead_code_steps: self.vq.dead_code_steps,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.image_size,
            channels: self.encoder.channels,
            spatial: self.encoder.spatial,
            standardize: self.encoder.standardize,
            width: self.encoder.width,
            thumbnail: self.encoder.thumbnail,
            consistency_weight: self.encoder.consistency_weight,
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: self.vq.latent_channels,
            latent_size: self.image_size / 4,
            embed_channels: self.encoder.channels,
            embed_spatial: self.encoder.spatial,
            width: self.diffusion.width,
            emb_dim: self.diffusion.emb_dim,
            time_features: self.diffusion.time_features,
            cond_map_channels: self.diffusion.cond_map_channels,
            output: self.diffusion.output,
        }
    }

    pub fn opt(&self, stage_lr: Option<f64>) -> AdamWConfig {
        AdamWConfig {
            lr: stage_lr.unwrap_or(self.lr),
            decay: self.lr_decay,
            ..Default::default()
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let d = &self.diffusion;
        FinetuneConfig {
            steps: d.steps,
            batch_size: d.batch_size.unwrap_or(self.batch_size),
            snr_range: (!d.clean).then_some((d.snr_min_db, d.snr_max_db)),
            opt: self.opt(d.lr),
            ema_decay: d.ema_decay,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_training_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!(c.batch_size, 4);
        assert_eq!(c.lr, 1e-4);
        assert_eq!(c.eval.snr_grid, vec![1.0, 5.0, 10.0, 15.0, 20.0]);
        assert_eq!(c.eval.samples, 100);
        assert_eq!(c.finetune_config().snr_range, Some((1.0, 20.0)));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut c = ExperimentConfig::default();
        c.seed = 9;
        c.diffusion.lr = Some(1e-3);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(ExperimentConfig::default().hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3\n[vq]\nsteps = 10\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.vq.steps, 10);
        assert_eq!(c.encoder, EncoderSection::default());
    }

    #[test]
    fn errors_carry_field_path() {
        let e = ExperimentConfig::from_toml("[diffusion]\nsnr_min_db = 30.0\n").unwrap_err();
        assert!(e.to_string().contains("diffusion.snr_min_db"), "{e}");
        let e = ExperimentConfig::from_toml("[vq]\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_toml("image_size = 30\n").unwrap_err();
        assert!(e.to_string().contains("vq"), "{e}");
    }
}
