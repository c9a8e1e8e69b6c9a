//! Experiment orchestration: data, staged training, checkpoint sections and
//! the evaluation protocols behind each CLI command.

pub mod eval;
pub mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Section};
use crate::config::ExperimentConfig;
use crate::dataset::{load_dir, synthetic, Family, Split};
use crate::diffusion::train::{finetune, TrainingPair};
use crate::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pipeline::{training_pairs, DiffusionReceiver, Pipeline};
use crate::rng::{seeded, stream};
use crate::semantic::{pretrain, EncoderConfig, SemanticEncoder};
use crate::tensor::Tensor;
use crate::vq::{self, VqConfig, VqModel};

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "SEMCOM_OUT_DIR";
pub const CHECKPOINT_FILE: &str = "checkpoint.cscm";

/// Checkpoint section names.
pub mod sections {
    pub const VQ: &str = "vq";
    pub const ENCODER: &str = "encoder";
    pub const DENOISER: &str = "denoiser";
    pub const SCHEDULE: &str = "schedule";
    pub const CONFIG: &str = "config";
    /// Receiver trained without channel noise, for the clean-vs-noisy ablation.
    pub const CLEAN_DENOISER: &str = "denoiser.clean";
}

/// Output directory: `$SEMCOM_OUT_DIR` if set, else `fallback`.
pub fn out_dir(fallback: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => fallback.to_path_buf(),
    }
}

/// Training images for the configured dataset.
pub fn train_images(cfg: &ExperimentConfig) -> Result<Vec<Tensor>> {
    let d = &cfg.dataset;
    match &d.dir {
        Some(dir) => {
            let mut all = load_dir(dir, cfg.image_size)?;
            let keep = all.len().saturating_sub(d.test_count);
            if keep == 0 {
                return Err(Error::Dataset(format!(
                    "{}: {} images leave nothing for training after holding out {}",
                    dir.display(),
                    all.len(),
                    d.test_count
                )));
            }
            all.truncate(keep);
            Ok(all)
        }
        None => Ok(synthetic(d.family, Split::Train, d.train_count, cfg.image_size, cfg.seed)),
    }
}

/// Up to `count` held-out images of `family` (or of the configured directory
/// when `family` is `None` and a directory is set).
pub fn test_images(cfg: &ExperimentConfig, family: Option<Family>, count: usize) -> Result<Vec<Tensor>> {
    let d = &cfg.dataset;
    match (&d.dir, family) {
        (Some(dir), None) => {
            let all = load_dir(dir, cfg.image_size)?;
            let start = all.len().saturating_sub(d.test_count);
            Ok(all.into_iter().skip(start).take(count).collect())
        }
        (_, fam) => Ok(synthetic(fam.unwrap_or(d.family), Split::Test, count, cfg.image_size, cfg.seed)),
    }
}

pub fn train_vq(cfg: &ExperimentConfig, images: &[Tensor]) -> Result<VqModel> {
    let mut model = VqModel::new(cfg.vq_config(), &mut stream(cfg.seed, "init/vq", 0))?;
    let every = (cfg.vq.steps / 10).max(1);
    vq::train(
        &mut model,
        images,
        cfg.vq.steps,
        cfg.vq.batch_size.unwrap_or(cfg.batch_size),
        &cfg.opt(cfg.vq.lr),
        &mut stream(cfg.seed, "train/vq", 0),
        |step, l| {
            if step % every == 0 {
                log::info!("vq step {step}: loss {:.5} rec {:.5}", l.total, l.reconstruction);
            }
        },
    )?;
    Ok(model)
}

pub fn pretrain_encoder(cfg: &ExperimentConfig, images: &[Tensor]) -> Result<SemanticEncoder> {
    let mut enc = SemanticEncoder::new(cfg.encoder_config(), &mut stream(cfg.seed, "init/encoder", 0))?;
    let every = (cfg.encoder.steps / 10).max(1);
    pretrain(
        &mut enc,
        images,
        cfg.encoder.steps,
        cfg.encoder.batch_size.unwrap_or(cfg.batch_size),
        &cfg.opt(cfg.encoder.lr),
        &mut stream(cfg.seed, "train/encoder", 0),
        |step, l| {
            if step % every == 0 {
                log::info!("encoder step {step}: thumbnail {:.5} consistency {:.5}", l.thumbnail, l.consistency);
            }
        },
    )?;
    Ok(enc)
}

/// Trains a denoiser on pairs from the frozen `vq` and `encoder`.
/// `on_checkpoint` receives the partially trained receiver every
/// `diffusion.checkpoint_every` steps.
pub fn finetune_diffusion(
    cfg: &ExperimentConfig,
    vq: &VqModel,
    encoder: &SemanticEncoder,
    images: &[Tensor],
    mut on_checkpoint: impl FnMut(usize, &DiffusionReceiver) -> Result<()>,
) -> Result<DiffusionReceiver> {
    let (pairs, scale) = training_pairs(vq, encoder, images, None, 32)?;
    let schedule = NoiseSchedule::cosine(cfg.diffusion.timesteps)?;
    let dcfg = DenoiserConfig {
        embed_channels: encoder.cfg.channels,
        embed_spatial: encoder.cfg.spatial,
        ..cfg.denoiser_config()
    };
    let mut denoiser = Denoiser::new(dcfg, &schedule, &mut stream(cfg.seed, "init/denoiser", 0))?;
    let fcfg = cfg.finetune_config();
    let every = cfg.diffusion.checkpoint_every;
    let log_every = (fcfg.steps / 20).max(1);
    let mut avg = 0.0;
    let rng_name = if cfg.diffusion.clean { "train/diffusion/clean" } else { "train/diffusion" };
    finetune(&mut denoiser, &schedule, &pairs, &fcfg, &mut stream(cfg.seed, rng_name, 0), |pr| {
        let r = &pr.report;
        avg = if r.step == 0 { r.loss } else { 0.98 * avg + 0.02 * r.loss };
        if r.step % log_every == 0 {
            log::info!("diffusion step {}: loss {:.5} (smoothed {avg:.5})", r.step, r.loss);
        }
        let done = r.step + 1;
        if every > 0 && done % every == 0 && done < fcfg.steps {
            on_checkpoint(
                done,
                &DiffusionReceiver {
                    denoiser: pr.weights(),
                    schedule: schedule.clone(),
                    sample_steps: cfg.diffusion.sample_steps,
                    latent_scale: scale,
                },
            )?;
        }
        Ok(())
    })?;
    Ok(DiffusionReceiver {
        denoiser,
        schedule,
        sample_steps: cfg.diffusion.sample_steps,
        latent_scale: scale,
    })
}

/// Training pairs for a receiver whose latent scale is already fixed.
pub fn pairs_for(vq: &VqModel, encoder: &SemanticEncoder, images: &[Tensor], scale: f64) -> Result<Vec<TrainingPair>> {
    Ok(training_pairs(vq, encoder, images, Some(scale), 32)?.0)
}

fn meta_toml<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("model config serializes")
}

fn parse_meta<T: for<'de> Deserialize<'de>>(section: &Section) -> Result<T> {
    toml::from_str(&section.meta)
        .map_err(|e| Error::Checkpoint(format!("section `{}` metadata: {e}", section.name)))
}

pub fn vq_section(model: &VqModel) -> Section {
    Section::from_params(sections::VQ, meta_toml(&model.cfg), &model.params)
}

pub fn load_vq(section: &Section) -> Result<VqModel> {
    let cfg: VqConfig = parse_meta(section)?;
    let mut model = VqModel::new(cfg, &mut seeded(0))?;
    section.load_params(&mut model.params)?;
    model.mark_trained();
    Ok(model)
}

pub fn encoder_section(enc: &SemanticEncoder) -> Section {
    Section::from_params(sections::ENCODER, meta_toml(&enc.cfg), &enc.params)
}

pub fn load_encoder(section: &Section) -> Result<SemanticEncoder> {
    let cfg: EncoderConfig = parse_meta(section)?;
    let mut enc = SemanticEncoder::new(cfg, &mut seeded(0))?;
    section.load_params(&mut enc.params)?;
    Ok(enc)
}

#[derive(Serialize, Deserialize)]
struct ReceiverMeta {
    latent_scale: f64,
    sample_steps: usize,
    model: DenoiserConfig,
}

/// Denoiser section stored under `name` plus the matching schedule section
/// (`schedule` for the main receiver, `<name>.schedule` otherwise).
pub fn receiver_sections(name: &str, rx: &DiffusionReceiver) -> [Section; 2] {
    let meta = ReceiverMeta {
        latent_scale: rx.latent_scale,
        sample_steps: rx.sample_steps,
        model: rx.denoiser.cfg.clone(),
    };
    let den = Section::from_params(name, meta_toml(&meta), &rx.denoiser.params);
    let mut sched = Section::new(schedule_name(name), format!("steps = {}\n", rx.schedule.steps()));
    sched
        .tensors
        .push(("alpha_bar".into(), Tensor::from_vec(rx.schedule.alpha_bars().to_vec())));
    [den, sched]
}

fn schedule_name(denoiser: &str) -> String {
    if denoiser == sections::DENOISER {
        sections::SCHEDULE.to_string()
    } else {
        format!("{denoiser}.schedule")
    }
}

/// Checkpoints keep `alpha_bar` at f32; a stored cosine schedule is rebuilt
/// at full precision so a reloaded receiver samples exactly like the trained one.
fn stored_schedule(values: &[f64]) -> Result<NoiseSchedule> {
    if let Some(steps) = values.len().checked_sub(1).filter(|&t| t > 0) {
        let cosine = NoiseSchedule::cosine(steps)?;
        if cosine.alpha_bars().iter().zip(values).all(|(a, b)| (*a as f32) as f64 == *b) {
            return Ok(cosine);
        }
    }
    NoiseSchedule::from_alpha_bar(values.to_vec())
}

pub fn load_receiver(ckpt: &Checkpoint, name: &str, command: &'static str) -> Result<DiffusionReceiver> {
    let sec = ckpt.require(name, command)?;
    let meta: ReceiverMeta = parse_meta(sec)?;
    let sched = ckpt.require(&schedule_name(name), command)?;
    let ab = sched
        .tensor("alpha_bar")
        .ok_or_else(|| Error::Checkpoint(format!("section `{}` lacks alpha_bar", sched.name)))?;
    let schedule = stored_schedule(ab.data())?;
    let mut denoiser = Denoiser::new(meta.model, &schedule, &mut seeded(0))?;
    sec.load_params(&mut denoiser.params)?;
    Ok(DiffusionReceiver {
        denoiser,
        schedule,
        sample_steps: meta.sample_steps,
        latent_scale: meta.latent_scale,
    })
}

/// Checkpoint file plus the configuration every command runs under.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
}

impl Workspace {
    pub fn new(dir: PathBuf, cfg: ExperimentConfig) -> Self {
        Workspace { dir, cfg }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join(CHECKPOINT_FILE)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::load_or_new(&self.checkpoint_path())
    }

    /// Adds `sections` to the checkpoint on disk, together with the current config.
    pub fn store(&self, sections: impl IntoIterator<Item = Section>) -> Result<()> {
        let mut ck = self.checkpoint()?;
        for s in sections {
            ck.put(s);
        }
        ck.put(Section::new(sections::CONFIG, self.cfg.to_toml()));
        ck.save(&self.checkpoint_path())
    }

    pub fn vq(&self, ck: &Checkpoint) -> Result<VqModel> {
        load_vq(ck.require(sections::VQ, "train-vq")?)
    }

    pub fn encoder(&self, ck: &Checkpoint) -> Result<SemanticEncoder> {
        load_encoder(ck.require(sections::ENCODER, "pretrain-encoder")?)
    }

    /// Models as stored on disk; every evaluation runs from these.
    pub fn pipeline(&self) -> Result<Pipeline> {
        let ck = self.checkpoint()?;
        let vq = self.vq(&ck)?;
        let encoder = self.encoder(&ck)?;
        let receiver = load_receiver(&ck, sections::DENOISER, "finetune-diffusion")?;
        Ok(Pipeline { vq, encoder, receiver })
    }

    pub fn run_train_vq(&self) -> Result<VqModel> {
        let model = train_vq(&self.cfg, &train_images(&self.cfg)?)?;
        self.store([vq_section(&model)])?;
        Ok(model)
    }

    pub fn run_pretrain_encoder(&self) -> Result<SemanticEncoder> {
        let enc = pretrain_encoder(&self.cfg, &train_images(&self.cfg)?)?;
        self.store([encoder_section(&enc)])?;
        Ok(enc)
    }

    /// Trains the receiver stored under `name`; refuses to start without the
    /// VQ and encoder sections.
    pub fn run_finetune(&self, cfg: &ExperimentConfig, name: &str) -> Result<DiffusionReceiver> {
        let ck = self.checkpoint()?;
        let vq = self.vq(&ck)?;
        let encoder = self.encoder(&ck)?;
        let images = train_images(cfg)?;
        let rx = finetune_diffusion(cfg, &vq, &encoder, &images, |step, rx| {
            log::info!("checkpointing `{name}` at step {step}");
            self.store(receiver_sections(name, rx))
        })?;
        self.store(receiver_sections(name, &rx))?;
        Ok(rx)
    }

    /// The stored pipeline with its receiver swapped for the clean-trained
    /// one, which is trained and cached on first use.
    pub fn clean_pipeline(&self) -> Result<Pipeline> {
        const COMMAND: &str = "ablate --clean-vs-noisy";
        let noisy = self.pipeline()?;
        let ck = self.checkpoint()?;
        let receiver = if ck.get(sections::CLEAN_DENOISER).is_some() {
            load_receiver(&ck, sections::CLEAN_DENOISER, COMMAND)?
        } else {
            let mut cfg = self.cfg.clone();
            cfg.diffusion.clean = true;
            self.run_finetune(&cfg, sections::CLEAN_DENOISER)?;
            load_receiver(&self.checkpoint()?, sections::CLEAN_DENOISER, COMMAND)?
        };
        Ok(Pipeline { receiver, ..noisy })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.image_size = 16;
        c.dataset.train_count = 8;
        c.vq.width = 4;
        c.vq.codebook_size = 8;
        c.vq.steps = 2;
        c.encoder.width = 4;
        c.encoder.spatial = 1;
        c.encoder.steps = 2;
        c.diffusion.width = 8;
        c.diffusion.emb_dim = 8;
        c.diffusion.time_features = 8;
        c.diffusion.steps = 3;
        c.diffusion.timesteps = 50;
        c.diffusion.sample_steps = 2;
        c.diffusion.checkpoint_every = 2;
        c
    }

    #[test]
    fn finetune_requires_upstream_sections() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path().to_path_buf(), tiny());
        let err = ws.run_finetune(&ws.cfg, sections::DENOISER).unwrap_err();
        assert!(err.to_string().contains("train-vq"), "{err}");
        ws.run_train_vq().unwrap();
        let err = ws.run_finetune(&ws.cfg, sections::DENOISER).unwrap_err();
        assert!(err.to_string().contains("pretrain-encoder"), "{err}");
    }

    #[test]
    fn staged_training_round_trips_through_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path().to_path_buf(), tiny());
        let vq = ws.run_train_vq().unwrap();
        ws.run_pretrain_encoder().unwrap();
        let rx = ws.run_finetune(&ws.cfg, sections::DENOISER).unwrap();
        let p = ws.pipeline().unwrap();
        assert_eq!(p.receiver.latent_scale, rx.latent_scale);
        assert_eq!(p.receiver.schedule, rx.schedule);
        let cb = vq.params.get(vq.codebook).data();
        let loaded = p.vq.params.get(p.vq.codebook).data();
        assert!(cb.iter().zip(loaded).all(|(a, b)| (*a as f32) as f64 == *b));
        let ck = ws.checkpoint().unwrap();
        let cfg = ExperimentConfig::from_toml(&ck.get(sections::CONFIG).unwrap().meta).unwrap();
        assert_eq!(cfg, ws.cfg);
    }

    #[test]
    fn out_dir_fallback() {
        if std::env::var_os(OUT_DIR_ENV).is_none() {
            assert_eq!(out_dir(Path::new("runs")), PathBuf::from("runs"));
        }
    }
}
