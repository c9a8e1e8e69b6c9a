//! Runs the three training stages through a checkpointed workspace, then
//! reloads the pipeline and scores it with an SNR sweep and a predictability check.
//!
//! Usage: `cargo run --release --example staged_training -- [config.toml|tiny] [out_dir]`
//!
//! `tiny` shrinks every stage so the whole run takes seconds; the models it
//! produces are not useful, only the plumbing is exercised.

use std::path::PathBuf;

use semcom::config::ExperimentConfig;
use semcom::experiment::eval::{predictability_sweep, semantic_sweep, RunTag};
use semcom::experiment::report::summarize;
use semcom::experiment::{sections, test_images, Workspace};

fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.image_size = 16;
    c.dataset.train_count = 16;
    c.vq.width = 4;
    c.vq.codebook_size = 16;
    c.vq.steps = 20;
    c.encoder.width = 4;
    c.encoder.steps = 20;
    c.encoder.spatial = 2;
    c.diffusion.width = 8;
    c.diffusion.emb_dim = 16;
    c.diffusion.time_features = 16;
    c.diffusion.steps = 20;
    c.diffusion.timesteps = 100;
    c.diffusion.sample_steps = 5;
    c
}

fn main() -> semcom::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let cfg = match args.get(1).map(String::as_str) {
        None | Some("tiny") => tiny(),
        Some(path) => ExperimentConfig::load(path.as_ref())?,
    };
    let dir = PathBuf::from(args.get(2).map(String::as_str).unwrap_or("target/staged_training"));
    std::fs::create_dir_all(&dir)?;
    let ws = Workspace::new(dir, cfg.clone());

    ws.run_train_vq()?;
    ws.run_pretrain_encoder()?;
    ws.run_finetune(&cfg, sections::DENOISER)?;
    for s in &ws.checkpoint()?.sections {
        println!("section {:24} {:3} tensors", s.name, s.tensors.len());
    }

    let pipe = ws.pipeline()?;
    let images = test_images(&cfg, None, 8)?;
    let tag = RunTag::new("example", &cfg.hash(), cfg.seed);
    let (rows, _) = semantic_sweep(&pipe, &images, &cfg.eval.snr_grid, cfg.eval.chunk, &tag, "semantic")?;
    for row in summarize(&rows, |_| 0.0) {
        println!("{:5.1} dB: psnr {:6.2}  ssim {:.3}", row.snr_db, row.mean_psnr_db, row.mean_ssim);
    }

    let snrs = &cfg.eval.predictability_snrs;
    for row in predictability_sweep(&pipe, &images[0], 0, snrs, cfg.eval.repeats, &tag)? {
        println!("{:14} {:5.1} dB: spread {:.3}", row.variant, row.snr_db, row.relative_spread);
    }
    Ok(())
}
