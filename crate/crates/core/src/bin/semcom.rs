use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use semcom::baseline::BaselineSystem;
use semcom::config::ExperimentConfig;
use semcom::dataset::Family;
use semcom::experiment::eval::{baseline_sweep, block_sweep, predictability_sweep, semantic_sweep, RunTag};
use semcom::experiment::report::{write_csv, write_snapshot, write_sweep};
use semcom::experiment::{self, sections, Workspace};
use semcom::metrics::compression_ratio;
use semcom::pipeline::Pipeline;
use semcom::Result;

#[derive(Parser)]
#[command(name = "semcom", version, about = "Semantic image communication simulator")]
struct Cli {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints and results (overridden by SEMCOM_OUT_DIR).
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of test images to evaluate.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[command(flatten)]
    embed: EmbedArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long, global = true)]
    embed_channels: Option<usize>,
    #[arg(long, global = true)]
    embed_spatial: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the VQ autoencoder.
    TrainVq {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Pretrain the semantic encoder.
    PretrainEncoder {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fine-tune the conditional denoiser on channel-corrupted embeddings.
    FinetuneDiffusion {
        #[arg(long)]
        steps: Option<usize>,
        /// Train on clean embeddings.
        #[arg(long)]
        clean: bool,
    },
    /// PSNR/SSIM of the semantic link over an SNR grid.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        snr_sweep: Option<Vec<f64>>,
    },
    /// Pairwise spread of repeated transmissions of one image.
    Predictability {
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
        #[arg(long)]
        image: Option<usize>,
    },
    /// Classical compression + LDPC + QAM chain.
    Baseline {
        #[arg(long, value_delimiter = ',')]
        snr_sweep: Option<Vec<f64>>,
        /// Random blocks per SNR for the block failure-rate table.
        #[arg(long, default_value_t = 1000)]
        blocks: usize,
    },
    /// Ablation studies.
    Ablate {
        /// Noise-trained denoiser against one trained on clean embeddings.
        #[arg(long, group = "study")]
        clean_vs_noisy: bool,
        /// Embedding spatial sizes 2 and 4.
        #[arg(long, group = "study")]
        embed_size: bool,
    },
    /// Evaluate the trained link on an unseen synthetic family without retraining.
    Generalize {
        #[arg(long)]
        dataset: Option<String>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.samples {
        cfg.eval.samples = n;
    }
    if let Some(c) = cli.embed.embed_channels {
        cfg.encoder.channels = c;
    }
    if let Some(s) = cli.embed.embed_spatial {
        cfg.encoder.spatial = s;
    }
    match &cli.command {
        Command::TrainVq { steps: Some(s) } => cfg.vq.steps = *s,
        Command::PretrainEncoder { steps: Some(s) } => cfg.encoder.steps = *s,
        Command::FinetuneDiffusion { steps, clean } => {
            if let Some(s) = steps {
                cfg.diffusion.steps = *s;
            }
            cfg.diffusion.clean |= *clean;
        }
        Command::Evaluate { snr_sweep } | Command::Baseline { snr_sweep, .. } => {
            if let Some(g) = snr_sweep {
                cfg.eval.snr_grid = g.clone();
            }
        }
        Command::Predictability { repeats, snrs, image } => {
            if let Some(r) = repeats {
                cfg.eval.repeats = *r;
            }
            if let Some(s) = snrs {
                cfg.eval.predictability_snrs = s.clone();
            }
            if let Some(i) = image {
                cfg.eval.predictability_image = *i;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cr(p: &Pipeline, image_size: usize) -> Result<f64> {
    compression_ratio(&[3, image_size, image_size], &p.encoder.cfg.embedding_shape())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let dir = experiment::out_dir(&cli.out);
    let ws = Workspace::new(dir.clone(), cfg.clone());
    let hash = cfg.hash();
    log::info!("config {hash}, output {}", dir.display());
    match cli.command {
        Command::TrainVq { .. } => {
            ws.run_train_vq()?;
            write_snapshot(&dir, "train-vq", &cfg)?;
        }
        Command::PretrainEncoder { .. } => {
            ws.run_pretrain_encoder()?;
            write_snapshot(&dir, "pretrain-encoder", &cfg)?;
        }
        Command::FinetuneDiffusion { .. } => {
            ws.run_finetune(&cfg, sections::DENOISER)?;
            write_snapshot(&dir, "finetune-diffusion", &cfg)?;
        }
        Command::Evaluate { .. } => {
            let pipe = ws.pipeline()?;
            let images = experiment::test_images(&cfg, None, cfg.eval.samples)?;
            let tag = RunTag::new("evaluate", &hash, cfg.seed);
            let (rows, timing) = semantic_sweep(&pipe, &images, &cfg.eval.snr_grid, cfg.eval.chunk, &tag, "semantic")?;
            let ratio = cr(&pipe, cfg.image_size)?;
            print_summary(&write_sweep(&dir, "evaluate", &cfg, &rows, |_| ratio)?);
            write_csv(&dir.join("evaluate_timing.csv"), &timing)?;
        }
        Command::Predictability { .. } => {
            let pipe = ws.pipeline()?;
            let idx = cfg.eval.predictability_image;
            let image = experiment::test_images(&cfg, None, idx + 1)?
                .pop()
                .ok_or_else(|| semcom::Error::Dataset(format!("no test image {idx}")))?;
            let tag = RunTag::new("predictability", &hash, cfg.seed);
            let rows = predictability_sweep(&pipe, &image, idx, &cfg.eval.predictability_snrs, cfg.eval.repeats, &tag)?;
            for r in &rows {
                println!(
                    "{:>13} snr {:>5}: pairs {} mean {:.5} std {:.5} spread {:.4}",
                    r.variant, r.snr_db, r.pairs, r.mean_distance, r.std_distance, r.relative_spread
                );
            }
            write_csv(&dir.join("predictability.csv"), &rows)?;
            write_snapshot(&dir, "predictability", &cfg)?;
        }
        Command::Baseline { blocks, .. } => {
            let sys = BaselineSystem::from_config(&cfg.baseline)?;
            let images = experiment::test_images(&cfg, None, cfg.eval.samples)?;
            let tag = RunTag::new("baseline", &hash, cfg.seed);
            let rows = baseline_sweep(&sys, &images, &cfg.eval.snr_grid, &tag)?;
            print_summary(&write_sweep(&dir, "baseline", &cfg, &rows, |_| f64::NAN)?);
            let block_rows = block_sweep(&sys, &cfg.eval.snr_grid, blocks, &tag)?;
            for b in &block_rows {
                println!("blocks snr {:>5}: failure rate {:.4} ber {:.2e}", b.snr_db, b.failure_rate, b.bit_error_rate);
            }
            write_csv(&dir.join("baseline_blocks.csv"), &block_rows)?;
        }
        Command::Ablate { clean_vs_noisy, embed_size } => {
            if clean_vs_noisy {
                ablate_clean_vs_noisy(&ws, &hash)?;
            } else if embed_size {
                ablate_embed_size(&ws, &hash)?;
            } else {
                return Err(semcom::Error::Config("ablate needs --clean-vs-noisy or --embed-size".into()));
            }
        }
        Command::Generalize { dataset } => {
            let family = match dataset {
                Some(d) => Family::parse(&d)?,
                None => cfg.dataset.unseen_family,
            };
            let pipe = ws.pipeline()?;
            let tag = RunTag::new("generalize", &hash, cfg.seed);
            let mut rows = Vec::new();
            for fam in [cfg.dataset.family, family] {
                let images = experiment::test_images(&cfg, Some(fam), cfg.eval.samples)?;
                rows.extend(semantic_sweep(&pipe, &images, &cfg.eval.snr_grid, cfg.eval.chunk, &tag, fam.name())?.0);
            }
            let ratio = cr(&pipe, cfg.image_size)?;
            print_summary(&write_sweep(&dir, "generalize", &cfg, &rows, |_| ratio)?);
        }
    }
    Ok(())
}

fn print_summary(rows: &[semcom::experiment::report::SummaryRow]) {
    for r in rows {
        println!(
            "{:>10} snr {:>5}: psnr {:6.2} dB  ssim {:.4}  failures {:.2}",
            r.variant, r.snr_db, r.mean_psnr_db, r.mean_ssim, r.failure_rate
        );
    }
}

fn ablate_clean_vs_noisy(ws: &Workspace, hash: &str) -> Result<()> {
    let cfg = &ws.cfg;
    let noisy = ws.pipeline()?;
    let clean = ws.clean_pipeline()?;
    let images = experiment::test_images(cfg, None, cfg.eval.samples)?;
    let tag = RunTag::new("ablate-clean-vs-noisy", hash, cfg.seed);
    let mut rows = semantic_sweep(&noisy, &images, &cfg.eval.snr_grid, cfg.eval.chunk, &tag, "noisy")?.0;
    rows.extend(semantic_sweep(&clean, &images, &cfg.eval.snr_grid, cfg.eval.chunk, &tag, "clean")?.0);
    let ratio = cr(&noisy, cfg.image_size)?;
    print_summary(&write_sweep(&ws.dir, "ablate_clean_vs_noisy", cfg, &rows, |_| ratio)?);
    Ok(())
}

fn ablate_embed_size(ws: &Workspace, hash: &str) -> Result<()> {
    let cfg = &ws.cfg;
    let train = experiment::train_images(cfg)?;
    let images = experiment::test_images(cfg, None, cfg.eval.samples)?;
    let tag = RunTag::new("ablate-embed-size", hash, cfg.seed);
    let ck = ws.checkpoint()?;
    let vq = ws.vq(&ck)?;
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for spatial in [2usize, 4] {
        let mut c = cfg.clone();
        c.encoder.spatial = spatial;
        let name = format!("spatial{spatial}");
        let enc = experiment::pretrain_encoder(&c, &train)?;
        let rx = experiment::finetune_diffusion(&c, &vq, &enc, &train, |_, _| Ok(()))?;
        let pipe = Pipeline {
            vq: vq.clone(),
            encoder: enc,
            receiver: rx,
        };
        ratios.push((name.clone(), cr(&pipe, c.image_size)?));
        rows.extend(semantic_sweep(&pipe, &images, &c.eval.snr_grid, c.eval.chunk, &tag, &name)?.0);
    }
    let lookup = |v: &str| ratios.iter().find(|(n, _)| n == v).map_or(f64::NAN, |(_, r)| *r);
    print_summary(&write_sweep(&ws.dir, "ablate_embed_size", cfg, &rows, lookup)?);
    for (n, r) in &ratios {
        println!("{n}: compression ratio {r}");
    }
    Ok(())
}
