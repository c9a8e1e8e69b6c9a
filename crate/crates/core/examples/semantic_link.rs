//! Trains the full semantic link at a small scale and sweeps the channel SNR.
//!
//! Usage: `cargo run --release --example semantic_link -- [vq_steps] [enc_steps] [diff_steps] [width] [batch] [lr]`

use std::time::Instant;

use semcom::dataset::{synthetic, Family, Split};
use semcom::diffusion::train::{finetune, FinetuneConfig};
use semcom::diffusion::{Denoiser, DenoiserConfig, NoiseSchedule};
use semcom::metrics::{psnr, ssim_channels};
use semcom::pipeline::{training_pairs, DiffusionReceiver, Pipeline};
use semcom::rng::stream;
use semcom::semantic::{pretrain, EncoderConfig, SemanticEncoder};
use semcom::tensor::optim::AdamWConfig;
use semcom::tensor::Tensor;
use semcom::vq::{self, VqConfig, VqModel};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> semcom::Result<()> {
    let vq_steps: usize = arg(1, 600);
    let enc_steps: usize = arg(2, 400);
    let diff_steps: usize = arg(3, 600);
    let width: usize = arg(4, 48);
    let batch: usize = arg(5, 8);
    let lr: f64 = arg(6, 1e-3);
    let train = synthetic(Family::Shapes, Split::Train, 512, 32, 0);
    let test = synthetic(Family::Shapes, Split::Test, 16, 32, 0);
    let opt = AdamWConfig {
        lr: 1e-3,
        ..Default::default()
    };

    let t0 = Instant::now();
    let mut vqm = VqModel::new(VqConfig::default(), &mut stream(0, "init/vq", 0))?;
    vq::train(&mut vqm, &train, vq_steps, 4, &opt, &mut stream(0, "train/vq", 0), |_, _| {})?;
    println!("vq: {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let mut enc = SemanticEncoder::new(EncoderConfig::default(), &mut stream(0, "init/encoder", 0))?;
    pretrain(&mut enc, &train, enc_steps, 4, &opt, &mut stream(0, "train/encoder", 0), |s, l| {
        if s % 200 == 0 {
            println!("  enc step {s} thumb {:.4} cons {:.4}", l.thumbnail, l.consistency);
        }
    })?;
    println!("encoder: {:.1}s", t0.elapsed().as_secs_f64());

    let (pairs, scale) = training_pairs(&vqm, &enc, &train, None, 32)?;
    let schedule = NoiseSchedule::cosine(1000)?;
    let dcfg = DenoiserConfig {
        width,
        ..Default::default()
    };
    let mut den = Denoiser::new(dcfg, &schedule, &mut stream(0, "init/denoiser", 0))?;
    println!("denoiser params: {}", den.params.num_scalars());
    let fcfg = FinetuneConfig {
        steps: diff_steps,
        batch_size: batch,
        snr_range: Some((1.0, 20.0)),
        opt: AdamWConfig {
            lr,
            ..Default::default()
        },
        ..Default::default()
    };
    let t0 = Instant::now();
    let mut avg = 0.0;
    finetune(&mut den, &schedule, &pairs, &fcfg, &mut stream(0, "train/diffusion", 0), |pr| {
        let r = &pr.report;
        avg = if r.step == 0 { r.loss } else { 0.98 * avg + 0.02 * r.loss };
        if r.step % 200 == 0 {
            println!("  diff step {} loss(avg) {:.4}", r.step, avg);
        }
        Ok(())
    })?;
    let el = t0.elapsed().as_secs_f64();
    println!("diffusion: {el:.1}s ({:.3}s/step)", el / diff_steps.max(1) as f64);

    let pipe = Pipeline {
        vq: vqm,
        encoder: enc,
        receiver: DiffusionReceiver {
            denoiser: den,
            schedule,
            sample_steps: 20,
            latent_scale: scale,
        },
    };
    let images = Tensor::batch_of(&test)?;
    let (lat, _) = pipe.vq.encode(&images)?;
    let vq_rec = pipe.vq.decode(&lat)?;
    println!("vq round trip PSNR {:.2}", psnr(images.data(), vq_rec.data(), 2.0)?);
    let t0 = Instant::now();
    for snr in [20.0, 15.0, 10.0, 5.0, 1.0, f64::INFINITY] {
        let out = pipe.reconstruct(&images, snr, &mut stream(0, "eval", 0))?;
        let per = 3 * 32 * 32;
        let (mut p, mut s) = (0.0, 0.0);
        for i in 0..test.len() {
            let a = &images.data()[i * per..(i + 1) * per];
            let b = &out.data()[i * per..(i + 1) * per];
            p += psnr(a, b, 2.0)?;
            s += ssim_channels(a, b, 3, 32, 32, 2.0)?;
        }
        let n = test.len() as f64;
        println!("snr {snr:5}: psnr {:.2} ssim {:.3}", p / n, s / n);
    }
    println!("eval: {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
