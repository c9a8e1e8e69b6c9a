//! Trains the VQ autoencoder on synthetic shapes and reports reconstruction PSNR.
//!
//! Usage: `cargo run --release --example train_vq -- [steps] [width] [batch] [cosine_floor]`
//!
//! A `cosine_floor` in (0, 1] decays the learning rate along a half cosine.

use std::time::Instant;

use semcom::dataset::{synthetic, Family, Split};
use semcom::metrics::psnr;
use semcom::rng::stream;
use semcom::tensor::optim::{AdamWConfig, LrDecay};
use semcom::tensor::Tensor;
use semcom::vq::{self, VqConfig, VqModel};

fn main() -> semcom::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let width: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let floor: Option<f64> = args.get(4).and_then(|s| s.parse().ok());
    let train = synthetic(Family::Shapes, Split::Train, 512, 32, 0);
    let test = synthetic(Family::Shapes, Split::Test, 16, 32, 0);
    let cfg = VqConfig {
        width,
        ..Default::default()
    };
    let mut model = VqModel::new(cfg, &mut stream(0, "init/vq", 0))?;
    let opt = AdamWConfig {
        lr: 1e-3,
        decay: floor.map_or(LrDecay::Constant, |floor| LrDecay::Cosine { floor }),
        ..Default::default()
    };
    let start = Instant::now();
    vq::train(&mut model, &train, steps, batch, &opt, &mut stream(0, "train/vq", 0), |step, l| {
        if step % 100 == 0 {
            println!(
                "step {step:5} total {:.4} recon {:.4} codebook {:.4} commit {:.4}",
                l.total, l.reconstruction, l.codebook, l.commitment
            );
        }
    })?;
    let elapsed = start.elapsed().as_secs_f64();
    println!("{steps} steps in {elapsed:.1}s ({:.3}s/step)", elapsed / steps.max(1) as f64);

    let batch = Tensor::batch_of(&test)?;
    let (latent, indices) = model.encode(&batch)?;
    let recon = model.decode(&latent)?;
    let mut used = indices.clone();
    used.sort_unstable();
    used.dedup();
    let p = psnr(batch.data(), recon.data(), 2.0)?;
    println!("test PSNR {p:.2} dB, {} distinct codes", used.len());
    Ok(())
}
