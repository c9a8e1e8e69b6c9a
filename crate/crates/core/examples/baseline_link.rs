//! Classical chain end to end: block error rates of the LDPC code and images delivered per SNR.
//!
//! Usage: `cargo run --release --example baseline_link -- [blocks] [images]`

use semcom::baseline::{block_error_rates, BaselineConfig, BaselineSystem};
use semcom::dataset::{synthetic, Family, Split};
use semcom::metrics::psnr;
use semcom::rng::stream;

fn main() -> semcom::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let blocks: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let sys = BaselineSystem::from_config(&BaselineConfig::default())?;
    let images = synthetic(Family::Shapes, Split::Test, count, 32, 0);

    println!("snr_db  block_fail  ber       delivered  mean_psnr");
    for snr in [0.0, 1.0, 2.0, 3.0, 5.0, 10.0, 20.0] {
        let (fer, ber) = block_error_rates(&sys, snr, blocks, &mut stream(0, "example/blocks", 0))?;
        let mut rng = stream(0, "example/images", 0);
        let mut scores = Vec::new();
        for img in &images {
            if let Some(out) = sys.transmit(img, snr, &mut rng)?.image() {
                scores.push(psnr(img.data(), out.data(), 1.0)?);
            }
        }
        let mean = if scores.is_empty() {
            f64::NAN
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        println!("{snr:6.1}  {fer:10.3}  {ber:.2e}  {:4}/{count:<4}  {mean:9.2}", scores.len());
    }
    Ok(())
}
