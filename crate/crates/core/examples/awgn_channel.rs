//! Sends a unit-power signal through the AWGN channel and checks the realized SNR.
//!
//! Usage: `cargo run --release --example awgn_channel -- [snr_db] [samples]`

use rand::Rng;
use semcom::channel::{measure_snr, sigma_squared, transmit, ChannelConfig, PowerConvention};
use semcom::rng::stream;

fn main() -> semcom::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let snr_db: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let samples: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(100_000);

    let mut rng = stream(0, "example/signal", 0);
    let signal: Vec<f64> = (0..samples).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();

    for power in [PowerConvention::FixedUnit, PowerConvention::EmpiricalPerTransmission] {
        let cfg = ChannelConfig::new(snr_db).with_power(power);
        let received = transmit(&signal, &cfg, &mut stream(0, "example/channel", 0))?;
        let noise_var = signal
            .iter()
            .zip(&received)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            / samples as f64;
        println!(
            "{power:?}: target {snr_db:.2} dB, measured {:.3} dB, noise var {:.5} (expected {:.5})",
            measure_snr(&signal, &received)?,
            noise_var,
            sigma_squared(snr_db, 1.0)?
        );
    }
    Ok(())
}
