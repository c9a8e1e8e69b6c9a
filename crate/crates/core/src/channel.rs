//! AWGN channel with an exact SNR parametrization.
//!
//! `SNR = 10 log10(P / sigma^2)`, so `sigma^2 = P / 10^(snr/10)`. Real payloads
//! (embeddings) get real noise of variance `sigma^2`; complex symbols get
//! independent noise of variance `sigma^2 / 2` on each quadrature.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the signal power `P` is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerConvention {
    /// `P = 1`, valid for standardized embeddings and unit-energy symbols.
    #[default]
    FixedUnit,
    /// `P` is the mean square of the values being transmitted.
    EmpiricalPerTransmission,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Decibels; `f64::INFINITY` means a noiseless channel.
    pub snr_db: f64,
    pub power: PowerConvention,
}

impl ChannelConfig {
    pub fn new(snr_db: f64) -> Self {
        ChannelConfig {
            snr_db,
            power: PowerConvention::FixedUnit,
        }
    }

    pub fn noiseless() -> Self {
        ChannelConfig::new(f64::INFINITY)
    }

    pub fn with_power(mut self, power: PowerConvention) -> Self {
        self.power = power;
        self
    }

    fn noise_variance(&self, values: impl Iterator<Item = f64>, count: usize) -> Result<f64> {
        let p = match self.power {
            PowerConvention::FixedUnit => 1.0,
            PowerConvention::EmpiricalPerTransmission => {
                values.map(|v| v * v).sum::<f64>() / count.max(1) as f64
            }
        };
        if self.snr_db == f64::INFINITY || (p == 0.0 && self.power == PowerConvention::EmpiricalPerTransmission) {
            return Ok(0.0);
        }
        sigma_squared(self.snr_db, p)
    }
}

/// Noise variance giving `snr_db` for signal power `power`.
pub fn sigma_squared(snr_db: f64, power: f64) -> Result<f64> {
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::invalid(format!("signal power must be positive, got {power}")));
    }
    if snr_db.is_nan() {
        return Err(Error::invalid("SNR is NaN"));
    }
    let s2 = power / 10f64.powf(snr_db / 10.0);
    if !(s2.is_finite() && s2 > 0.0) && snr_db != f64::INFINITY {
        return Err(Error::invalid(format!("sigma^2 not representable for {snr_db} dB")));
    }
    Ok(s2)
}

/// Adds real AWGN to `values` and returns the noisy copy.
pub fn transmit<R: Rng + ?Sized>(values: &[f64], cfg: &ChannelConfig, rng: &mut R) -> Result<Vec<f64>> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "channel input".into(),
            detail: format!("element {pos}"),
        });
    }
    let s2 = cfg.noise_variance(values.iter().copied(), values.len())?;
    if s2 == 0.0 {
        return Ok(values.to_vec());
    }
    let sigma = s2.sqrt();
    Ok(values
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect())
}

/// Real AWGN built from a caller-supplied unit-variance noise realization.
///
/// With the same `unit_noise` at several SNRs the perturbations differ only in
/// scale, which is how sweeps share random numbers across operating points.
pub fn transmit_with_noise(values: &[f64], unit_noise: &[f64], cfg: &ChannelConfig) -> Result<Vec<f64>> {
    if values.len() != unit_noise.len() {
        return Err(Error::shape("transmit_with_noise", &[values.len()], &[unit_noise.len()]));
    }
    let s2 = cfg.noise_variance(values.iter().copied(), values.len())?;
    let sigma = s2.sqrt();
    Ok(values
        .iter()
        .zip(unit_noise)
        .map(|(v, n)| if s2 == 0.0 { *v } else { v + sigma * n })
        .collect())
}

/// Adds circularly-symmetric complex AWGN (`sigma^2 / 2` per quadrature).
pub fn transmit_complex<R: Rng + ?Sized>(
    symbols: &[Complex64],
    cfg: &ChannelConfig,
    rng: &mut R,
) -> Result<(Vec<Complex64>, f64)> {
    if symbols.iter().any(|s| !(s.re.is_finite() && s.im.is_finite())) {
        return Err(Error::NonFinite {
            what: "channel input".into(),
            detail: "complex symbol".into(),
        });
    }
    let s2 = cfg.noise_variance(symbols.iter().map(|s| s.norm()), symbols.len())?;
    if s2 == 0.0 {
        return Ok((symbols.to_vec(), 0.0));
    }
    let sigma = (s2 / 2.0).sqrt();
    let out = symbols
        .iter()
        .map(|s| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            s + Complex64::new(sigma * re, sigma * im)
        })
        .collect();
    Ok((out, s2))
}

/// Empirical SNR of a received copy, in dB.
pub fn measure_snr(clean: &[f64], received: &[f64]) -> Result<f64> {
    if clean.len() != received.len() {
        return Err(Error::shape("measure_snr", &[clean.len()], &[received.len()]));
    }
    let n = clean.len().max(1) as f64;
    let p = clean.iter().map(|v| v * v).sum::<f64>() / n;
    let noise = clean
        .iter()
        .zip(received)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        / n;
    if noise == 0.0 {
        return Err(Error::invalid("received equals transmitted: SNR is infinite"));
    }
    Ok(10.0 * (p / noise).log10())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn sigma_squared_examples() {
        assert_eq!(sigma_squared(0.0, 1.0).unwrap(), 1.0);
        assert!((sigma_squared(10.0, 1.0).unwrap() - 0.1).abs() < 1e-15);
        let v = sigma_squared(3.0, 4.0).unwrap();
        assert!((v - 4.0 / 10f64.powf(0.3)).abs() < 1e-15);
        assert!((v - 2.00475).abs() < 1e-5);
        assert!(sigma_squared(3.0, 0.0).is_err());
        assert!(sigma_squared(3.0, -1.0).is_err());
    }

    #[test]
    fn infinite_snr_is_identity() {
        let z = vec![0.3, -1.2, 2.0];
        let out = transmit(&z, &ChannelConfig::noiseless(), &mut seeded(1)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn same_seed_same_noise() {
        let z = vec![0.0; 16];
        let cfg = ChannelConfig::new(5.0);
        let a = transmit(&z, &cfg, &mut seeded(9)).unwrap();
        let b = transmit(&z, &cfg, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        let c = transmit(&z, &cfg, &mut seeded(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn measured_snr_edge_cases() {
        let z = vec![1.0, -1.0, 1.0, -1.0];
        let zh: Vec<f64> = z.iter().map(|v| v * 2.0).collect();
        // noise equal in power to the signal
        assert!(measure_snr(&z, &zh).unwrap().abs() < 1e-12);
        let z2: Vec<f64> = z.iter().map(|v| v * 2.0).collect();
        let zh2: Vec<f64> = zh.iter().map(|v| v * 2.0).collect();
        assert_eq!(measure_snr(&z, &zh).unwrap(), measure_snr(&z2, &zh2).unwrap());
        assert!(measure_snr(&z, &z).is_err());
    }

    #[test]
    fn empirical_power_scales_noise() {
        let z = vec![2.0; 200_000];
        let cfg = ChannelConfig::new(10.0).with_power(PowerConvention::EmpiricalPerTransmission);
        let out = transmit(&z, &cfg, &mut seeded(4)).unwrap();
        let snr = measure_snr(&z, &out).unwrap();
        assert!((snr - 10.0).abs() < 0.1, "{snr}");
    }

    #[test]
    fn complex_noise_splits_variance() {
        let s = vec![Complex64::new(1.0, 0.0); 200_000];
        let (out, s2) = transmit_complex(&s, &ChannelConfig::new(3.0), &mut seeded(2)).unwrap();
        let n = out.len() as f64;
        let var_re = out.iter().map(|y| (y.re - 1.0).powi(2)).sum::<f64>() / n;
        let var_im = out.iter().map(|y| y.im.powi(2)).sum::<f64>() / n;
        assert!((var_re - s2 / 2.0).abs() / (s2 / 2.0) < 0.02);
        assert!((var_im - s2 / 2.0).abs() / (s2 / 2.0) < 0.02);
    }
}
