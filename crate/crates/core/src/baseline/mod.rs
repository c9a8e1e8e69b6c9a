//! Classical benchmark: block-DCT codec, rate-1/2 LDPC, QAM over AWGN.

pub mod codec;
pub mod ldpc;
pub mod qam;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit_complex, ChannelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use codec::CodecStream;
pub use ldpc::{DecodeOutcome, LdpcCode};
pub use qam::{Qam, QamOrder};

/// Seed of the PEG construction used by default.
pub const DEFAULT_CODE_SEED: u64 = 0x1d9c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub quality: u8,
    pub ldpc_n: usize,
    pub qam_order: u32,
    pub max_iters: usize,
    pub code_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            quality: 75,
            ldpc_n: 1024,
            qam_order: 4,
            max_iters: ldpc::DEFAULT_MAX_ITERS,
            code_seed: DEFAULT_CODE_SEED,
        }
    }
}

/// Result of pushing one image through the classical chain.
#[derive(Clone, Debug)]
pub enum BaselineOutcome {
    Delivered {
        image: Tensor,
        blocks: usize,
        failed_blocks: usize,
    },
    Failure {
        reason: String,
        blocks: usize,
        failed_blocks: usize,
    },
}

impl BaselineOutcome {
    pub fn is_failure(&self) -> bool {
        matches!(self, BaselineOutcome::Failure { .. })
    }

    pub fn image(&self) -> Option<&Tensor> {
        match self {
            BaselineOutcome::Delivered { image, .. } => Some(image),
            BaselineOutcome::Failure { .. } => None,
        }
    }

    pub fn failed_blocks(&self) -> usize {
        match self {
            BaselineOutcome::Delivered { failed_blocks, .. } | BaselineOutcome::Failure { failed_blocks, .. } => {
                *failed_blocks
            }
        }
    }
}

/// Codec, code and constellation assembled into one transmitter/receiver pair.
#[derive(Clone, Debug)]
pub struct BaselineSystem {
    pub quality: u8,
    pub code: LdpcCode,
    pub qam: Qam,
    pub max_iters: usize,
}

impl BaselineSystem {
    pub fn new(quality: u8, code: LdpcCode, qam: Qam) -> Self {
        BaselineSystem {
            quality,
            code,
            qam,
            max_iters: ldpc::DEFAULT_MAX_ITERS,
        }
    }

    pub fn from_config(cfg: &BaselineConfig) -> Result<Self> {
        if !(1..=100).contains(&cfg.quality) {
            return Err(Error::invalid(format!("quality must be in 1..=100, got {}", cfg.quality)));
        }
        let code = if cfg.ldpc_n == 8 {
            LdpcCode::toy()
        } else {
            LdpcCode::peg_regular(cfg.ldpc_n, cfg.code_seed)?
        };
        let mut sys = BaselineSystem::new(cfg.quality, code, Qam::from_order(cfg.qam_order)?);
        sys.max_iters = cfg.max_iters;
        Ok(sys)
    }

    /// Image -> codec -> LDPC -> QAM -> AWGN -> LLR -> LDPC decode -> codec decode.
    ///
    /// A failed header block or a body the codec cannot parse yields
    /// [`BaselineOutcome::Failure`]; other failed blocks pass their hard
    /// decisions through and may garble the picture.
    pub fn transmit<R: Rng + ?Sized>(&self, image: &Tensor, snr_db: f64, rng: &mut R) -> Result<BaselineOutcome> {
        let stream = codec::encode(image, self.quality)?;
        let bytes = stream.to_bytes();
        let k = self.code.k();
        let bits = bytes_to_bits(&bytes, k);
        let blocks = bits.len() / k;
        let decoded = self.send_blocks(&bits, snr_db, rng)?;
        let mut rx_bits = Vec::with_capacity(bits.len());
        let mut failed_blocks = 0;
        let mut header_ok = true;
        let header_blocks = (codec::HEADER_LEN * 8).div_ceil(k);
        for (i, d) in decoded.iter().enumerate() {
            if !d.success {
                failed_blocks += 1;
                if i < header_blocks {
                    header_ok = false;
                }
            }
            rx_bits.extend_from_slice(&d.bits);
        }
        if !header_ok {
            return Ok(BaselineOutcome::Failure {
                reason: "header block failed to decode".into(),
                blocks,
                failed_blocks,
            });
        }
        let rx_bytes = bits_to_bytes(&rx_bits);
        let parsed = CodecStream::from_bytes(&rx_bytes).and_then(|s| {
            if s.width != stream.width || s.height != stream.height || s.channels != stream.channels {
                return Err(Error::Decode("header dimensions changed in transit".into()));
            }
            codec::decode(&s)
        });
        Ok(match parsed {
            Ok(image) => BaselineOutcome::Delivered {
                image,
                blocks,
                failed_blocks,
            },
            Err(e) => BaselineOutcome::Failure {
                reason: e.to_string(),
                blocks,
                failed_blocks,
            },
        })
    }

    /// Encodes, modulates and decodes a bit stream whose length is a multiple of `k`.
    pub fn send_blocks<R: Rng + ?Sized>(&self, bits: &[u8], snr_db: f64, rng: &mut R) -> Result<Vec<DecodeOutcome>> {
        let (k, n) = (self.code.k(), self.code.n());
        if bits.len() % k != 0 {
            return Err(Error::invalid(format!("{} bits is not a whole number of {k}-bit blocks", bits.len())));
        }
        let mut coded = Vec::with_capacity(bits.len() / k * n);
        for block in bits.chunks(k) {
            coded.extend(self.code.encode(block)?);
        }
        let bps = self.qam.bits_per_symbol();
        let coded_len = coded.len();
        coded.resize(coded_len.div_ceil(bps) * bps, 0);
        let symbols = self.qam.modulate(&coded)?;
        let (received, noise_var) = transmit_complex(&symbols, &ChannelConfig::new(snr_db), rng)?;
        let llr = self.qam.demodulate_llr(&received, noise_var);
        llr[..coded_len]
            .chunks(n)
            .map(|block| self.code.decode(block, self.max_iters))
            .collect()
    }
}

/// Bits (MSB first) zero-padded to a multiple of `block`.
pub fn bytes_to_bits(bytes: &[u8], block: usize) -> Vec<u8> {
    let mut bits: Vec<u8> = bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1))
        .collect();
    let len = bits.len().div_ceil(block.max(1)) * block.max(1);
    bits.resize(len, 0);
    bits
}

pub fn bits_to_bytes(bits: &[u8]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b & 1) << (7 - i))))
        .collect()
}

/// Fraction of random `k`-bit blocks that fail to decode, and the post-decoding
/// bit error rate, at one SNR.
pub fn block_error_rates<R: Rng + ?Sized>(
    sys: &BaselineSystem,
    snr_db: f64,
    blocks: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let k = sys.code.k();
    let bits: Vec<u8> = (0..blocks * k).map(|_| rng.gen_range(0..2u8)).collect();
    let out = sys.send_blocks(&bits, snr_db, rng)?;
    let failures = out.iter().filter(|d| !d.success).count();
    let bit_errors: usize = out
        .iter()
        .zip(bits.chunks(k))
        .map(|(d, b)| d.bits.iter().zip(b).filter(|(x, y)| x != y).count())
        .sum();
    Ok((failures as f64 / blocks.max(1) as f64, bit_errors as f64 / bits.len().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn test_image() -> Tensor {
        let d: Vec<f64> = (0..3 * 16 * 16)
            .map(|i| ((i % 16) as f64 / 8.0 - 1.0) * 0.8 + ((i / 48) as f64 * 0.1).sin() * 0.1)
            .collect();
        Tensor::new(vec![1, 3, 16, 16], d).unwrap()
    }

    #[test]
    fn bit_packing_round_trips() {
        let bytes = vec![0xa5, 0x01, 0xff];
        let bits = bytes_to_bits(&bytes, 16);
        assert_eq!(bits.len(), 32);
        assert_eq!(&bits[..8], &[1, 0, 1, 0, 0, 1, 0, 1]);
        assert_eq!(&bits_to_bytes(&bits)[..3], &bytes[..]);
    }

    #[test]
    fn noiseless_chain_matches_codec_round_trip() {
        let img = test_image();
        let sys = BaselineSystem::new(60, LdpcCode::toy(), Qam::new(QamOrder::Qam16));
        let out = sys.transmit(&img, f64::INFINITY, &mut seeded(1)).unwrap();
        let direct = codec::decode(&codec::encode(&img, 60).unwrap()).unwrap();
        assert_eq!(out.image().unwrap().data(), direct.data());
        assert_eq!(out.failed_blocks(), 0);
    }

    #[test]
    fn toy_code_rarely_fails_at_high_snr() {
        let img = test_image();
        let sys = BaselineSystem::new(50, LdpcCode::toy(), Qam::new(QamOrder::Qam4));
        let mut rng = seeded(7);
        let failures = (0..100)
            .filter(|_| sys.transmit(&img, 20.0, &mut rng).unwrap().is_failure())
            .count();
        assert!(failures < 5, "{failures} failures");
    }

    #[test]
    fn very_low_snr_fails() {
        let img = test_image();
        let sys = BaselineSystem::from_config(&BaselineConfig {
            ldpc_n: 96,
            ..Default::default()
        })
        .unwrap();
        let out = sys.transmit(&img, -5.0, &mut seeded(3)).unwrap();
        assert!(out.is_failure());
    }
}
