//! Gray-mapped square QAM with max-log soft demodulation.
//!
//! Bits are grouped per symbol as `[I bits.., Q bits..]`. On each axis the
//! first bit picks the sign (0 -> positive) and, for 16-QAM, the second bit
//! picks the magnitude (0 -> outer level 3, 1 -> inner level 1), which keeps
//! neighbouring levels one bit apart. LLRs are positive for bit 0.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Supported constellation sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QamOrder {
    Qam4,
    Qam16,
}

impl QamOrder {
    pub fn from_order(order: u32) -> Result<Self> {
        match order {
            4 => Ok(QamOrder::Qam4),
            16 => Ok(QamOrder::Qam16),
            other => Err(Error::invalid(format!("unsupported QAM order {other}; use 4 or 16"))),
        }
    }

    pub fn order(self) -> u32 {
        match self {
            QamOrder::Qam4 => 4,
            QamOrder::Qam16 => 16,
        }
    }

    pub fn bits_per_symbol(self) -> usize {
        match self {
            QamOrder::Qam4 => 2,
            QamOrder::Qam16 => 4,
        }
    }
}

/// Constellation table plus the bit labels of every point.
#[derive(Clone, Debug)]
pub struct Qam {
    order: QamOrder,
    points: Vec<Complex64>,
    labels: Vec<u32>,
}

impl Qam {
    pub fn new(order: QamOrder) -> Self {
        let bps = order.bits_per_symbol();
        let per_axis = bps / 2;
        let (scale, level) = match order {
            QamOrder::Qam4 => (1.0 / 2f64.sqrt(), None),
            QamOrder::Qam16 => (1.0 / 10f64.sqrt(), Some(())),
        };
        let axis = |bits: u32| -> f64 {
            // bits: most significant = sign bit
            let sign_bit = (bits >> (per_axis - 1)) & 1;
            let sign = if sign_bit == 0 { 1.0 } else { -1.0 };
            let mag = match level {
                None => 1.0,
                Some(()) => {
                    if bits & 1 == 0 {
                        3.0
                    } else {
                        1.0
                    }
                }
            };
            sign * mag * scale
        };
        let mut points = Vec::with_capacity(1 << bps);
        let mut labels = Vec::with_capacity(1 << bps);
        for label in 0..(1u32 << bps) {
            let i_bits = label >> per_axis;
            let q_bits = label & ((1 << per_axis) - 1);
            points.push(Complex64::new(axis(i_bits), axis(q_bits)));
            labels.push(label);
        }
        Qam {
            order,
            points,
            labels,
        }
    }

    pub fn from_order(order: u32) -> Result<Self> {
        Ok(Qam::new(QamOrder::from_order(order)?))
    }

    pub fn order(&self) -> QamOrder {
        self.order
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.order.bits_per_symbol()
    }

    /// Maps bits (each 0 or 1) to unit-average-energy symbols.
    pub fn modulate(&self, bits: &[u8]) -> Result<Vec<Complex64>> {
        let bps = self.bits_per_symbol();
        if bits.len() % bps != 0 {
            return Err(Error::invalid(format!(
                "{} bits is not a multiple of {bps} bits per symbol",
                bits.len()
            )));
        }
        Ok(bits
            .chunks(bps)
            .map(|chunk| {
                let label = chunk.iter().fold(0u32, |acc, &b| (acc << 1) | (b & 1) as u32);
                self.points[label as usize]
            })
            .collect())
    }

    /// Max-log LLRs, `(min_{b=1} |y-s|^2 - min_{b=0} |y-s|^2) / noise_var`,
    /// where `noise_var` is the total complex noise variance.
    pub fn demodulate_llr(&self, symbols: &[Complex64], noise_var: f64) -> Vec<f64> {
        let bps = self.bits_per_symbol();
        let nv = noise_var.max(1e-12);
        let mut llrs = Vec::with_capacity(symbols.len() * bps);
        let mut d = vec![0.0; self.points.len()];
        for y in symbols {
            for (di, p) in d.iter_mut().zip(&self.points) {
                *di = (y - p).norm_sqr();
            }
            for bit in 0..bps {
                let shift = bps - 1 - bit;
                let (mut d0, mut d1) = (f64::INFINITY, f64::INFINITY);
                for (di, &label) in d.iter().zip(&self.labels) {
                    if (label >> shift) & 1 == 0 {
                        d0 = d0.min(*di);
                    } else {
                        d1 = d1.min(*di);
                    }
                }
                llrs.push((d1 - d0) / nv);
            }
        }
        llrs
    }
}
