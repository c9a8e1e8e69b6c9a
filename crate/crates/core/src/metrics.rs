//! Image-quality and efficiency metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Per-image quality scores. A failed transmission scores zero PSNR and SSIM.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub failed: bool,
}

impl MetricReport {
    /// Scores for an unrecoverable image. The MSE is set to `peak^2`, the
    /// value at which PSNR is 0 dB.
    pub fn failure(peak: f64) -> Self {
        MetricReport {
            psnr_db: 0.0,
            ssim: 0.0,
            mse: peak * peak,
            failed: true,
        }
    }

    /// Scores an `[C, H, W]` pair (flattened, channel-major) on a `[0, peak]` scale.
    pub fn evaluate(reference: &[f64], test: &[f64], channels: usize, height: usize, width: usize, peak: f64) -> Result<Self> {
        Ok(MetricReport {
            psnr_db: psnr(reference, test, peak)?,
            ssim: ssim_channels(reference, test, channels, height, width, peak)?,
            mse: mse(reference, test)?,
            failed: false,
        })
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mse", &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::invalid("mse of empty arrays"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak must be positive, got {peak}")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Mean SSIM over all `8 x 8` windows (stride 1) of one `height x width` plane.
pub fn ssim(a: &[f64], b: &[f64], height: usize, width: usize, peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() != height * width {
        return Err(Error::shape("ssim", &[a.len()], &[b.len(), height, width]));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {height}x{width} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - SSIM_WINDOW {
        for x0 in 0..=width - SSIM_WINDOW {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + SSIM_WINDOW {
                for x in x0..x0 + SSIM_WINDOW {
                    let (p, q) = (a[y * width + x], b[y * width + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// SSIM averaged over the channels of a `[C, H, W]` image.
pub fn ssim_channels(a: &[f64], b: &[f64], channels: usize, height: usize, width: usize, peak: f64) -> Result<f64> {
    let plane = height * width;
    if a.len() != channels * plane || b.len() != a.len() {
        return Err(Error::shape("ssim", &[a.len()], &[channels, height, width]));
    }
    let mut total = 0.0;
    for c in 0..channels {
        total += ssim(&a[c * plane..(c + 1) * plane], &b[c * plane..(c + 1) * plane], height, width, peak)?;
    }
    Ok(total / channels as f64)
}

/// Ratio of image dimensionality to transmitted-representation dimensionality.
pub fn compression_ratio(image_shape: &[usize], embedding_shape: &[usize]) -> Result<f64> {
    if image_shape.is_empty() || embedding_shape.is_empty() {
        return Err(Error::invalid("compression ratio needs non-empty shapes"));
    }
    if image_shape.iter().chain(embedding_shape).any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "zero extent in {image_shape:?} / {embedding_shape:?}"
        )));
    }
    let num: f64 = image_shape.iter().map(|&d| d as f64).product();
    let den: f64 = embedding_shape.iter().map(|&d| d as f64).product();
    Ok(num / den)
}

/// Compression ratio rounded for display.
pub fn compression_ratio_display(image_shape: &[usize], embedding_shape: &[usize]) -> Result<u64> {
    Ok(compression_ratio(image_shape, embedding_shape)?.round() as u64)
}

/// Built-in pairwise distances for [`predictability`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    Mse,
    MeanAbsolute,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Distance::Mse => mse(a, b),
            Distance::MeanAbsolute => {
                if a.len() != b.len() || a.is_empty() {
                    return Err(Error::shape("mean_absolute", &[a.len()], &[b.len()]));
                }
                Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
            }
        }
    }
}

/// Mean and population standard deviation of a distance over all unordered pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

impl PairStats {
    /// Coefficient of variation `std / mean` (0 when the mean is 0).
    pub fn relative_spread(&self) -> f64 {
        if self.mean == 0.0 {
            0.0
        } else {
            self.std / self.mean
        }
    }
}

pub fn predictability<T: AsRef<[f64]>>(outputs: &[T], distance: Distance) -> Result<PairStats> {
    if outputs.len() < 2 {
        return Err(Error::invalid(format!(
            "predictability needs at least 2 outputs, got {}",
            outputs.len()
        )));
    }
    let mut d = Vec::with_capacity(outputs.len() * (outputs.len() - 1) / 2);
    for i in 0..outputs.len() {
        for j in i + 1..outputs.len() {
            d.push(distance.eval(outputs[i].as_ref(), outputs[j].as_ref())?);
        }
    }
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(PairStats {
        mean,
        std: var.sqrt(),
        pairs: d.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![100.0; 64];
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
        let b: Vec<f64> = a.iter().map(|v| v + 10.0).collect();
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p - 28.1308).abs() < 1e-3, "{p}");
        assert_eq!(p, psnr(&b, &a, 255.0).unwrap());
        assert!(psnr(&a, &b[..3], 255.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn ssim_identity_symmetry_and_small_image() {
        let a: Vec<f64> = (0..256).map(|i| ((i * 37) % 255) as f64).collect();
        assert_eq!(ssim(&a, &a, 16, 16, 255.0).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|v| v * 0.7 + 20.0).collect();
        assert_eq!(ssim(&a, &b, 16, 16, 255.0).unwrap(), ssim(&b, &a, 16, 16, 255.0).unwrap());
        assert!(ssim(&a[..49], &a[..49], 7, 7, 255.0).is_err());
    }

    #[test]
    fn compression_ratio_table_values() {
        assert_eq!(compression_ratio_display(&[3, 512, 512], &[16, 12, 12]).unwrap(), 341);
        assert_eq!(compression_ratio_display(&[3, 512, 512], &[4, 64, 64]).unwrap(), 48);
        assert_eq!(compression_ratio_display(&[3, 1024, 1024], &[16, 32, 32]).unwrap(), 192);
        assert_eq!(compression_ratio(&[3, 32, 32], &[16, 2, 2]).unwrap(), 48.0);
        assert!(compression_ratio(&[3, 0, 32], &[16, 2, 2]).is_err());
    }

    #[test]
    fn predictability_examples() {
        let same = vec![vec![1.0, 2.0]; 4];
        let s = predictability(&same, Distance::Mse).unwrap();
        assert_eq!((s.mean, s.std, s.pairs), (0.0, 0.0, 6));

        let three = vec![vec![0.0], vec![0.0], vec![3.0]];
        let s = predictability(&three, Distance::MeanAbsolute).unwrap();
        assert!((s.mean - 2.0).abs() < 1e-15);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);

        let permuted = vec![vec![3.0], vec![0.0], vec![0.0]];
        assert_eq!(predictability(&permuted, Distance::MeanAbsolute).unwrap(), s);
        assert!(predictability(&three[..1], Distance::Mse).is_err());
    }

    #[test]
    fn failure_report_scores_zero() {
        let r = MetricReport::failure(255.0);
        assert!(r.failed);
        assert_eq!((r.psnr_db, r.ssim), (0.0, 0.0));
    }
}
