//! Compresses synthetic images with the block-DCT codec across quality levels.
//!
//! Usage: `cargo run --release --example image_codec -- [size]`

use semcom::baseline::codec;
use semcom::dataset::{synthetic, Family, Split};
use semcom::metrics::{psnr, ssim_channels};

fn main() -> semcom::Result<()> {
    let size: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    for family in [Family::Shapes, Family::Textures] {
        let images = synthetic(family, Split::Test, 8, size, 0);
        for quality in [10u8, 50, 75, 95] {
            let (mut bytes, mut p, mut s) = (0.0, 0.0, 0.0);
            for img in &images {
                let stream = codec::encode(img, quality)?;
                let back = codec::decode(&codec::CodecStream::from_bytes(&stream.to_bytes())?)?;
                bytes += stream.total_bytes() as f64;
                p += psnr(img.data(), back.data(), 1.0)?;
                s += ssim_channels(img.data(), back.data(), 3, size, size, 1.0)?;
            }
            let n = images.len() as f64;
            println!(
                "{:8} q={quality:3}: {:7.1} bytes, {:.2} dB, ssim {:.3}",
                family.name(),
                bytes / n,
                p / n,
                s / n
            );
        }
    }
    Ok(())
}
