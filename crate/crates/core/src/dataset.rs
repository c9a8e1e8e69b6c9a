//! Image sources: synthetic families and PPM/PNG directories.
//!
//! Images are `[3, S, S]` tensors with values in `[-1, 1]`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, SimRng};
use crate::tensor::Tensor;

/// Synthetic image families. `Shapes` trains the models; `Textures` is a
/// disjoint family used to probe generalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Shapes,
    Textures,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Shapes => "shapes",
            Family::Textures => "textures",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(Family::Shapes),
            "textures" => Ok(Family::Textures),
            other => Err(Error::Dataset(format!("unknown synthetic family `{other}` (shapes, textures)"))),
        }
    }
}

/// Which split of a synthetic family to draw from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

const SHAPES_PALETTE: [[f64; 3]; 6] = [
    [0.90, 0.25, 0.20],
    [0.20, 0.55, 0.90],
    [0.95, 0.80, 0.20],
    [0.25, 0.75, 0.35],
    [0.95, 0.95, 0.92],
    [0.12, 0.12, 0.18],
];

const TEXTURES_PALETTE: [[f64; 3]; 5] = [
    [0.55, 0.35, 0.70],
    [0.95, 0.55, 0.75],
    [0.30, 0.85, 0.80],
    [0.60, 0.45, 0.25],
    [0.85, 0.90, 0.55],
];

fn pick<R: Rng>(rng: &mut R, palette: &[[f64; 3]]) -> [f64; 3] {
    palette[rng.gen_range(0..palette.len())]
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Renders a `[0,1]` RGB canvas from a per-pixel colour function.
fn render(size: usize, mut f: impl FnMut(f64, f64) -> [f64; 3]) -> Tensor {
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let c = f(u, v);
            for ch in 0..3 {
                data[ch * size * size + y * size + x] = c[ch].clamp(0.0, 1.0) * 2.0 - 1.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("canvas shape")
}

enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn contains(&self, u: f64, v: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => u >= x0 && u <= x1 && v >= y0 && v <= y1,
            Shape::Circle { cx, cy, r } => (u - cx).powi(2) + (v - cy).powi(2) <= r * r,
        }
    }
}

fn shapes_image(rng: &mut SimRng, size: usize) -> Tensor {
    let a = pick(rng, &SHAPES_PALETTE);
    let b = pick(rng, &SHAPES_PALETTE);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let count = rng.gen_range(1..=3);
    let shapes: Vec<(Shape, [f64; 3])> = (0..count)
        .map(|_| {
            let colour = pick(rng, &SHAPES_PALETTE);
            let shape = if rng.gen_bool(0.5) {
                let (w, h) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6));
                let (x0, y0) = (rng.gen_range(0.0..1.0 - w), rng.gen_range(0.0..1.0 - h));
                Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
            } else {
                let r = rng.gen_range(0.12..0.3);
                Shape::Circle {
                    cx: rng.gen_range(r..1.0 - r),
                    cy: rng.gen_range(r..1.0 - r),
                    r,
                }
            };
            (shape, colour)
        })
        .collect();
    render(size, |u, v| {
        let t = ((u - 0.5) * dx + (v - 0.5) * dy) / 1.42 + 0.5;
        let mut c = lerp(a, b, t);
        for (s, col) in &shapes {
            if s.contains(u, v) {
                c = *col;
            }
        }
        c
    })
}

fn textures_image(rng: &mut SimRng, size: usize) -> Tensor {
    let a = pick(rng, &TEXTURES_PALETTE);
    let b = pick(rng, &TEXTURES_PALETTE);
    let kind = rng.gen_range(0..3);
    let freq: f64 = rng.gen_range(2.0..6.0);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    render(size, |u, v| {
        let s = match kind {
            0 => 0.5 + 0.5 * (std::f64::consts::TAU * freq * (u * dx + v * dy) + phase).sin(),
            1 => {
                let cu = (u * freq).floor() as i64;
                let cv = (v * freq).floor() as i64;
                ((cu + cv).rem_euclid(2)) as f64
            }
            _ => {
                let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
                0.5 + 0.5 * (std::f64::consts::TAU * freq * r + phase).cos()
            }
        };
        lerp(a, b, s)
    })
}

/// Image `index` of a synthetic family split; independent of any other index.
pub fn synthetic_image(family: Family, split: Split, index: u64, size: usize, seed: u64) -> Tensor {
    let split_name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    let mut rng = stream(seed, &format!("data/{}/{split_name}", family.name()), index);
    match family {
        Family::Shapes => shapes_image(&mut rng, size),
        Family::Textures => textures_image(&mut rng, size),
    }
}

pub fn synthetic(family: Family, split: Split, count: usize, size: usize, seed: u64) -> Vec<Tensor> {
    (0..count as u64)
        .map(|i| synthetic_image(family, split, i, size, seed))
        .collect()
}

/// Maps 8-bit levels to `[-1, 1]`.
pub fn normalize(level: u8) -> f64 {
    level as f64 / 127.5 - 1.0
}

pub fn denormalize(value: f64) -> u8 {
    ((value.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes a `[3, H, W]` (or `[1, 3, H, W]`) image as binary PPM.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        _ => return Err(Error::shape("write_ppm", s, &[3, 0, 0])),
    };
    let d = image.data();
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            buf.push(denormalize(d[ch * h * w + i]));
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn ppm_token<R: BufRead>(r: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        let c = byte[0] as char;
        if c == '#' {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(c);
    }
    if tok.is_empty() {
        return Err(Error::Dataset("truncated PPM header".into()));
    }
    Ok(tok)
}

/// Reads an 8-bit binary PPM (P6) into a `[3, H, W]` tensor.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let bad = |what: &str| Error::Dataset(format!("{}: {what}", path.display()));
    if ppm_token(&mut r)? != "P6" {
        return Err(bad("not a binary PPM"));
    }
    let w: usize = ppm_token(&mut r)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = ppm_token(&mut r)?.parse().map_err(|_| bad("bad height"))?;
    let max: usize = ppm_token(&mut r)?.parse().map_err(|_| bad("bad maxval"))?;
    if max != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let mut raw = vec![0u8; w * h * 3];
    r.read_exact(&mut raw).map_err(|_| bad("truncated pixel data"))?;
    Ok(interleaved_to_tensor(&raw, w, h, 3))
}

fn interleaved_to_tensor(raw: &[u8], w: usize, h: usize, channels: usize) -> Tensor {
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for ch in 0..3 {
            let src = if channels >= 3 { ch } else { 0 };
            data[ch * w * h + i] = normalize(raw[i * channels + src]);
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

/// Reads an 8-bit PNG (gray, gray+alpha, RGB or RGBA) into a `[3, H, W]` tensor.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let bad = |what: String| Error::Dataset(format!("{}: {what}", path.display()));
    let mut decoder = png::Decoder::new(fs::File::open(path)?);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| bad(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
    let channels = info.color_type.samples();
    let (w, h) = (info.width as usize, info.height as usize);
    Ok(interleaved_to_tensor(&buf[..w * h * channels], w, h, channels))
}

/// Box-filter (or nearest, when enlarging) resize of a `[3, H, W]` image to `size x size`.
pub fn resize(image: &Tensor, size: usize) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h == size && w == size {
        return image.clone();
    }
    let d = image.data();
    let mut out = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        for y in 0..size {
            let (y0, y1) = (y * h / size, ((y + 1) * h / size).max(y * h / size + 1));
            for x in 0..size {
                let (x0, x1) = (x * w / size, ((x + 1) * w / size).max(x * w / size + 1));
                let mut acc = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += d[ch * h * w + yy * w + xx];
                    }
                }
                out[ch * size * size + y * size + x] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
    Tensor::new(vec![3, size, size], out).expect("resized shape")
}

/// Loads every `.ppm` / `.png` file of `dir` (sorted by name), resized to
/// `size`. Unreadable files are skipped with a warning.
pub fn load_dir(dir: &Path, size: usize) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("ppm" | "png")
            )
        })
        .collect();
    paths.sort();
    let mut images = Vec::new();
    for p in paths {
        let loaded = match p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => read_png(&p),
            _ => read_ppm(&p),
        };
        match loaded {
            Ok(img) => images.push(resize(&img, size)),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no readable images in {}", dir.display())));
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        for v in [0u8, 1, 127, 128, 254, 255] {
            assert_eq!(denormalize(normalize(v)), v);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let a = synthetic(Family::Shapes, Split::Train, 4, 32, 5);
        let b = synthetic(Family::Shapes, Split::Train, 4, 32, 5);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
        let t = synthetic(Family::Shapes, Split::Test, 1, 32, 5);
        assert_ne!(a[0], t[0]);
        for img in a.iter().chain(&synthetic(Family::Textures, Split::Train, 4, 32, 5)) {
            assert_eq!(img.shape(), &[3, 32, 32]);
            assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = synthetic_image(Family::Textures, Split::Test, 3, 16, 1);
        let quantized = img.map(|v| normalize(denormalize(v)));
        write_ppm(&path, &quantized).unwrap();
        assert_eq!(read_ppm(&path).unwrap(), quantized);
    }

    #[test]
    fn load_dir_skips_bad_files_and_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dir(dir.path(), 8).is_err());
        fs::write(dir.path().join("bad.ppm"), b"P6\n").unwrap();
        write_ppm(&dir.path().join("ok.ppm"), &Tensor::zeros(&[3, 16, 16])).unwrap();
        let imgs = load_dir(dir.path(), 8).unwrap();
        assert_eq!(imgs.len(), 1);
        assert_eq!(imgs[0].shape(), &[3, 8, 8]);
    }
}
