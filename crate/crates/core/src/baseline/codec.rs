//! Block-DCT image codec: 8x8 orthonormal DCT, quality-scaled uniform
//! quantization, zigzag run-length coding and fixed Huffman tables (the
//! standard JPEG luminance tables, used for every channel).
//!
//! Stream layout (big-endian):
//!
//! ```text
//! magic "BDCT" | width u16 | height u16 | channels u8 | quality u8 |
//! body_bits u32 | crc32(previous 14 bytes) u32 | body bytes
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BDCT";
pub const HEADER_LEN: usize = 18;

const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const BASE_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113,
    92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const DC_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const DC_VALUES: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const AC_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
const AC_VALUES: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
    0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5,
    0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

/// Encoded image: parsed header plus entropy-coded body.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecStream {
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    pub quality: u8,
    pub body_bits: u32,
    pub body: Vec<u8>,
}

impl CodecStream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.width.to_be_bytes());
        out.extend_from_slice(&self.height.to_be_bytes());
        out.push(self.channels);
        out.push(self.quality);
        out.extend_from_slice(&self.body_bits.to_be_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Parses a stream. Trailing bytes beyond the declared body are ignored
    /// (transport padding); a short body or damaged header is a failure.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode("stream shorter than header".into()));
        }
        let h = &bytes[..HEADER_LEN];
        if &h[..4] != MAGIC {
            return Err(Error::Decode("bad magic".into()));
        }
        let crc = u32::from_be_bytes([h[14], h[15], h[16], h[17]]);
        if crc32fast::hash(&h[..14]) != crc {
            return Err(Error::Decode("header checksum mismatch".into()));
        }
        let width = u16::from_be_bytes([h[4], h[5]]);
        let height = u16::from_be_bytes([h[6], h[7]]);
        let channels = h[8];
        let quality = h[9];
        let body_bits = u32::from_be_bytes([h[10], h[11], h[12], h[13]]);
        let body_len = (body_bits as usize).div_ceil(8);
        if bytes.len() < HEADER_LEN + body_len {
            return Err(Error::Decode(format!(
                "body holds {} bytes, header declares {body_len}",
                bytes.len() - HEADER_LEN
            )));
        }
        if width % 8 != 0 || height % 8 != 0 || channels == 0 || !(1..=100).contains(&quality) {
            return Err(Error::Decode("invalid header fields".into()));
        }
        Ok(CodecStream {
            width,
            height,
            channels,
            quality,
            body_bits,
            body: bytes[HEADER_LEN..HEADER_LEN + body_len].to_vec(),
        })
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.body.len()
    }
}

/// Quantization table for a 1..=100 quality level (100 gives all ones).
pub fn quant_table(quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut t = [1.0; 64];
    for (o, &b) in t.iter_mut().zip(&BASE_QUANT) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    t
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let a = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

fn fdct(block: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|y| c[u][y] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            out[u * 8 + v] = (0..8).map(|x| c[v][x] * tmp[u * 8 + x]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u * 8 + x] = (0..8).map(|v| c[v][x] * coef[u * 8 + v]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| c[u][y] * tmp[u * 8 + x]).sum();
        }
    }
    out
}

struct Huffman {
    /// (code, length) per symbol value.
    encode: [(u16, u8); 256],
    /// Per code length: (first code, last code, index of first value).
    ranges: [(i32, i32, usize); 17],
    values: Vec<u8>,
}

impl Huffman {
    fn new(bits: &[u8; 16], values: &[u8]) -> Self {
        let mut encode = [(0u16, 0u8); 256];
        let mut ranges = [(0i32, -1i32, 0usize); 17];
        let mut code = 0i32;
        let mut k = 0usize;
        for len in 1..=16 {
            let count = bits[len - 1] as usize;
            ranges[len] = (code, code + count as i32 - 1, k);
            for _ in 0..count {
                encode[values[k] as usize] = (code as u16, len as u8);
                code += 1;
                k += 1;
            }
            code <<= 1;
        }
        Huffman {
            encode,
            ranges,
            values: values.to_vec(),
        }
    }

    fn write(&self, w: &mut BitWriter, symbol: u8) {
        let (code, len) = self.encode[symbol as usize];
        debug_assert!(len > 0, "symbol {symbol:#x} missing from table");
        w.put(code as u32, len);
    }

    fn read(&self, r: &mut BitReader<'_>) -> Result<u8> {
        let mut code = 0i32;
        for len in 1..=16 {
            code = (code << 1) | r.bit()? as i32;
            let (first, last, idx) = self.ranges[len];
            if last >= first && code <= last && code >= first {
                return Ok(self.values[idx + (code - first) as usize]);
            }
        }
        Err(Error::Decode("invalid Huffman code".into()))
    }
}

struct BitWriter {
    bytes: Vec<u8>,
    acc: u32,
    n: u8,
    total: u64,
}

impl BitWriter {
    fn new() -> Self {
        BitWriter {
            bytes: Vec::new(),
            acc: 0,
            n: 0,
            total: 0,
        }
    }

    fn put(&mut self, value: u32, len: u8) {
        for i in (0..len).rev() {
            self.acc = (self.acc << 1) | ((value >> i) & 1);
            self.n += 1;
            if self.n == 8 {
                self.bytes.push(self.acc as u8);
                self.acc = 0;
                self.n = 0;
            }
        }
        self.total += len as u64;
    }

    fn finish(mut self) -> (Vec<u8>, u64) {
        if self.n > 0 {
            self.bytes.push((self.acc << (8 - self.n)) as u8);
        }
        (self.bytes, self.total)
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: u64,
    limit: u64,
}

impl BitReader<'_> {
    fn bit(&mut self) -> Result<u8> {
        if self.pos >= self.limit {
            return Err(Error::Decode("ran out of body bits".into()));
        }
        let b = (self.bytes[(self.pos / 8) as usize] >> (7 - self.pos % 8)) & 1;
        self.pos += 1;
        Ok(b)
    }

    fn bits(&mut self, len: u8) -> Result<u32> {
        let mut v = 0;
        for _ in 0..len {
            v = (v << 1) | self.bit()? as u32;
        }
        Ok(v)
    }
}

fn magnitude_category(v: i32) -> u8 {
    (32 - v.unsigned_abs().leading_zeros()) as u8
}

fn write_value(w: &mut BitWriter, v: i32, size: u8) {
    let bits = if v < 0 { (v - 1) as u32 } else { v as u32 };
    w.put(bits & ((1u32 << size) - 1), size);
}

fn read_value(r: &mut BitReader<'_>, size: u8) -> Result<i32> {
    if size == 0 {
        return Ok(0);
    }
    let raw = r.bits(size)? as i32;
    Ok(if raw < 1 << (size - 1) {
        raw - (1 << size) + 1
    } else {
        raw
    })
}

/// Converts a `[C, H, W]` or `[1, C, H, W]` tensor in `[-1, 1]` to 8-bit levels.
pub fn to_levels(image: &Tensor) -> Vec<u8> {
    image
        .data()
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
        .collect()
}

pub fn from_levels(levels: &[u8]) -> Vec<f64> {
    levels.iter().map(|&v| v as f64 / 127.5 - 1.0).collect()
}

/// Encodes an image tensor (`[C, H, W]` or `[1, C, H, W]`, values in `[-1, 1]`).
pub fn encode(image: &Tensor, quality: u8) -> Result<CodecStream> {
    let s = image.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::shape("dct_codec_encode", s, &[3, 0, 0])),
    };
    if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::invalid(format!("image sides must be multiples of 8, got {h}x{w}")));
    }
    if !(1..=100).contains(&quality) || c == 0 || c > 255 {
        return Err(Error::invalid(format!("quality {quality} / channels {c} out of range")));
    }
    let levels = to_levels(image);
    let q = quant_table(quality);
    let basis = dct_basis();
    let dc = Huffman::new(&DC_BITS, &DC_VALUES);
    let ac = Huffman::new(&AC_BITS, &AC_VALUES);
    let mut wr = BitWriter::new();
    for ch in 0..c {
        let plane = &levels[ch * h * w..(ch + 1) * h * w];
        let mut prev_dc = 0i32;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        block[y * 8 + x] = plane[(by + y) * w + bx + x] as f64 - 128.0;
                    }
                }
                let coef = fdct(&block, &basis);
                let quantized: Vec<i32> = (0..64).map(|i| (coef[i] / q[i]).round() as i32).collect();
                let diff = quantized[0] - prev_dc;
                prev_dc = quantized[0];
                let size = magnitude_category(diff);
                dc.write(&mut wr, size);
                write_value(&mut wr, diff, size);
                let mut run = 0u8;
                for &zi in &ZIGZAG[1..] {
                    let v = quantized[zi];
                    if v == 0 {
                        run += 1;
                        continue;
                    }
                    while run > 15 {
                        ac.write(&mut wr, 0xf0);
                        run -= 16;
                    }
                    let size = magnitude_category(v);
                    ac.write(&mut wr, (run << 4) | size);
                    write_value(&mut wr, v, size);
                    run = 0;
                }
                if run > 0 {
                    ac.write(&mut wr, 0x00);
                }
            }
        }
    }
    let (body, bits) = wr.finish();
    Ok(CodecStream {
        width: w as u16,
        height: h as u16,
        channels: c as u8,
        quality,
        body_bits: bits as u32,
        body,
    })
}

/// Decodes a stream into a `[1, C, H, W]` tensor in `[-1, 1]`.
pub fn decode(stream: &CodecStream) -> Result<Tensor> {
    let (w, h, c) = (stream.width as usize, stream.height as usize, stream.channels as usize);
    if (stream.body_bits as usize).div_ceil(8) > stream.body.len() {
        return Err(Error::Decode("body shorter than declared bit length".into()));
    }
    let q = quant_table(stream.quality);
    let basis = dct_basis();
    let dc = Huffman::new(&DC_BITS, &DC_VALUES);
    let ac = Huffman::new(&AC_BITS, &AC_VALUES);
    let mut rd = BitReader {
        bytes: &stream.body,
        pos: 0,
        limit: stream.body_bits as u64,
    };
    let mut levels = vec![0u8; c * h * w];
    for ch in 0..c {
        let mut prev_dc = 0i32;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut quantized = [0i32; 64];
                let size = dc.read(&mut rd)?;
                if size > 11 {
                    return Err(Error::Decode("DC category out of range".into()));
                }
                prev_dc += read_value(&mut rd, size)?;
                quantized[0] = prev_dc;
                let mut k = 1;
                while k < 64 {
                    let sym = ac.read(&mut rd)?;
                    if sym == 0x00 {
                        break;
                    }
                    let run = (sym >> 4) as usize;
                    let size = sym & 0x0f;
                    k += run;
                    if k >= 64 {
                        return Err(Error::Decode("AC run past end of block".into()));
                    }
                    if size > 0 {
                        quantized[ZIGZAG[k]] = read_value(&mut rd, size)?;
                    }
                    k += 1;
                }
                let mut coef = [0.0; 64];
                for i in 0..64 {
                    coef[i] = quantized[i] as f64 * q[i];
                }
                let px = idct(&coef, &basis);
                for y in 0..8 {
                    for x in 0..8 {
                        let v = (px[y * 8 + x] + 128.0).round().clamp(0.0, 255.0);
                        levels[ch * h * w + (by + y) * w + bx + x] = v as u8;
                    }
                }
            }
        }
    }
    Tensor::new(vec![1, c, h, w], from_levels(&levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn smooth_image(c: usize, h: usize, w: usize) -> Tensor {
        let mut d = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = ((x as f64 * 0.2 + ch as f64).sin() * 0.5 + (y as f64 * 0.15).cos() * 0.4) * 0.9;
                    d.push(v);
                }
            }
        }
        Tensor::new(vec![1, c, h, w], d).unwrap()
    }

    #[test]
    fn huffman_tables_are_complete_prefix_codes() {
        for (bits, values) in [(&DC_BITS, &DC_VALUES[..]), (&AC_BITS, &AC_VALUES[..])] {
            let count: usize = bits.iter().map(|&b| b as usize).sum();
            assert_eq!(count, values.len());
            let kraft: f64 = bits
                .iter()
                .enumerate()
                .map(|(i, &b)| b as f64 / 2f64.powi(i as i32 + 1))
                .sum();
            assert!(kraft < 1.0);
        }
    }

    #[test]
    fn dct_is_orthonormal() {
        let c = dct_basis();
        let block: [f64; 64] = std::array::from_fn(|i| (i as f64 * 1.7).sin() * 100.0);
        let back = idct(&fdct(&block, &c), &c);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn value_coding_round_trips() {
        for v in [-2047, -1024, -3, -1, 1, 2, 7, 1023, 2047] {
            let size = magnitude_category(v);
            let mut w = BitWriter::new();
            write_value(&mut w, v, size);
            let (bytes, bits) = w.finish();
            let mut r = BitReader {
                bytes: &bytes,
                pos: 0,
                limit: bits,
            };
            assert_eq!(read_value(&mut r, size).unwrap(), v);
        }
    }

    #[test]
    fn highest_quality_is_near_lossless() {
        let img = smooth_image(3, 32, 32);
        let stream = encode(&img, 100).unwrap();
        let out = decode(&stream).unwrap();
        assert_eq!(out.shape(), img.shape());
        let a: Vec<f64> = to_levels(&img).iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = to_levels(&out).iter().map(|&v| v as f64).collect();
        assert!(psnr(&a, &b, 255.0).unwrap() > 35.0);
    }

    #[test]
    fn constant_image_compresses_well() {
        let img = Tensor::full(&[1, 3, 32, 32], 0.25);
        let stream = encode(&img, 75).unwrap();
        let raw = 3 * 32 * 32;
        assert!((stream.total_bytes() as f64) < 0.05 * raw as f64, "{}", stream.total_bytes());
    }

    #[test]
    fn deterministic_and_header_checked() {
        let img = smooth_image(3, 16, 24);
        let a = encode(&img, 50).unwrap().to_bytes();
        let b = encode(&img, 50).unwrap().to_bytes();
        assert_eq!(a, b);
        let parsed = CodecStream::from_bytes(&a).unwrap();
        assert_eq!(parsed.to_bytes(), a);
        let mut bad = a.clone();
        bad[5] ^= 0x01;
        assert!(matches!(CodecStream::from_bytes(&bad), Err(Error::Decode(_))));
        assert!(CodecStream::from_bytes(&a[..a.len() - 1]).is_err());
    }

    #[test]
    fn rejects_unaligned_images() {
        let img = Tensor::zeros(&[1, 3, 12, 16]);
        assert!(encode(&img, 50).is_err());
    }
}
