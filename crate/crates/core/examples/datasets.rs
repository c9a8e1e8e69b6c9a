//! Renders both synthetic families to PPM files and reads them back as a directory dataset.
//!
//! Usage: `cargo run --release --example datasets -- [out_dir] [count] [size]`

use std::path::PathBuf;

use semcom::dataset::{load_dir, synthetic, write_ppm, Family, Split};

fn main() -> semcom::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).map(String::as_str).unwrap_or("target/datasets"));
    let count: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let size: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    std::fs::create_dir_all(&dir)?;

    let mut written = Vec::new();
    for family in [Family::Shapes, Family::Textures] {
        for (i, img) in synthetic(family, Split::Test, count, size, 0).into_iter().enumerate() {
            write_ppm(&dir.join(format!("{}_{i:03}.ppm", family.name())), &img)?;
            written.push(img);
        }
    }
    let loaded = load_dir(&dir, size)?;
    println!("wrote {} images to {}, read back {}", written.len(), dir.display(), loaded.len());
    for (i, img) in loaded.iter().enumerate() {
        println!("  {i:2}: shape {:?} mean {:.3}", img.shape(), img.mean());
    }
    Ok(())
}
