//! Result files: per-image CSVs, summaries, config snapshots and gnuplot scripts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::Result;

/// One scored reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub run_id: String,
    pub config_hash: String,
    pub variant: String,
    pub snr_db: f64,
    pub image_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
    pub failed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub snr_db: f64,
    pub samples: usize,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_mse: f64,
    pub failure_rate: f64,
    pub compression_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRow {
    pub run_id: String,
    pub variant: String,
    pub snr_db: f64,
    pub images: usize,
    pub seconds: f64,
    pub seconds_per_image: f64,
}

/// Means of `rows` per `(variant, snr)`, in first-seen order.
pub fn summarize(rows: &[SweepRow], compression_ratio: impl Fn(&str) -> f64) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !keys.iter().any(|(v, s)| *v == r.variant && *s == r.snr_db) {
            keys.push((r.variant.clone(), r.snr_db));
        }
    }
    keys.into_iter()
        .map(|(variant, snr)| {
            let sel: Vec<&SweepRow> = rows.iter().filter(|r| r.variant == variant && r.snr_db == snr).collect();
            let n = sel.len() as f64;
            SummaryRow {
                compression_ratio: compression_ratio(&variant),
                snr_db: snr,
                samples: sel.len(),
                mean_psnr_db: sel.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                mean_ssim: sel.iter().map(|r| r.ssim).sum::<f64>() / n,
                mean_mse: sel.iter().map(|r| r.mse).sum::<f64>() / n,
                failure_rate: sel.iter().filter(|r| r.failed).count() as f64 / n,
                variant,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.config.toml` holding the full configuration.
pub fn write_snapshot(dir: &Path, stem: &str, cfg: &ExperimentConfig) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.config.toml"));
    let text = format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml());
    fs::write(&path, text)?;
    Ok(path)
}

/// Gnuplot script drawing mean PSNR and SSIM against SNR, one line per variant,
/// from a summary CSV in the same directory.
pub fn gnuplot_script(summary_file: &str, variants: &[String], title: &str) -> String {
    let list = variants.join(" ");
    let mut s = String::new();
    s.push_str("set datafile separator ','\n");
    s.push_str("set terminal pngcairo size 1100,420\n");
    s.push_str(&format!("set output '{}.png'\n", summary_file.trim_end_matches(".csv")));
    s.push_str(&format!("variants = \"{list}\"\n"));
    s.push_str("set key bottom right\nset grid\nset xlabel 'SNR (dB)'\n");
    s.push_str(&format!("set multiplot layout 1,2 title '{title}'\n"));
    for (col, label) in [(4, "PSNR (dB)"), (5, "SSIM")] {
        s.push_str(&format!("set ylabel '{label}'\n"));
        s.push_str(&format!(
            "plot for [v in variants] '{summary_file}' every ::1 using \
             (strcol(1) eq v ? $2 : 1/0):{col} with linespoints title v\n"
        ));
    }
    s.push_str("unset multiplot\n");
    s
}

/// Writes `<stem>.csv`, `<stem>_summary.csv`, `<stem>.gp` and the config snapshot.
pub fn write_sweep(
    dir: &Path,
    stem: &str,
    cfg: &ExperimentConfig,
    rows: &[SweepRow],
    compression_ratio: impl Fn(&str) -> f64,
) -> Result<Vec<SummaryRow>> {
    write_csv(&dir.join(format!("{stem}.csv")), rows)?;
    let summary = summarize(rows, compression_ratio);
    let summary_file = format!("{stem}_summary.csv");
    write_csv(&dir.join(&summary_file), &summary)?;
    let mut variants: Vec<String> = Vec::new();
    for r in &summary {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    fs::write(dir.join(format!("{stem}.gp")), gnuplot_script(&summary_file, &variants, stem))?;
    write_snapshot(dir, stem, cfg)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, snr: f64, psnr: f64, failed: bool) -> SweepRow {
        SweepRow {
            run_id: "r".into(),
            config_hash: "h".into(),
            variant: variant.into(),
            snr_db: snr,
            image_index: 0,
            psnr_db: psnr,
            ssim: 0.5,
            mse: 0.1,
            failed,
        }
    }

    #[test]
    fn summary_groups_by_variant_and_snr() {
        let rows = vec![
            row("a", 1.0, 10.0, false),
            row("a", 1.0, 20.0, true),
            row("a", 5.0, 30.0, false),
            row("b", 1.0, 0.0, true),
        ];
        let s = summarize(&rows, |v| if v == "a" { 48.0 } else { 12.0 });
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].mean_psnr_db, 15.0);
        assert_eq!(s[0].failure_rate, 0.5);
        assert_eq!(s[0].samples, 2);
        assert_eq!(s[2].variant, "b");
        assert_eq!(s[2].compression_ratio, 12.0);
    }

    #[test]
    fn sweep_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        write_sweep(dir.path(), "evaluate", &cfg, &[row("semantic", 1.0, 9.0, false)], |_| 48.0).unwrap();
        let csv = fs::read_to_string(dir.path().join("evaluate.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "run_id,config_hash,variant,snr_db,image_index,psnr_db,ssim,mse,failed"
        );
        assert_eq!(lines.next().unwrap(), "r,h,semantic,1.0,0,9.0,0.5,0.1,false");
        let gp = fs::read_to_string(dir.path().join("evaluate.gp")).unwrap();
        assert!(gp.contains("evaluate_summary.csv"));
        let snap = fs::read_to_string(dir.path().join("evaluate.config.toml")).unwrap();
        assert!(snap.contains(&cfg.hash()));
    }
}
