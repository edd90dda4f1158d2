//! Run reports: JSON for machines, a CSV summary, PNG sample grids and the
//! alpha-sweep plot.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cvae::CvaeEpoch;
use crate::data::ImageSet;
use crate::distill::EpochMetrics;
use crate::error::{Error, Result};
use crate::teacher::QueryLedger;

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub mean: f64,
    pub std: f64,
    pub accuracies: Vec<f64>,
}

impl RegimeSummary {
    pub fn from_values(regime: impl Into<String>, accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self { regime: regime.into(), mean, std, accuracies }
    }
}

/// Everything recorded for one seed of the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub m1: usize,
    pub m2: usize,
    pub bundle_size: usize,
    pub ledger: QueryLedger,
    pub accuracies: BTreeMap<String, f64>,
    pub curves: Vec<EpochMetrics>,
    pub cvae_curve: Vec<CvaeEpoch>,
    pub artifacts: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub seeds: Vec<SeedRecord>,
    pub summary: Vec<RegimeSummary>,
}

impl RunReport {
    pub fn new(config: serde_json::Value, seeds: Vec<SeedRecord>) -> Self {
        let mut by_regime: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &seeds {
            for (r, a) in &s.accuracies {
                by_regime.entry(r.clone()).or_default().push(*a);
            }
        }
        let summary = by_regime.into_iter().map(|(r, v)| RegimeSummary::from_values(r, v)).collect();
        Self { config, seeds, summary }
    }

    pub fn regime(&self, id: &str) -> Option<&RegimeSummary> {
        self.summary.iter().find(|s| s.regime == id)
    }

    /// Writes `report.json`, `summary.csv` and `metrics.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("report.json"), self)?;
        write_summary_csv(&dir.join("summary.csv"), &self.summary)?;
        let rows: Vec<&EpochMetrics> = self.seeds.iter().flat_map(|s| &s.curves).collect();
        write_jsonl(&dir.join("metrics.jsonl"), &rows)
    }
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    create_parent(path)?;
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r).expect("row serializes")).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary_csv(path: &Path, rows: &[RegimeSummary]) -> Result<()> {
    create_parent(path)?;
    let csv_err = |e: csv::Error| Error::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["regime", "mean_acc", "std_acc", "runs"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.regime.clone(), format!("{:.6}", r.mean), format!("{:.6}", r.std), r.accuracies.len().to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Tiles up to `rows * cols` images into one 8-bit PNG (grayscale or RGB).
pub fn write_image_grid(images: &ImageSet, cols: usize, rows: usize, path: &Path) -> Result<()> {
    let (h, w, c) = images.image_shape();
    if c != 1 && c != 3 {
        return Err(Error::argument(format!("cannot render {c}-channel images")));
    }
    let cols = cols.max(1);
    let count = images.len().min(cols * rows.max(1));
    let grid_rows = count.div_ceil(cols).max(1);
    let (gw, gh) = (cols * (w + 1) + 1, grid_rows * (h + 1) + 1);
    let mut buf = vec![64u8; gw * gh * c];
    for i in 0..count {
        let (oy, ox) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        let px = images.pixels(i);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    buf[((oy + y) * gw + ox + x) * c + ch] = (px[(y * w + x) * c + ch] * 255.0).round() as u8;
                }
            }
        }
    }
    create_parent(path)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), gw as u32, gh as u32);
    enc.set_color(if c == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&buf).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Accuracy against alpha as an SVG line chart, with an optional horizontal
/// reference line.
pub fn plot_alpha_curve(points: &[(f64, f64)], reference: Option<(&str, f64)>, path: &Path) -> Result<()> {
    create_parent(path)?;
    let plot_err = |e: String| Error::Format { path: path.to_path_buf(), msg: e };
    let mut ys: Vec<f64> = points.iter().map(|p| p.1 * 100.0).collect();
    if let Some((_, r)) = reference {
        ys.push(r * 100.0);
    }
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min) - 1.0;
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let x_hi = points.iter().map(|p| p.0).fold(0.0, f64::max).max(0.05) * 1.1;
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .caption("test accuracy vs alpha", ("sans-serif", 18))
        .build_cartesian_2d(0.0..x_hi, lo..hi)
        .map_err(|e| plot_err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_desc("alpha")
        .y_desc("accuracy (%)")
        .draw()
        .map_err(|e| plot_err(e.to_string()))?;
    let series: Vec<(f64, f64)> = points.iter().map(|&(a, acc)| (a, acc * 100.0)).collect();
    chart
        .draw_series(LineSeries::new(series.clone(), &BLUE))
        .map_err(|e| plot_err(e.to_string()))?
        .label("fs_bbt");
    chart
        .draw_series(series.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(|e| plot_err(e.to_string()))?;
    if let Some((name, r)) = reference {
        chart
            .draw_series(LineSeries::new(vec![(0.0, r * 100.0), (x_hi, r * 100.0)], &RED))
            .map_err(|e| plot_err(e.to_string()))?
            .label(name.to_string());
    }
    root.present().map_err(|e| plot_err(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SourceTag;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_and_plot_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let data = ndarray::Array4::from_shape_fn((5, 3, 3, 1), |(i, y, x, _)| ((i + y + x) % 4) as f32 / 3.0);
        let set = ImageSet::new(data, SourceTag::Original).unwrap();
        let grid = dir.path().join("g.png");
        write_image_grid(&set, 4, 2, &grid).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(File::open(&grid).unwrap()));
        let info = decoder.read_info().unwrap();
        assert_eq!((info.info().width, info.info().height), (17, 9));
        let svg = dir.path().join("a.svg");
        plot_alpha_curve(&[(0.05, 0.98), (0.1, 0.975)], Some(("standard_kd", 0.96)), &svg).unwrap();
        assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
    }
}
