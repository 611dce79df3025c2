//! Fusion quality and multi-label classification metrics, and per-directory
//! reports.

pub mod classification;
pub mod fusion;
pub mod phase;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classification::{classification_metrics, ClassificationMetrics, CLASSIFICATION_COLUMNS};
pub use fusion::{fmi_w, fusion_metrics, mi, nabf, ncie, psnr, qabf, ssim_metric, EdgeModel};
pub use phase::{pc_metric, PhaseConfig};

use crate::data_pipeline::load_gray;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::numerics::Tensor;

/// Fusion metric columns in report order.
pub const FUSION_COLUMNS: [&str; 8] = ["PC", "SSIM", "MI", "Q_abf", "PSNR", "FMI_w", "N_abf", "NCIE"];

/// Metrics where a smaller value is better.
pub const LOWER_IS_BETTER: [&str; 3] = ["N_abf", "HL", "RL"];

pub fn lower_is_better(column: &str) -> bool {
    LOWER_IS_BETTER.contains(&column)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub mi_bins: usize,
    pub ncie_bins: usize,
    pub fmi_bins: usize,
    pub psnr_sentinel: f64,
    pub ssim: LossConfig,
    pub edge: EdgeModel,
    pub phase: PhaseConfig,
    pub threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            mi_bins: 256,
            ncie_bins: 256,
            fmi_bins: 256,
            psnr_sentinel: 100.0,
            ssim: LossConfig::default(),
            edge: EdgeModel::default(),
            phase: PhaseConfig::default(),
            threshold: 0.5,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("mi_bins", self.mi_bins), ("ncie_bins", self.ncie_bins), ("fmi_bins", self.fmi_bins)] {
            if b < 2 {
                return Err(Error::invalid("metrics", format!("{name} = {b}, need ≥ 2")));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("metrics", format!("threshold {} outside [0, 1]", self.threshold)));
        }
        self.ssim.validate()
    }
}

/// Borrows a single-channel image given as `[H, W]` or `[1, H, W]`.
pub(crate) fn plane(x: &Tensor) -> Result<(usize, usize, &[f64])> {
    match *x.shape() {
        [h, w] | [1, h, w] if h > 0 && w > 0 => Ok((h, w, x.data())),
        _ => Err(Error::shape("metric", format!("expected one channel, got {:?}", x.shape()))),
    }
}

/// Per-image metric rows with their arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
    /// Column means; empty when there are no rows.
    pub mean: Vec<f64>,
}

impl MetricReport {
    pub fn new(columns: &[&str], rows: Vec<(String, Vec<f64>)>) -> Self {
        let mut mean = Vec::new();
        if !rows.is_empty() {
            mean = (0..columns.len())
                .map(|c| rows.iter().map(|r| r.1[c]).sum::<f64>() / rows.len() as f64)
                .collect();
        }
        MetricReport {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows,
            mean,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.1[c]).collect())
    }

    /// `stem,<columns>` header, one row per image, then a `MEAN` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        let mut header = vec!["stem".to_string()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let mut all: Vec<(&str, &[f64])> = self.rows.iter().map(|(s, v)| (s.as_str(), v.as_slice())).collect();
        if !self.is_empty() {
            all.push(("MEAN", &self.mean));
        }
        for (stem, values) in all {
            let mut rec = vec![stem.to_string()];
            rec.extend(values.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Metric(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("ascii"))
    }

    /// Parses the output of [`MetricReport::to_csv`]; the `MEAN` row is
    /// recomputed rather than trusted.
    pub fn from_csv(text: &str) -> Result<Self> {
        let csv_err = |e: csv::Error| Error::Metric(format!("csv: {e}"));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers().map_err(csv_err)?.clone();
        if header.get(0) != Some("stem") {
            return Err(Error::Metric("report csv must start with a `stem` column".into()));
        }
        let columns: Vec<&str> = header.iter().skip(1).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            let stem = rec.get(0).unwrap_or_default().to_string();
            if stem == "MEAN" {
                continue;
            }
            let values = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Metric(format!("`{v}` in row {stem}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            rows.push((stem, values));
        }
        Ok(MetricReport::new(&columns, rows))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Doc<'a> {
            columns: &'a [String],
            images: Vec<BTreeMap<&'a str, serde_json::Value>>,
            mean: BTreeMap<&'a str, f64>,
        }
        let images = self
            .rows
            .iter()
            .map(|(stem, v)| {
                let mut m: BTreeMap<&str, serde_json::Value> =
                    self.columns.iter().map(String::as_str).zip(v.iter().map(|&x| x.into())).collect();
                m.insert("stem", stem.as_str().into());
                m
            })
            .collect();
        let doc = Doc {
            columns: &self.columns,
            images,
            mean: self.columns.iter().map(String::as_str).zip(self.mean.iter().copied()).collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }

    /// Writes `<dir>/<name>.csv` and `<dir>/<name>.json`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, text) in [("csv", self.to_csv()?), ("json", self.to_json()?)] {
            let path = dir.join(format!("{name}.{ext}"));
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "bmp"];

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn counterpart(dir: &Path, stem: &str) -> Result<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::MissingCounterpart {
            stem: stem.to_string(),
            reason: format!("no png or bmp in {}", dir.display()),
        })
}

/// Evaluates every fused image in `fused_dir` against the same-stem sources.
/// A `_fused` suffix on fused stems is ignored when matching.
pub fn evaluate_directory(fused_dir: &Path, ir_dir: &Path, vi_dir: &Path, cfg: &MetricsConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for entry in fs::read_dir(fused_dir).map_err(|e| Error::io(fused_dir, e))? {
        let path = entry.map_err(|e| Error::io(fused_dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let stem = stem.strip_suffix("_fused").unwrap_or(stem).to_string();
        let ir = counterpart(ir_dir, &stem)?;
        let vi = counterpart(vi_dir, &stem)?;
        jobs.push((stem, path, ir, vi));
    }
    jobs.sort_by(|a, b| a.0.cmp(&b.0));
    if let Some(w) = jobs.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Metric(format!("two fused images share the stem `{}`", w[0].0)));
    }
    let rows = jobs
        .par_iter()
        .map(|(stem, f, ir, vi)| {
            let [f, ir, vi] = [f, ir, vi].map(|p| load_gray(p));
            let values = fusion_metrics(&f?, &ir?, &vi?, cfg).map_err(|e| Error::Dataset {
                id: stem.clone(),
                reason: e.to_string(),
            })?;
            Ok((stem.clone(), values.to_vec()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::new(&FUSION_COLUMNS, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_mean_and_csv_round_trip() {
        let r = MetricReport::new(&["A", "B"], vec![("x".into(), vec![1.0, 2.0]), ("y".into(), vec![3.0, 5.0])]);
        assert_eq!(r.mean, vec![2.0, 3.5]);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().last().unwrap(), "MEAN,2.000000,3.500000");
        assert_eq!(MetricReport::from_csv(&csv).unwrap(), r);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["mean"]["B"], 3.5);
        assert_eq!(json["images"][1]["stem"], "y");
    }

    #[test]
    fn empty_report_has_no_mean_row() {
        let r = MetricReport::new(&FUSION_COLUMNS, vec![]);
        assert!(r.is_empty());
        assert_eq!(r.to_csv().unwrap().lines().count(), 1);
    }

    #[test]
    fn plane_accepts_single_channel_only() {
        assert!(plane(&Tensor::zeros(&[1, 4, 4])).is_ok());
        assert!(plane(&Tensor::zeros(&[4, 4])).is_ok());
        assert!(plane(&Tensor::zeros(&[3, 4, 4])).is_err());
    }
}
