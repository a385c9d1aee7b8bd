//! Folder-level evaluation report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mse, niqe, ssim, NiqeModel};
use crate::checkpoint::write_atomic;
use crate::dataset::png_names;
use crate::error::{Error, Result};
use crate::imaging::{load_image, ImageTensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub mse: f64,
    pub ssim: f64,
    pub niqe_pred: f64,
    pub niqe_gt: f64,
    /// `niqe_pred / niqe_gt`.
    pub niqe_ratio: f64,
}

impl ImageMetrics {
    pub fn compute(pred: &ImageTensor<f64>, gt: &ImageTensor<f64>, model: &NiqeModel) -> Result<Self> {
        let niqe_pred = niqe(pred, model)?;
        let niqe_gt = niqe(gt, model)?;
        if niqe_gt <= 0.0 {
            return Err(Error::Precondition("ground-truth NIQE is zero; ratio undefined".into()));
        }
        Ok(Self {
            mse: mse(pred, gt)?,
            ssim: ssim(pred, gt)?,
            niqe_pred,
            niqe_gt,
            niqe_ratio: niqe_pred / niqe_gt,
        })
    }

    fn fields(&self) -> [f64; 5] {
        [self.mse, self.ssim, self.niqe_pred, self.niqe_gt, self.niqe_ratio]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub filename: String,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

/// Per-image rows (sorted by file name) plus their arithmetic means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub mean: ImageMetrics,
}

impl MetricReport {
    pub const CSV_HEADER: [&'static str; 6] = ["filename", "mse", "ssim", "niqe_pred", "niqe_gt", "niqe_ratio"];

    pub fn from_rows(rows: Vec<MetricRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config("no images to evaluate".into()));
        }
        let n = rows.len() as f64;
        let mut sums = [0.0; 5];
        for r in &rows {
            for (s, v) in sums.iter_mut().zip(r.metrics.fields()) {
                *s += v;
            }
        }
        let [mse, ssim, niqe_pred, niqe_gt, niqe_ratio] = sums.map(|s| s / n);
        Ok(Self {
            rows,
            mean: ImageMetrics {
                mse,
                ssim,
                niqe_pred,
                niqe_gt,
                niqe_ratio,
            },
        })
    }

    /// Per-image rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).expect("in-memory write");
        let rows = self.rows.iter().map(|r| (r.filename.as_str(), &r.metrics));
        for (name, m) in rows.chain(std::iter::once(("mean", &self.mean))) {
            let mut rec = vec![name.to_string()];
            rec.extend(m.fields().iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compares every `pred_dir/<name>.png` with `gt_dir/<name>.png`.
/// Any name present in only one folder is an error listing the orphans.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, model: &NiqeModel) -> Result<MetricReport> {
    let pred = png_names(pred_dir)?;
    let gt = png_names(gt_dir)?;
    let orphans: Vec<String> = pred
        .iter()
        .filter(|n| gt.binary_search(n).is_err())
        .map(|n| format!("{} (prediction only)", n))
        .chain(
            gt.iter()
                .filter(|n| pred.binary_search(n).is_err())
                .map(|n| format!("{} (ground truth only)", n)),
        )
        .collect();
    if !orphans.is_empty() {
        return Err(Error::Config(format!("unmatched file names: {}", orphans.join(", "))));
    }
    if pred.is_empty() {
        return Err(Error::Config(format!(
            "no PNG images shared by {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let mut rows = Vec::with_capacity(pred.len());
    for name in pred {
        let p: ImageTensor<f64> = load_image(pred_dir.join(&name))?;
        let g: ImageTensor<f64> = load_image(gt_dir.join(&name))?;
        let metrics = ImageMetrics::compute(&p, &g, model)
            .map_err(|e| match e {
                Error::Precondition(msg) => Error::Precondition(format!("{name}: {msg}")),
                other => other,
            })?;
        rows.push(MetricRow { filename: name, metrics });
    }
    MetricReport::from_rows(rows)
}

/// Writes `<stem>.csv` and `<stem>.json` atomically.
pub fn write_report(report: &MetricReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    write_atomic(csv_path, report.to_csv().as_bytes())?;
    write_atomic(json_path, report.to_json().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, v: f64) -> MetricRow {
        MetricRow {
            filename: name.into(),
            metrics: ImageMetrics {
                mse: v,
                ssim: 1.0 - v,
                niqe_pred: 2.0 + v,
                niqe_gt: 2.0,
                niqe_ratio: (2.0 + v) / 2.0,
            },
        }
    }

    #[test]
    fn mean_row_is_mean_of_rows() {
        let r = MetricReport::from_rows(vec![row("a.png", 0.1), row("b.png", 0.2), row("c.png", 0.6)]).unwrap();
        assert!((r.mean.mse - 0.3).abs() < 1e-12);
        assert!((r.mean.niqe_ratio - 1.15).abs() < 1e-12);
        let csv = r.to_csv();
        assert!(csv.starts_with("filename,mse,ssim,niqe_pred,niqe_gt,niqe_ratio\n"));
        assert_eq!(csv.lines().count(), 5);
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(MetricReport::from_rows(vec![]).is_err());
    }
}
