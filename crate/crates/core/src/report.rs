//! Evaluation report JSON, loss-curve CSV and heatmap exports.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{StationError, VariancePoint};
use crate::models::ModelConfig;
use crate::tensor::Tensor;
use crate::train::{LossCurve, TrainConfig};

pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub version: u32,
    /// Registry name, when produced by an experiment.
    pub experiment: Option<String>,
    pub arch: String,
    #[serde(rename = "K")]
    pub k: usize,
    /// Input channel names in model order.
    pub channels: Vec<String>,
    /// Masked test RMSE in pollutant units.
    pub rmse: f64,
    pub per_step_rmse: Vec<f64>,
    /// Last-frame persistence RMSE on the same windows.
    pub persistence_rmse: f64,
    pub sp_rmse: Option<f64>,
    #[serde(default)]
    pub sp_rmse_stations: Vec<StationError>,
    #[serde(default)]
    pub variance_series: Vec<VariancePoint>,
    #[serde(default)]
    pub variance_truncated: bool,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub train_windows: usize,
    pub test_windows: usize,
    /// Objective at the last training step.
    pub final_loss: Option<f64>,
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(self.rmse) || self.sp_rmse.is_some_and(|v| !nonneg(v)) {
            return Err(Error::Integrity("report RMSE values must be finite and >= 0".into()));
        }
        if self
            .variance_series
            .iter()
            .any(|p| !nonneg(p.var_pred) || !nonneg(p.var_actual))
        {
            return Err(Error::Integrity("report variances must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: EvalReport = crate::pipeline::read_json(path)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Integrity(format!(
                "{}: report version {} (expected {REPORT_VERSION})",
                path.display(),
                r.version
            )));
        }
        Ok(r)
    }
}

pub fn write_loss_curve(path: &Path, curve: &LossCurve) -> Result<()> {
    std::fs::write(path, curve.to_csv()).map_err(|e| Error::io(path, e))
}

/// Binary PGM (P5, maxval 255) of an `[M, N]` field in normalized units,
/// each pixel `clamp(v · 255)`.
pub fn heatmap_pgm(field: &Tensor<f32>) -> Result<Vec<u8>> {
    let (m, n) = plane_dims(field)?;
    let mut out = format!("P5\n{n} {m}\n255\n").into_bytes();
    out.extend(field.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Row-per-grid-row CSV of an `[M, N]` field.
pub fn heatmap_csv(field: &Tensor<f32>) -> Result<String> {
    let (_, n) = plane_dims(field)?;
    let mut s = String::new();
    for row in field.data().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

fn plane_dims(field: &Tensor<f32>) -> Result<(usize, usize)> {
    match field.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(Error::dim("heatmap", s, &[0, 0])),
    }
}

/// Writes `<stem>.pgm` and `<stem>.csv` into `dir`.
pub fn export_heatmap(dir: &Path, stem: &str, field: &Tensor<f32>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pgm = dir.join(format!("{stem}.pgm"));
    std::fs::write(&pgm, heatmap_pgm(field)?).map_err(|e| Error::io(&pgm, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    std::fs::write(&csv, heatmap_csv(field)?).map_err(|e| Error::io(&csv, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_clamping() {
        let f = Tensor::new(vec![1, 3], vec![-0.5, 0.5, 2.0]).unwrap();
        let bytes = heatmap_pgm(&f).unwrap();
        let header = b"P5\n3 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255]);
    }

    #[test]
    fn csv_rows() {
        let f = Tensor::new(vec![2, 2], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(heatmap_csv(&f).unwrap(), "0.000000,0.250000\n0.500000,1.000000\n");
    }
}
