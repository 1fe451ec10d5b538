//! Evaluation instruments: station-masked RMSE, leave-one-station-out
//! spRMSE and the per-step variance comparison, plus simple reference
//! predictors.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;
use crate::train::{Sample, Samples};

/// Anything mapping `J` input frames `[C, M, N]` to `[K, M, N]`.
pub trait Predictor: Sync {
    fn predict(&self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>>;
}

impl Predictor for Model<f32> {
    fn predict(&self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        Model::predict(self, inputs)
    }
}

/// Repeats the pollutant channel of the last input frame for every output
/// step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Persistence {
    pub k: usize,
}

impl Predictor for Persistence {
    fn predict(&self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let last = inputs
            .last()
            .ok_or_else(|| Error::Contract("persistence needs at least one input frame".into()))?;
        let plane = last.index0(0);
        let (m, n) = (plane.shape()[0], plane.shape()[1]);
        let data = (0..self.k).flat_map(|_| plane.data().iter().copied()).collect();
        Tensor::new(vec![self.k, m, n], data)
    }
}

/// Fills every cell of the last pollutant frame from its nearest nonzero
/// cell (Chebyshev rings, first hit in row-major order). Nonzero cells keep
/// their value. A one-step reference for leave-one-out checks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NearestFill;

impl Predictor for NearestFill {
    fn predict(&self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let last = inputs
            .last()
            .ok_or_else(|| Error::Contract("nearest fill needs at least one input frame".into()))?;
        let plane = last.index0(0);
        let (m, n) = (plane.shape()[0], plane.shape()[1]);
        let at = |i: usize, j: usize| plane.data()[i * n + j];
        let out = Tensor::from_fn(vec![1, m, n], |c| {
            let (i, j) = (c / n, c % n);
            if at(i, j) != 0.0 {
                return at(i, j);
            }
            for r in 1..m.max(n) {
                for a in i.saturating_sub(r)..=(i + r).min(m - 1) {
                    for b in j.saturating_sub(r)..=(j + r).min(n - 1) {
                        if a.abs_diff(i).max(b.abs_diff(j)) == r && at(a, b) != 0.0 {
                            return at(a, b);
                        }
                    }
                }
            }
            0.0
        });
        Ok(out)
    }
}

fn check_shapes(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("masked_rmse target", target.shape(), pred.shape()));
    }
    if pred.shape() != mask.shape() {
        return Err(Error::dim("masked_rmse mask", mask.shape(), pred.shape()));
    }
    Ok(())
}

/// Sum of squared masked errors and the number of masked entries.
pub fn masked_sse(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>) -> Result<(f64, usize)> {
    check_shapes(pred, target, mask)?;
    let mut sse = 0.0;
    let mut n = 0;
    for ((p, t), m) in pred.data().iter().zip(target.data()).zip(mask.data()) {
        if *m > 0.5 {
            let d = (*p as f64) - (*t as f64);
            sse += d * d;
            n += 1;
        }
    }
    Ok((sse, n))
}

/// Root mean squared error over masked entries, multiplied by `scale` (the
/// pollutant's normalization range, so the result is in physical units).
pub fn masked_rmse(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Tensor<f32>, scale: f64) -> Result<f64> {
    let (sse, n) = masked_sse(pred, target, mask)?;
    if n == 0 {
        return Err(Error::Contract("masked_rmse needs at least one masked cell".into()));
    }
    Ok(scale * (sse / n as f64).sqrt())
}

/// Test-set RMSE pooled over all windows, and per output step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseSummary {
    pub rmse: f64,
    pub per_step: Vec<f64>,
    pub windows: usize,
}

pub fn evaluate_rmse(predictor: &dyn Predictor, data: &dyn Samples, scale: f64) -> Result<RmseSummary> {
    if data.len() == 0 {
        return Err(Error::Contract("evaluation needs at least one window".into()));
    }
    let parts: Vec<Vec<(f64, usize)>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let s = data.get(i);
            let pred = predictor.predict(&s.inputs)?;
            check_shapes(&pred, &s.target, &s.mask)?;
            (0..s.target.shape()[0])
                .map(|k| masked_sse(&pred.index0(k), &s.target.index0(k), &s.mask.index0(k)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let k = parts[0].len();
    let mut per = vec![(0.0, 0usize); k];
    for p in &parts {
        for (acc, (sse, n)) in per.iter_mut().zip(p) {
            acc.0 += sse;
            acc.1 += n;
        }
    }
    let (sse, n) = per.iter().fold((0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    if n == 0 {
        return Err(Error::Contract("masked_rmse needs at least one masked cell".into()));
    }
    Ok(RmseSummary {
        rmse: scale * (sse / n as f64).sqrt(),
        per_step: per
            .iter()
            .map(|&(s, c)| if c > 0 { scale * (s / c as f64).sqrt() } else { f64::NAN })
            .collect(),
        windows: data.len(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpRmseOptions {
    /// Zero the station only in the last input frame instead of all `J`.
    pub last_frame_only: bool,
    /// Pollutant channel index within the input frames.
    pub channel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationError {
    pub row: usize,
    pub col: usize,
    pub rmse: f64,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpRmse {
    pub mean: f64,
    pub stations: Vec<StationError>,
}

/// Cells observed at any target step of any window, row-major.
pub fn station_cells(data: &dyn Samples) -> Vec<(usize, usize)> {
    let mut seen: Option<Vec<bool>> = None;
    let mut dims = (0, 0);
    for i in 0..data.len() {
        let mask = data.get(i).mask;
        let (k, m, n) = (mask.shape()[0], mask.shape()[1], mask.shape()[2]);
        dims = (m, n);
        let s = seen.get_or_insert_with(|| vec![false; m * n]);
        for step in 0..k {
            for c in 0..m * n {
                s[c] |= mask.data()[step * m * n + c] > 0.5;
            }
        }
    }
    let n = dims.1;
    seen.unwrap_or_default()
        .iter()
        .enumerate()
        .filter(|(_, on)| **on)
        .map(|(c, _)| (c / n, c % n))
        .collect()
}

/// Copy of `inputs` with the pollutant channel zeroed at `(row, col)`.
pub fn blank_station(inputs: &[Tensor<f32>], row: usize, col: usize, opts: SpRmseOptions) -> Vec<Tensor<f32>> {
    let first = if opts.last_frame_only { inputs.len().saturating_sub(1) } else { 0 };
    let mut out = inputs.to_vec();
    for x in &mut out[first..] {
        x.set(&[opts.channel, row, col], 0.0);
    }
    out
}

fn station_error(
    predictor: &dyn Predictor,
    samples: &[Sample],
    (row, col): (usize, usize),
    opts: SpRmseOptions,
    scale: f64,
) -> Result<Option<StationError>> {
    let mut sse = 0.0;
    let mut count = 0;
    let mut windows = 0;
    for s in samples {
        let k = s.mask.shape()[0];
        if !(0..k).any(|t| s.mask.get(&[t, row, col]) > 0.5) {
            continue;
        }
        let pred = predictor.predict(&blank_station(&s.inputs, row, col, opts))?;
        check_shapes(&pred, &s.target, &s.mask)?;
        for t in 0..k {
            if s.mask.get(&[t, row, col]) > 0.5 {
                let d = (pred.get(&[t, row, col]) - s.target.get(&[t, row, col])) as f64;
                sse += d * d;
                count += 1;
            }
        }
        windows += 1;
    }
    Ok((count > 0).then(|| StationError {
        row,
        col,
        rmse: scale * (sse / count as f64).sqrt(),
        windows,
    }))
}

/// Leave-one-station-out error. For every station cell, its pollutant input
/// is zeroed (other channels intact), the model is re-run on each window in
/// which that station is observed, and the RMSE at that cell is recorded.
/// The result is the mean of the per-station RMSEs. Stations are evaluated
/// in parallel.
pub fn sp_rmse(predictor: &dyn Predictor, data: &dyn Samples, opts: SpRmseOptions, scale: f64) -> Result<SpRmse> {
    let samples: Vec<Sample> = (0..data.len()).map(|i| data.get(i)).collect();
    let cells = station_cells(&samples);
    if cells.is_empty() {
        return Err(Error::Contract("sp_rmse needs at least one masked cell".into()));
    }
    let stations: Vec<StationError> = cells
        .par_iter()
        .map(|&c| station_error(predictor, &samples, c, opts, scale))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let mean = stations.iter().map(|s| s.rmse).sum::<f64>() / stations.len() as f64;
    Ok(SpRmse { mean, stations })
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    pub step: usize,
    pub var_pred: f64,
    pub var_actual: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VarianceSeries {
    pub points: Vec<VariancePoint>,
    /// Fewer steps than requested were available.
    pub truncated: bool,
}

impl VarianceSeries {
    /// `var_pred / var_actual` per step.
    pub fn ratios(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.var_pred / p.var_actual).collect()
    }
}

/// Per step: variance of all predicted cell values against the variance of
/// the actual values at masked cells. Frames are `[M, N]` (already in the
/// units the caller wants compared).
pub fn variance_diagnostic(
    pred: &[Tensor<f64>],
    actual: &[Tensor<f64>],
    mask: &[Tensor<f64>],
    steps: usize,
) -> Result<VarianceSeries> {
    if pred.len() != actual.len() || pred.len() != mask.len() {
        return Err(Error::dim("variance_diagnostic frames", &[actual.len(), mask.len()], &[pred.len()]));
    }
    let take = steps.min(pred.len());
    let points = (0..take)
        .map(|t| {
            if actual[t].shape() != mask[t].shape() {
                return Err(Error::dim("variance_diagnostic mask", mask[t].shape(), actual[t].shape()));
            }
            let stations: Vec<f64> = actual[t]
                .data()
                .iter()
                .zip(mask[t].data())
                .filter(|(_, m)| **m > 0.5)
                .map(|(v, _)| *v)
                .collect();
            Ok(VariancePoint {
                step: t,
                var_pred: variance(pred[t].data()),
                var_actual: variance(&stations),
            })
        })
        .collect::<Result<_>>()?;
    Ok(VarianceSeries {
        points,
        truncated: take < steps,
    })
}

/// Runs `predictor` on the first `steps` samples and compares the first
/// output step in physical units (`value · scale + offset`).
pub fn variance_of_predictions(
    predictor: &dyn Predictor,
    data: &dyn Samples,
    steps: usize,
    scale: f64,
    offset: f64,
) -> Result<VarianceSeries> {
    let take = steps.min(data.len());
    let phys = |t: &Tensor<f32>| t.index0(0).cast::<f64>().map(|v| v * scale + offset);
    let mut pred = Vec::with_capacity(take);
    let mut actual = Vec::with_capacity(take);
    let mut mask = Vec::with_capacity(take);
    for i in 0..take {
        let s = data.get(i);
        pred.push(phys(&predictor.predict(&s.inputs)?));
        actual.push(phys(&s.target));
        mask.push(s.mask.index0(0).cast::<f64>());
    }
    variance_diagnostic(&pred, &actual, &mask, steps)
}
