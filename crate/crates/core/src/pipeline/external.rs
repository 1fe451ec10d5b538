//! Regional pollution outside the grid, broadcast as constant channels.

use std::collections::BTreeMap;

use super::grid::{ChannelLayout, GridFrame, GridSpec};
use super::records::{SensorKind, SensorRecord, Timestamp};
use crate::tensor::Tensor;

/// Per-hour value of every area, aligned with `hours`. A missing area-hour
/// repeats the previous hour's value; a leading gap is 0.
pub fn external_series(
    records: &[SensorRecord],
    areas: &[String],
    pollutant: &str,
    hours: &[Timestamp],
) -> Vec<Vec<f64>> {
    let mut seen: BTreeMap<(&str, Timestamp), f64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == SensorKind::External) {
        if let Some(v) = r.value(pollutant) {
            seen.insert((r.station_id.as_str(), r.timestamp), v);
        }
    }
    let mut last = vec![0.0; areas.len()];
    hours
        .iter()
        .map(|t| {
            for (a, area) in areas.iter().enumerate() {
                if let Some(&v) = seen.get(&(area.as_str(), *t)) {
                    last[a] = v;
                }
            }
            last.clone()
        })
        .collect()
}

/// `[E, M, N]` tensor with one constant plane per area value.
pub fn embed_external(values: &[f64], spec: &GridSpec) -> Tensor<f32> {
    let cells = spec.cells();
    let data = values
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v as f32, cells))
        .collect();
    Tensor::from_parts(vec![values.len(), spec.rows, spec.cols], data)
}

/// Writes the external planes into each frame's external channels.
pub fn attach_external(frames: &mut [GridFrame], series: &[Vec<f64>], spec: &GridSpec, layout: &ChannelLayout) {
    let cells = spec.cells();
    let off = layout.external_offset() * cells;
    for (f, values) in frames.iter_mut().zip(series) {
        let planes = embed_external(values, spec);
        f.channels.data_mut()[off..off + planes.len()].copy_from_slice(planes.data());
    }
}
