//! Sensor records to normalized grid frames and training windows.

mod external;
mod grid;
mod normalize;
mod records;
mod window;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use external::{attach_external, embed_external, external_series};
pub use grid::{
    by_hour, fill_met_gaps, nearest_present, rasterize, Aggregation, BoundingBox, ChannelGroup,
    ChannelInfo, ChannelLayout, GridFrame, GridSpec, RasterReport,
};
pub use normalize::{normalize, ChannelStats, NormStats};
pub use records::{
    format_timestamp, keys, parse_timestamp, read_csv, write_csv, SensorKind, SensorRecord,
    Timestamp,
};
pub use window::{segments, split_train_test, window, SampleWindow, WindowSet};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Grid, channel layout and split used to turn a record stream into a
/// [`Dataset`]. This is the `spec.json` accepted by `gridcast rasterize`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub grid: GridSpec,
    pub layout: ChannelLayout,
    /// First test hour. Defaults to the hour two thirds into the stream.
    #[serde(default)]
    pub boundary: Option<Timestamp>,
}

impl RasterConfig {
    pub fn new(grid: GridSpec, external_areas: Vec<String>) -> Self {
        RasterConfig {
            grid,
            layout: ChannelLayout::new(external_areas),
            boundary: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub records: usize,
    pub outside_bbox: usize,
    pub external_records: usize,
    pub hours: usize,
    pub degenerate_channels: Vec<String>,
}

/// Normalized frames plus everything needed to window and denormalize them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub layout: ChannelLayout,
    pub hours: Vec<Timestamp>,
    /// One `[C, M, N]` tensor per hour.
    pub frames: Vec<Tensor<f32>>,
    /// One `[M, N]` station mask per hour.
    pub masks: Vec<Tensor<f32>>,
    pub stats: NormStats,
    /// Index of the first test hour.
    pub split: usize,
    pub report: BuildReport,
}

/// Runs the whole pipeline: rasterize every hour, fill meteorological gaps,
/// embed external areas, fit statistics on the training hours and normalize.
pub fn build_dataset(records: &[SensorRecord], config: &RasterConfig) -> Result<Dataset> {
    if records.is_empty() {
        return Err(Error::Config("no records".into()));
    }
    config.grid.validate()?;
    config.layout.validate()?;
    let grouped = by_hour(records);
    let hours: Vec<Timestamp> = grouped.keys().copied().collect();
    let rastered: Vec<(GridFrame, RasterReport)> = grouped
        .into_par_iter()
        .map(|(_, recs)| rasterize(&recs, &config.grid, &config.layout))
        .collect::<Result<_>>()?;
    let mut report = BuildReport {
        records: records.len(),
        hours: hours.len(),
        ..Default::default()
    };
    let mut frames = Vec::with_capacity(rastered.len());
    for (f, r) in rastered {
        report.outside_bbox += r.outside_bbox;
        report.external_records += r.external;
        frames.push(f);
    }
    fill_met_gaps(&mut frames, &config.layout)?;
    let series = external_series(
        records,
        &config.layout.external_areas,
        &config.layout.pollutant,
        &hours,
    );
    attach_external(&mut frames, &series, &config.grid, &config.layout);

    let boundary = config.boundary.unwrap_or(hours[hours.len() * 2 / 3]);
    let split = split_train_test(&hours, boundary)?;
    let stats = NormStats::fit(&frames[..split], &config.layout)?;
    normalize(&mut frames, &stats)?;
    report.degenerate_channels = stats
        .degenerate_channels()
        .into_iter()
        .map(String::from)
        .collect();
    let (frames, masks) = frames
        .into_iter()
        .map(|f| (f.channels, f.station_mask))
        .unzip();
    Ok(Dataset {
        grid: config.grid,
        layout: config.layout.clone(),
        hours,
        frames,
        masks,
        stats,
        split,
        report,
    })
}

/// `spec.json` inside a dataset bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleSpec {
    pub bbox: BoundingBox,
    #[serde(rename = "M")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub cols: usize,
    pub channels: Vec<ChannelInfo>,
    pub layout: ChannelLayout,
    pub hours: Vec<Timestamp>,
    pub split: usize,
    pub report: BuildReport,
}

pub const FRAMES_FILE: &str = "frames.gtsr";
pub const MASK_FILE: &str = "mask.gtsr";
pub const STATS_FILE: &str = "stats.json";
pub const SPEC_FILE: &str = "spec.json";

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{}: line {} column {}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}

pub(crate) fn write_gtsr(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor(&mut w, t).map_err(|e| Error::io(path, e))?;
    std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_gtsr(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(file))?
        .ok_or_else(|| Error::Integrity(format!("{}: empty GTSR file", path.display())))
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.layout.count()
    }

    pub fn len(&self) -> usize {
        self.hours.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hours.is_empty()
    }

    pub fn train_windows(&self, j: usize, k: usize, stride: usize) -> Result<WindowSet> {
        window(&self.hours, 0..self.split, j, k, stride)
    }

    pub fn test_windows(&self, j: usize, k: usize, stride: usize) -> Result<WindowSet> {
        window(&self.hours, self.split..self.len(), j, k, stride)
    }

    /// Input frames of a window restricted to `channels`, each `[C', M, N]`.
    pub fn inputs(&self, w: &SampleWindow, channels: &[usize]) -> Vec<Tensor<f32>> {
        let cells = self.grid.cells();
        w.inputs()
            .map(|t| {
                let src = self.frames[t].data();
                let mut data = Vec::with_capacity(channels.len() * cells);
                for &c in channels {
                    data.extend_from_slice(&src[c * cells..(c + 1) * cells]);
                }
                Tensor::from_parts(vec![channels.len(), self.grid.rows, self.grid.cols], data)
            })
            .collect()
    }

    /// Normalized pollutant targets `[K, M, N]`.
    pub fn targets(&self, w: &SampleWindow) -> Tensor<f32> {
        let cells = self.grid.cells();
        let data = w
            .targets()
            .flat_map(|t| self.frames[t].data()[..cells].iter().copied())
            .collect();
        Tensor::from_parts(vec![w.k, self.grid.rows, self.grid.cols], data)
    }

    /// Station masks of the target hours, `[K, M, N]`.
    pub fn target_mask(&self, w: &SampleWindow) -> Tensor<f32> {
        let data = w
            .targets()
            .flat_map(|t| self.masks[t].data().iter().copied())
            .collect();
        Tensor::from_parts(vec![w.k, self.grid.rows, self.grid.cols], data)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (m, n) = (self.grid.rows, self.grid.cols);
        let c = self.channels();
        let t = self.len();
        let frames = Tensor::from_parts(
            vec![t, c, m, n],
            self.frames.iter().flat_map(|f| f.data().iter().copied()).collect(),
        );
        let masks = Tensor::from_parts(
            vec![t, m, n],
            self.masks.iter().flat_map(|f| f.data().iter().copied()).collect(),
        );
        write_gtsr(&dir.join(FRAMES_FILE), &frames)?;
        write_gtsr(&dir.join(MASK_FILE), &masks)?;
        write_json(&dir.join(STATS_FILE), &self.stats)?;
        write_json(
            &dir.join(SPEC_FILE),
            &BundleSpec {
                bbox: self.grid.bbox,
                rows: m,
                cols: n,
                channels: self.layout.channels(),
                layout: self.layout.clone(),
                hours: self.hours.clone(),
                split: self.split,
                report: self.report.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!(
                "dataset bundle `{}` does not exist",
                dir.display()
            )));
        }
        let spec: BundleSpec = read_json(&dir.join(SPEC_FILE))?;
        let stats: NormStats = read_json(&dir.join(STATS_FILE))?;
        let grid = GridSpec::new(spec.bbox, spec.rows, spec.cols)?;
        let (m, n) = (spec.rows, spec.cols);
        let c = spec.layout.count();
        let t = spec.hours.len();
        let frames = read_gtsr(&dir.join(FRAMES_FILE))?;
        let masks = read_gtsr(&dir.join(MASK_FILE))?;
        if frames.shape() != [t, c, m, n] || masks.shape() != [t, m, n] || stats.channels.len() != c {
            return Err(Error::Integrity(format!(
                "bundle `{}` tensors {:?}/{:?} disagree with spec.json ({t}×{c}×{m}×{n})",
                dir.display(),
                frames.shape(),
                masks.shape()
            )));
        }
        let frames = frames
            .data()
            .chunks_exact(c * m * n)
            .map(|d| Tensor::from_parts(vec![c, m, n], d.to_vec()))
            .collect();
        let masks = masks
            .data()
            .chunks_exact(m * n)
            .map(|d| Tensor::from_parts(vec![m, n], d.to_vec()))
            .collect();
        Ok(Dataset {
            grid,
            layout: spec.layout,
            hours: spec.hours,
            frames,
            masks,
            stats,
            split: spec.split,
            report: spec.report,
        })
    }
}
