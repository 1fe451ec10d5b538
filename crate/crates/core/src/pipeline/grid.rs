//! Grid geometry, channel layout, rasterization and meteorological gap filling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::records::{keys, SensorKind, SensorRecord, Timestamp};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl BoundingBox {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        (self.lat_min..=self.lat_max).contains(&lat) && (self.lon_min..=self.lon_max).contains(&lon)
    }
}

/// Plate-carrée grid over a bounding box. Row 0 is the northern edge,
/// column 0 the western edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bbox: BoundingBox,
    pub rows: usize,
    pub cols: usize,
}

impl GridSpec {
    pub fn new(bbox: BoundingBox, rows: usize, cols: usize) -> Result<Self> {
        let spec = GridSpec { bbox, rows, cols };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs at least one row and column".into()));
        }
        let b = &self.bbox;
        if !(b.lat_max > b.lat_min && b.lon_max > b.lon_min) {
            return Err(Error::Config(format!("degenerate bounding box {b:?}")));
        }
        Ok(())
    }

    /// Cell `(row, col)` holding a coordinate, `None` outside the box.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        let b = &self.bbox;
        if !b.contains(lat, lon) {
            return None;
        }
        let fr = (b.lat_max - lat) / (b.lat_max - b.lat_min);
        let fc = (lon - b.lon_min) / (b.lon_max - b.lon_min);
        let r = ((fr * self.rows as f64) as usize).min(self.rows - 1);
        let c = ((fc * self.cols as f64) as usize).min(self.cols - 1);
        Some((r, c))
    }

    /// Coordinate of a cell centre.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        let b = &self.bbox;
        let lat = b.lat_max - (row as f64 + 0.5) / self.rows as f64 * (b.lat_max - b.lat_min);
        let lon = b.lon_min + (col as f64 + 0.5) / self.cols as f64 * (b.lon_max - b.lon_min);
        (lat, lon)
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelGroup {
    Pollution,
    Met,
    Wind,
    Traffic,
    Speed,
    External,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

const COMPASS_8: [&str; 8] = ["N", "NE", "E", "SE", "S", "SW", "W", "NW"];
const COMPASS_16: [&str; 16] = [
    "N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE", "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW",
];

/// Channel order: `[pollutant | met numeric | wind one-hot | traffic | speed | external]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelLayout {
    pub pollutant: String,
    pub met_keys: Vec<String>,
    pub wind_bins: usize,
    pub external_areas: Vec<String>,
    #[serde(default)]
    pub traffic_aggregation: Aggregation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub group: ChannelGroup,
}

impl ChannelLayout {
    pub fn new(external_areas: Vec<String>) -> Self {
        ChannelLayout {
            pollutant: keys::PM25.into(),
            met_keys: keys::MET_NUMERIC.iter().map(|s| s.to_string()).collect(),
            wind_bins: 8,
            external_areas,
            traffic_aggregation: Aggregation::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wind_bins != 8 && self.wind_bins != 16 {
            return Err(Error::Config(format!(
                "wind_bins must be 8 or 16, got {}",
                self.wind_bins
            )));
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        1 + self.met_keys.len() + self.wind_bins + 2 + self.external_areas.len()
    }

    pub fn met_offset(&self) -> usize {
        1
    }

    pub fn wind_offset(&self) -> usize {
        1 + self.met_keys.len()
    }

    pub fn traffic_offset(&self) -> usize {
        self.wind_offset() + self.wind_bins
    }

    pub fn speed_offset(&self) -> usize {
        self.traffic_offset() + 1
    }

    pub fn external_offset(&self) -> usize {
        self.speed_offset() + 1
    }

    pub fn wind_names(&self) -> &'static [&'static str] {
        if self.wind_bins == 16 {
            &COMPASS_16
        } else {
            &COMPASS_8
        }
    }

    /// Compass bin of a bearing in degrees.
    pub fn wind_bin(&self, degrees: f64) -> usize {
        let width = 360.0 / self.wind_bins as f64;
        ((degrees.rem_euclid(360.0) / width).round() as usize) % self.wind_bins
    }

    pub fn channels(&self) -> Vec<ChannelInfo> {
        let mut out = vec![ChannelInfo {
            name: self.pollutant.clone(),
            group: ChannelGroup::Pollution,
        }];
        out.extend(self.met_keys.iter().map(|k| ChannelInfo {
            name: format!("met:{k}"),
            group: ChannelGroup::Met,
        }));
        out.extend(self.wind_names().iter().map(|d| ChannelInfo {
            name: format!("wind:{d}"),
            group: ChannelGroup::Wind,
        }));
        out.push(ChannelInfo {
            name: "traffic".into(),
            group: ChannelGroup::Traffic,
        });
        out.push(ChannelInfo {
            name: "speed".into(),
            group: ChannelGroup::Speed,
        });
        out.extend(self.external_areas.iter().map(|a| ChannelInfo {
            name: format!("ext:{a}"),
            group: ChannelGroup::External,
        }));
        out
    }

    /// Indices of the channels in `groups`, pollutant always first.
    pub fn select(&self, groups: &[ChannelGroup]) -> Vec<usize> {
        self.channels()
            .iter()
            .enumerate()
            .filter(|(i, c)| *i == 0 || groups.contains(&c.group))
            .map(|(i, _)| i)
            .collect()
    }

    /// Meteorological presence slots: one per numeric key plus one for wind.
    pub fn met_slots(&self) -> usize {
        self.met_keys.len() + 1
    }
}

/// One hour of the city as a multi-channel raster.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFrame {
    pub timestamp: Timestamp,
    /// `[C, M, N]`
    pub channels: Tensor<f32>,
    /// `[M, N]`, 1 where at least one pollution station reports.
    pub station_mask: Tensor<f32>,
    /// `[met_slots, M, N]`, 1 where a met station reports that key.
    pub met_mask: Tensor<f32>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RasterReport {
    pub used: usize,
    pub outside_bbox: usize,
    pub external: usize,
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

/// Builds the non-external channels of one frame. External channels are
/// left at zero; see [`super::embed_external`].
pub fn rasterize(
    records: &[&SensorRecord],
    spec: &GridSpec,
    layout: &ChannelLayout,
) -> Result<(GridFrame, RasterReport)> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("rasterize needs at least one record".into()))?;
    let t = first.timestamp;
    if let Some(r) = records.iter().find(|r| r.timestamp != t) {
        return Err(Error::Contract(format!(
            "rasterize got mixed timestamps {} and {}",
            t, r.timestamp
        )));
    }
    let (m, n) = (spec.rows, spec.cols);
    let cells = m * n;
    let nc = layout.count();
    let mut report = RasterReport::default();

    let mut pollution: Vec<Acc> = (0..cells).map(|_| Acc::default()).collect();
    let mut met: Vec<Vec<Acc>> = layout
        .met_keys
        .iter()
        .map(|_| (0..cells).map(|_| Acc::default()).collect())
        .collect();
    // Wind: keep the lexicographically smallest station per cell.
    let mut wind: Vec<Option<(&str, usize)>> = vec![None; cells];
    let mut traffic: Vec<Acc> = (0..cells).map(|_| Acc::default()).collect();
    let mut speed: Vec<Acc> = (0..cells).map(|_| Acc::default()).collect();

    for r in records {
        if r.kind == SensorKind::External {
            report.external += 1;
            continue;
        }
        let Some((i, j)) = spec.cell_of(r.lat, r.lon) else {
            report.outside_bbox += 1;
            continue;
        };
        report.used += 1;
        let cell = i * n + j;
        let push = |acc: &mut Acc, v: f64| {
            acc.sum += v;
            acc.n += 1;
        };
        match r.kind {
            SensorKind::Pollution => {
                if let Some(v) = r.value(&layout.pollutant) {
                    push(&mut pollution[cell], v);
                }
            }
            SensorKind::Met => {
                for (k, key) in layout.met_keys.iter().enumerate() {
                    if let Some(v) = r.value(key) {
                        push(&mut met[k][cell], v);
                    }
                }
                if let Some(d) = r.value(keys::WIND_DIR) {
                    let bin = layout.wind_bin(d);
                    match wind[cell] {
                        Some((id, _)) if id <= r.station_id.as_str() => {}
                        _ => wind[cell] = Some((r.station_id.as_str(), bin)),
                    }
                }
            }
            SensorKind::Traffic => {
                if let Some(v) = r.value(keys::VOLUME) {
                    push(&mut traffic[cell], v);
                }
            }
            SensorKind::Speed => {
                if let Some(v) = r.value(keys::SPEED) {
                    push(&mut speed[cell], v);
                }
            }
            SensorKind::External => unreachable!(),
        }
    }

    let mean = |a: &Acc| if a.n == 0 { 0.0 } else { a.sum / a.n as f64 };
    let agg = |a: &Acc| match layout.traffic_aggregation {
        Aggregation::Mean => mean(a),
        Aggregation::Sum => a.sum,
    };
    let mut ch = vec![0f32; nc * cells];
    let mut mask = vec![0f32; cells];
    let mut met_mask = vec![0f32; layout.met_slots() * cells];
    for cell in 0..cells {
        if pollution[cell].n > 0 {
            ch[cell] = mean(&pollution[cell]) as f32;
            mask[cell] = 1.0;
        }
        for (k, acc) in met.iter().enumerate() {
            if acc[cell].n > 0 {
                ch[(layout.met_offset() + k) * cells + cell] = mean(&acc[cell]) as f32;
                met_mask[k * cells + cell] = 1.0;
            }
        }
        if let Some((_, bin)) = wind[cell] {
            ch[(layout.wind_offset() + bin) * cells + cell] = 1.0;
            met_mask[layout.met_keys.len() * cells + cell] = 1.0;
        }
        ch[layout.traffic_offset() * cells + cell] = agg(&traffic[cell]) as f32;
        ch[layout.speed_offset() * cells + cell] = agg(&speed[cell]) as f32;
    }
    let frame = GridFrame {
        timestamp: t,
        channels: Tensor::from_parts(vec![nc, m, n], ch),
        station_mask: Tensor::from_parts(vec![m, n], mask),
        met_mask: Tensor::from_parts(vec![layout.met_slots(), m, n], met_mask),
    };
    Ok((frame, report))
}

/// For every cell, index of the nearest cell flagged in `present`
/// (squared Euclidean distance in cell units; ties go to the smallest row,
/// then the smallest column).
pub fn nearest_present(present: &[bool], rows: usize, cols: usize) -> Option<Vec<usize>> {
    let sources: Vec<(usize, usize)> = (0..rows * cols)
        .filter(|&c| present[c])
        .map(|c| (c / cols, c % cols))
        .collect();
    if sources.is_empty() {
        return None;
    }
    Some(
        (0..rows * cols)
            .map(|c| {
                let (i, j) = (c / cols, c % cols);
                let mut best = (usize::MAX, 0);
                for &(si, sj) in &sources {
                    let d = si.abs_diff(i).pow(2) + sj.abs_diff(j).pow(2);
                    if d < best.0 {
                        best = (d, si * cols + sj);
                    }
                }
                best.1
            })
            .collect(),
    )
}

/// Fills every meteorological channel from the nearest cell that carries it.
pub fn fill_met_gaps(frames: &mut [GridFrame], layout: &ChannelLayout) -> Result<()> {
    for f in frames.iter_mut() {
        let s = f.channels.shape().to_vec();
        let (m, n) = (s[1], s[2]);
        let cells = m * n;
        for slot in 0..layout.met_slots() {
            let present: Vec<bool> = f.met_mask.data()[slot * cells..(slot + 1) * cells]
                .iter()
                .map(|&v| v > 0.5)
                .collect();
            let src = nearest_present(&present, m, n).ok_or_else(|| {
                let key = layout
                    .met_keys
                    .get(slot)
                    .map_or(keys::WIND_DIR, String::as_str);
                Error::Gap(format!("no met station reports `{key}` at {}", f.timestamp))
            })?;
            let chans: Vec<usize> = if slot < layout.met_keys.len() {
                vec![layout.met_offset() + slot]
            } else {
                (layout.wind_offset()..layout.wind_offset() + layout.wind_bins).collect()
            };
            let data = f.channels.data_mut();
            for c in chans {
                let plane = &mut data[c * cells..(c + 1) * cells];
                let before = plane.to_vec();
                for (cell, &from) in src.iter().enumerate() {
                    plane[cell] = before[from];
                }
            }
        }
    }
    Ok(())
}

/// Groups records by hour, in time order.
pub fn by_hour(records: &[SensorRecord]) -> BTreeMap<Timestamp, Vec<&SensorRecord>> {
    let mut out: BTreeMap<Timestamp, Vec<&SensorRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.timestamp).or_default().push(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::records::parse_timestamp;

    pub(crate) fn spec(m: usize, n: usize) -> GridSpec {
        GridSpec::new(
            BoundingBox {
                lat_min: 0.0,
                lat_max: m as f64,
                lon_min: 0.0,
                lon_max: n as f64,
            },
            m,
            n,
        )
        .unwrap()
    }

    fn at(id: &str, kind: SensorKind, row: usize, col: usize, m: usize, kv: &[(&str, f64)]) -> SensorRecord {
        SensorRecord {
            station_id: id.into(),
            kind,
            lat: m as f64 - row as f64 - 0.5,
            lon: col as f64 + 0.5,
            timestamp: parse_timestamp("2016-03-01T05:00:00Z").unwrap(),
            values: kv.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn cell_assignment_is_total_and_oriented() {
        let s = spec(4, 4);
        assert_eq!(s.cell_of(4.0, 0.0), Some((0, 0)));
        assert_eq!(s.cell_of(0.0, 4.0), Some((3, 3)));
        assert_eq!(s.cell_of(2.5, 1.5), Some((1, 1)));
        assert_eq!(s.cell_of(5.0, 1.0), None);
        let (lat, lon) = s.center(1, 2);
        assert_eq!(s.cell_of(lat, lon), Some((1, 2)));
    }

    #[test]
    fn two_stations_average_and_empty_is_masked_out() {
        let s = spec(3, 3);
        let l = ChannelLayout::new(vec![]);
        let a = at("a", SensorKind::Pollution, 1, 1, 3, &[("PM25", 10.0)]);
        let b = at("b", SensorKind::Pollution, 1, 1, 3, &[("PM25", 20.0)]);
        let (f, rep) = rasterize(&[&a, &b], &s, &l).unwrap();
        assert_eq!(f.channels.get(&[0, 1, 1]), 15.0);
        assert_eq!(f.station_mask.get(&[1, 1]), 1.0);
        assert_eq!(f.channels.get(&[0, 0, 0]), 0.0);
        assert_eq!(f.station_mask.get(&[0, 0]), 0.0);
        assert_eq!(rep.used, 2);
    }

    #[test]
    fn wind_picks_smallest_station_id() {
        let s = spec(2, 2);
        let l = ChannelLayout::new(vec![]);
        let z = at("zeta", SensorKind::Met, 0, 0, 2, &[("wind_dir", 90.0)]);
        let a = at("alpha", SensorKind::Met, 0, 0, 2, &[("wind_dir", 180.0)]);
        for order in [[&z, &a], [&a, &z]] {
            let (f, _) = rasterize(&order, &s, &l).unwrap();
            let south = l.wind_offset() + 4;
            assert_eq!(f.channels.get(&[south, 0, 0]), 1.0);
            assert_eq!(f.channels.get(&[l.wind_offset() + 2, 0, 0]), 0.0);
        }
    }

    #[test]
    fn mixed_timestamps_rejected_and_outside_counted() {
        let s = spec(2, 2);
        let l = ChannelLayout::new(vec![]);
        let a = at("a", SensorKind::Pollution, 0, 0, 2, &[("PM25", 1.0)]);
        let mut b = a.clone();
        b.timestamp = parse_timestamp("2016-03-01T06:00:00Z").unwrap();
        assert!(matches!(rasterize(&[&a, &b], &s, &l), Err(Error::Contract(_))));
        let mut far = a.clone();
        far.lat = 99.0;
        let (_, rep) = rasterize(&[&a, &far], &s, &l).unwrap();
        assert_eq!(rep.outside_bbox, 1);
    }

    #[test]
    fn compass_bins() {
        let l = ChannelLayout::new(vec![]);
        assert_eq!(l.wind_bin(0.0), 0);
        assert_eq!(l.wind_bin(359.0), 0);
        assert_eq!(l.wind_bin(44.0), 1);
        assert_eq!(l.wind_bin(270.0), 6);
        let mut l16 = l.clone();
        l16.wind_bins = 16;
        assert_eq!(l16.wind_bin(22.5), 1);
        assert_eq!(l16.channels().len(), 1 + 5 + 16 + 2);
    }

    fn met_frame(m: usize, n: usize, stations: &[(usize, usize, f64)]) -> GridFrame {
        let s = spec(m, n);
        let l = ChannelLayout::new(vec![]);
        let recs: Vec<SensorRecord> = stations
            .iter()
            .enumerate()
            .map(|(k, &(i, j, v))| {
                let mut kv: Vec<(&str, f64)> = keys::MET_NUMERIC.iter().map(|&key| (key, v)).collect();
                kv.push(("wind_dir", 90.0 * k as f64));
                at(&format!("m{k}"), SensorKind::Met, i, j, m, &kv)
            })
            .collect();
        let refs: Vec<&SensorRecord> = recs.iter().collect();
        rasterize(&refs, &s, &l).unwrap().0
    }

    #[test]
    fn single_met_station_fills_grid() {
        let l = ChannelLayout::new(vec![]);
        let mut frames = vec![met_frame(4, 3, &[(2, 1, 7.0)])];
        fill_met_gaps(&mut frames, &l).unwrap();
        let cells = 12;
        let plane = &frames[0].channels.data()[cells..2 * cells];
        assert!(plane.iter().all(|&v| v == 7.0));
        let north = &frames[0].channels.data()[l.wind_offset() * cells..(l.wind_offset() + 1) * cells];
        assert!(north.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn opposite_corners_with_tie_rule() {
        let l = ChannelLayout::new(vec![]);
        let mut frames = vec![met_frame(3, 3, &[(0, 0, 1.0), (2, 2, 2.0)])];
        fill_met_gaps(&mut frames, &l).unwrap();
        let c = &frames[0].channels;
        // Brute-force expectation.
        for i in 0..3usize {
            for j in 0..3usize {
                let d0 = i * i + j * j;
                let d1 = (2 - i).pow(2) + (2 - j).pow(2);
                let want = if d0 <= d1 { 1.0 } else { 2.0 };
                assert_eq!(c.get(&[1, i, j]), want, "cell ({i},{j})");
            }
        }
    }

    #[test]
    fn dense_met_is_fixed_point_and_missing_is_gap() {
        let l = ChannelLayout::new(vec![]);
        let stations: Vec<(usize, usize, f64)> =
            (0..2).flat_map(|i| (0..2).map(move |j| (i, j, (i * 2 + j) as f64))).collect();
        let mut frames = vec![met_frame(2, 2, &stations)];
        let before = frames[0].clone();
        fill_met_gaps(&mut frames, &l).unwrap();
        assert_eq!(frames[0], before);

        let s = spec(2, 2);
        let p = at("p", SensorKind::Pollution, 0, 0, 2, &[("PM25", 3.0)]);
        let (f, _) = rasterize(&[&p], &s, &l).unwrap();
        assert!(matches!(fill_met_gaps(&mut [f], &l), Err(Error::Gap(_))));
    }
}
