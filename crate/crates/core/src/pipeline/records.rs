//! Point sensor records and the long-format sensor CSV
//! (`station_id,kind,lat,lon,timestamp,key,value`).

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Timestamp = DateTime<Utc>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Pollution,
    Met,
    Traffic,
    Speed,
    External,
}

/// Well-known value keys.
pub mod keys {
    pub const PM25: &str = "PM25";
    pub const TEMPERATURE: &str = "temperature";
    pub const WIND_SPEED: &str = "wind_speed";
    pub const RAINFALL: &str = "rainfall";
    pub const PRESSURE: &str = "pressure";
    pub const HUMIDITY: &str = "humidity";
    /// Bearing in degrees, binned into compass categories on rasterization.
    pub const WIND_DIR: &str = "wind_dir";
    pub const VOLUME: &str = "volume";
    pub const SPEED: &str = "speed";

    pub const MET_NUMERIC: [&str; 5] = [TEMPERATURE, WIND_SPEED, RAINFALL, PRESSURE, HUMIDITY];
}

/// All values reported by one station at one hour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    pub station_id: String,
    pub kind: SensorKind,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: Timestamp,
    pub values: BTreeMap<String, f64>,
}

impl SensorRecord {
    pub fn value(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    station_id: String,
    kind: SensorKind,
    lat: f64,
    lon: f64,
    timestamp: String,
    key: String,
    value: f64,
}

pub fn format_timestamp(t: &Timestamp) -> String {
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn parse_timestamp(s: &str) -> Result<Timestamp> {
    let t = DateTime::parse_from_rfc3339(s)
        .map_err(|e| Error::Config(format!("bad timestamp `{s}`: {e}")))?
        .with_timezone(&Utc);
    if t.minute() != 0 || t.second() != 0 || t.nanosecond() != 0 {
        return Err(Error::Config(format!("timestamp `{s}` is not on a whole hour")));
    }
    Ok(t)
}

/// Writes records, one row per value, keys in sorted order. Floats use a
/// fixed 4-decimal format so output is byte-stable.
pub fn write_csv<W: Write>(w: W, records: &[SensorRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["station_id", "kind", "lat", "lon", "timestamp", "key", "value"])?;
    for r in records {
        let kind = match r.kind {
            SensorKind::Pollution => "pollution",
            SensorKind::Met => "met",
            SensorKind::Traffic => "traffic",
            SensorKind::Speed => "speed",
            SensorKind::External => "external",
        };
        let ts = format_timestamp(&r.timestamp);
        let lat = format!("{:.6}", r.lat);
        let lon = format!("{:.6}", r.lon);
        for (k, v) in &r.values {
            out.write_record([r.station_id.as_str(), kind, &lat, &lon, &ts, k, &format!("{v:.4}")])?;
        }
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Reads the long-format CSV and regroups rows into per-(station, hour)
/// records. Output is sorted by (timestamp, station_id).
pub fn read_csv<R: Read>(r: R) -> Result<Vec<SensorRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    let expected = ["station_id", "kind", "lat", "lon", "timestamp", "key", "value"];
    if header.iter().ne(expected.iter().copied()) {
        return Err(Error::Config(format!(
            "sensor CSV header must be `{}`, got `{}`",
            expected.join(","),
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut grouped: BTreeMap<(Timestamp, String), SensorRecord> = BTreeMap::new();
    for (line, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| Error::Config(format!("sensor CSV row {}: {e}", line + 2)))?;
        if !row.value.is_finite() {
            return Err(Error::Config(format!("sensor CSV row {}: non-finite value", line + 2)));
        }
        let ts = parse_timestamp(&row.timestamp)?;
        let rec = grouped
            .entry((ts, row.station_id.clone()))
            .or_insert_with(|| SensorRecord {
                station_id: row.station_id.clone(),
                kind: row.kind,
                lat: row.lat,
                lon: row.lon,
                timestamp: ts,
                values: BTreeMap::new(),
            });
        rec.values.insert(row.key, row.value);
    }
    Ok(grouped.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, kind: SensorKind, hour: u32, kv: &[(&str, f64)]) -> SensorRecord {
        SensorRecord {
            station_id: id.into(),
            kind,
            lat: 37.5,
            lon: 127.0,
            timestamp: parse_timestamp(&format!("2015-01-01T{hour:02}:00:00Z")).unwrap(),
            values: kv.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    #[test]
    fn csv_round_trip_regroups_rows() {
        let records = vec![
            rec("a", SensorKind::Met, 0, &[("temperature", 1.5), ("humidity", 40.0)]),
            rec("b", SensorKind::Pollution, 0, &[("PM25", 12.25)]),
            rec("a", SensorKind::Met, 1, &[("temperature", 2.0)]),
        ];
        let mut buf = Vec::new();
        write_csv(&mut buf, &records).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("station_id,kind,lat,lon,timestamp,key,value\n"));
        assert_eq!(text.lines().count(), 5);
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn rejects_off_hour_and_bad_header() {
        assert!(parse_timestamp("2015-01-01T00:30:00Z").is_err());
        let bad = "id,kind\nx,met\n";
        assert!(matches!(read_csv(bad.as_bytes()), Err(Error::Config(_))));
    }
}
