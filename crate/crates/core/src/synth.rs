//! Synthetic city: an advection–diffusion pollution field driven by wind,
//! traffic-shaped emissions and regional inflow, observed through virtual
//! stations.

use std::f64::consts::PI;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use chrono::{Datelike, Duration, Timelike};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{
    build_dataset, keys, parse_timestamp, write_csv, BoundingBox, Dataset, GridSpec, RasterConfig,
    SensorKind, SensorRecord, Timestamp,
};
use crate::seeds::sub_rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    North,
    South,
    East,
    West,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalArea {
    pub name: String,
    pub edge: Edge,
    /// Typical concentration of the area.
    pub base: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindConfig {
    /// Mean eastward and northward components, cells per hour.
    pub mean_u: f64,
    pub mean_v: f64,
    /// Each component deviates from its mean by at most this much.
    pub amplitude: f64,
    /// Hour-to-hour autocorrelation of the deviations.
    pub persistence: f64,
}

impl Default for WindConfig {
    fn default() -> Self {
        WindConfig {
            mean_u: 0.25,
            mean_v: 0.1,
            amplitude: 0.45,
            persistence: 0.95,
        }
    }
}

impl WindConfig {
    pub fn calm() -> Self {
        WindConfig {
            mean_u: 0.0,
            mean_v: 0.0,
            amplitude: 0.0,
            persistence: 0.0,
        }
    }

    /// Upper bound on `|u| + |v|`.
    pub fn max_speed(&self) -> f64 {
        self.mean_u.abs() + self.mean_v.abs() + 2.0 * self.amplitude.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub count: usize,
    /// Emission per hour at the centre of a unit-weight source during the
    /// morning rush.
    pub strength: f64,
    /// Gaussian footprint radius in cells.
    pub radius: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            count: 6,
            strength: 10.0,
            radius: 1.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StationConfig {
    pub pollution: usize,
    pub met: usize,
    pub traffic: usize,
    pub speed: usize,
}

impl Default for StationConfig {
    fn default() -> Self {
        StationConfig {
            pollution: 39,
            met: 28,
            traffic: 145,
            speed: 400,
        }
    }
}

/// `world.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub rows: usize,
    pub cols: usize,
    pub bbox: BoundingBox,
    pub hours: usize,
    pub start: Timestamp,
    /// Hours simulated before the first recorded hour.
    pub spinup_hours: usize,
    pub seed: u64,
    /// Diffusion coefficient, cells² per hour.
    pub kappa: f64,
    pub substeps: usize,
    /// Rate of relaxation toward `background`, per hour.
    pub relaxation: f64,
    pub background: f64,
    /// Washout rate per mm of rain, per hour.
    pub washout: f64,
    pub wind: WindConfig,
    pub sources: SourceConfig,
    pub external: Vec<ExternalArea>,
    /// Regional inflow through the edges. Without it the boundary is closed.
    pub inflow: bool,
    pub stations: StationConfig,
    pub noise_sigma: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            rows: 32,
            cols: 32,
            bbox: BoundingBox {
                lat_min: 37.42,
                lat_max: 37.70,
                lon_min: 126.80,
                lon_max: 127.18,
            },
            hours: 2000,
            start: parse_timestamp("2015-01-01T00:00:00Z").expect("valid literal"),
            spinup_hours: 48,
            seed: 0,
            kappa: 0.15,
            substeps: 2,
            relaxation: 0.06,
            background: 20.0,
            washout: 0.15,
            wind: WindConfig::default(),
            sources: SourceConfig::default(),
            external: vec![
                ExternalArea { name: "west".into(), edge: Edge::West, base: 45.0 },
                ExternalArea { name: "north".into(), edge: Edge::North, base: 30.0 },
                ExternalArea { name: "south".into(), edge: Edge::South, base: 35.0 },
            ],
            inflow: true,
            stations: StationConfig::default(),
            noise_sigma: 2.0,
        }
    }
}

impl WorldConfig {
    /// 16×16 grid, 2000 hours, 20 pollution stations.
    pub fn benchmark() -> Self {
        WorldConfig {
            rows: 16,
            cols: 16,
            stations: StationConfig {
                pollution: 20,
                met: 8,
                traffic: 40,
                speed: 100,
            },
            ..Default::default()
        }
    }

    /// 4×4 grid for fast tests.
    pub fn tiny() -> Self {
        WorldConfig {
            rows: 4,
            cols: 4,
            hours: 48,
            spinup_hours: 12,
            sources: SourceConfig { count: 2, ..Default::default() },
            stations: StationConfig {
                pollution: 6,
                met: 2,
                traffic: 4,
                speed: 4,
            },
            ..Default::default()
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.bbox, self.rows, self.cols)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        if self.hours == 0 {
            return Err(Error::Config("hours must be at least 1".into()));
        }
        if self.substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("relaxation", self.relaxation),
            ("washout", self.washout),
            ("noise_sigma", self.noise_sigma),
            ("sources.strength", self.sources.strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.wind.persistence) {
            return Err(Error::Config("wind.persistence must lie in [0, 1)".into()));
        }
        if self.sources.count > 0 && self.sources.radius <= 0.0 {
            return Err(Error::Config("sources.radius must be > 0".into()));
        }
        Stepper::new(
            self.rows,
            self.cols,
            self.kappa,
            self.substeps,
            self.wind.max_speed(),
        )
        .map(|_| ())
    }

    pub fn area_names(&self) -> Vec<String> {
        self.external.iter().map(|a| a.name.clone()).collect()
    }

    pub fn raster_config(&self) -> Result<RasterConfig> {
        Ok(RasterConfig::new(self.grid()?, self.area_names()))
    }
}

/// Boundary values seen by upwind advection; `None` means zero-gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Ghosts {
    pub north: Option<f64>,
    pub south: Option<f64>,
    pub east: Option<f64>,
    pub west: Option<f64>,
}

/// Explicit first-order upwind advection plus five-point diffusion with
/// reflecting walls.
#[derive(Clone, Debug, PartialEq)]
pub struct Stepper {
    pub rows: usize,
    pub cols: usize,
    pub kappa: f64,
    pub dt: f64,
}

impl Stepper {
    /// Fails unless `dt·(|u|+|v|) + 4·κ·dt ≤ 1`, which keeps every update a
    /// convex combination of neighbours.
    pub fn new(rows: usize, cols: usize, kappa: f64, substeps: usize, max_speed: f64) -> Result<Self> {
        let dt = 1.0 / substeps.max(1) as f64;
        let courant = dt * max_speed + 4.0 * kappa * dt;
        if courant > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "unstable world: dt·(|u|+|v|) + 4·kappa·dt = {dt}·{max_speed} + 4·{kappa}·{dt} = {courant:.4} exceeds 1; \
                 raise substeps or lower wind/kappa"
            )));
        }
        Ok(Stepper { rows, cols, kappa, dt })
    }

    /// One substep of transport from `f` into `out`.
    pub fn transport(&self, f: &[f64], u: f64, v: f64, ghosts: &Ghosts, out: &mut [f64]) {
        let (m, n) = (self.rows, self.cols);
        let (up, um) = (u.max(0.0), u.min(0.0));
        let (vp, vm) = (v.max(0.0), v.min(0.0));
        let dt = self.dt;
        for i in 0..m {
            for j in 0..n {
                let c = f[i * n + j];
                let west = (j > 0).then(|| f[i * n + j - 1]);
                let east = (j + 1 < n).then(|| f[i * n + j + 1]);
                let north = (i > 0).then(|| f[(i - 1) * n + j]);
                let south = (i + 1 < m).then(|| f[(i + 1) * n + j]);
                let adv = |inner: Option<f64>, ghost: Option<f64>| inner.or(ghost).unwrap_or(c);
                // Northward wind (v > 0) carries air from the southern row.
                let advection = up * (c - adv(west, ghosts.west))
                    + um * (adv(east, ghosts.east) - c)
                    + vp * (c - adv(south, ghosts.south))
                    + vm * (adv(north, ghosts.north) - c);
                let wall = |x: Option<f64>| x.unwrap_or(c);
                let lap = wall(west) + wall(east) + wall(north) + wall(south) - 4.0 * c;
                out[i * n + j] = c - dt * advection + self.kappa * dt * lap;
            }
        }
    }
}

/// Rush-hour traffic intensity by hour of day: a morning and an evening bump
/// over a night-time floor.
pub fn diurnal_profile(hour_of_day: f64) -> f64 {
    let bump = |mu: f64, s: f64| (-(hour_of_day - mu).powi(2) / (2.0 * s * s)).exp();
    0.25 + bump(8.0, 1.5) + 0.8 * bump(18.0, 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub kind: SensorKind,
    pub lat: f64,
    pub lon: f64,
    pub row: usize,
    pub col: usize,
}

/// Everything the generator produced.
#[derive(Clone, Debug)]
pub struct SimResult {
    pub config: WorldConfig,
    pub grid: GridSpec,
    pub hours: Vec<Timestamp>,
    /// Dense pollution field per recorded hour, row-major `M·N`.
    pub truth: Vec<Vec<f64>>,
    /// Wind `(u, v)` per recorded hour.
    pub wind: Vec<(f64, f64)>,
    /// Regional value per area per recorded hour.
    pub external: Vec<Vec<f64>>,
    /// Source footprint normalized to a peak of 1 (road density proxy).
    pub density: Vec<f64>,
    pub stations: Vec<Station>,
    pub records: Vec<SensorRecord>,
}

fn place(rng: &mut ChaCha8Rng, grid: &GridSpec, prefix: &str, kind: SensorKind, count: usize) -> Vec<Station> {
    let b = grid.bbox;
    (0..count)
        .map(|k| {
            let lat = b.lat_min + rng.random::<f64>() * (b.lat_max - b.lat_min);
            let lon = b.lon_min + rng.random::<f64>() * (b.lon_max - b.lon_min);
            let (row, col) = grid.cell_of(lat, lon).expect("sampled inside the box");
            Station {
                id: format!("{prefix}-{k:04}"),
                kind,
                lat,
                lon,
                row,
                col,
            }
        })
        .collect()
}

fn external_location(b: &BoundingBox, edge: Edge) -> (f64, f64) {
    let (lat_mid, lon_mid) = ((b.lat_min + b.lat_max) / 2.0, (b.lon_min + b.lon_max) / 2.0);
    match edge {
        Edge::North => (b.lat_max + 1.0, lon_mid),
        Edge::South => (b.lat_min - 1.0, lon_mid),
        Edge::East => (lat_mid, b.lon_max + 1.0),
        Edge::West => (lat_mid, b.lon_min - 1.0),
    }
}

/// Meteorological bearing the wind blows from, degrees clockwise from north.
pub fn bearing_from(u: f64, v: f64) -> f64 {
    (-u).atan2(-v).to_degrees().rem_euclid(360.0)
}

fn normal(sigma: f64) -> Normal<f64> {
    Normal::new(0.0, sigma.max(0.0)).expect("finite sigma")
}

/// Runs the world and samples every station at every recorded hour.
pub fn simulate(config: &WorldConfig) -> Result<SimResult> {
    config.validate()?;
    let grid = config.grid()?;
    let (m, n) = (config.rows, config.cols);
    let cells = m * n;
    let stepper = Stepper::new(m, n, config.kappa, config.substeps, config.wind.max_speed())?;
    let seed = config.seed;

    let mut layout_rng = sub_rng(seed, "world/layout");
    let sources: Vec<(f64, f64, f64)> = (0..config.sources.count)
        .map(|_| {
            (
                layout_rng.random::<f64>() * m as f64,
                layout_rng.random::<f64>() * n as f64,
                layout_rng.random_range(0.5..1.5),
            )
        })
        .collect();
    let mut density = vec![0.0; cells];
    for (cell, d) in density.iter_mut().enumerate() {
        let (ci, cj) = ((cell / n) as f64 + 0.5, (cell % n) as f64 + 0.5);
        let r2 = 2.0 * config.sources.radius.powi(2);
        *d = sources
            .iter()
            .map(|&(si, sj, w)| w * (-((ci - si).powi(2) + (cj - sj).powi(2)) / r2).exp())
            .sum();
    }
    let peak = density.iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        density.iter_mut().for_each(|d| *d /= peak);
    }

    let mut stations = Vec::new();
    stations.extend(place(&mut layout_rng, &grid, "pol", SensorKind::Pollution, config.stations.pollution));
    stations.extend(place(&mut layout_rng, &grid, "met", SensorKind::Met, config.stations.met));
    stations.extend(place(&mut layout_rng, &grid, "trf", SensorKind::Traffic, config.stations.traffic));
    stations.extend(place(&mut layout_rng, &grid, "spd", SensorKind::Speed, config.stations.speed));
    let met_offsets: Vec<f64> = stations
        .iter()
        .map(|_| normal(0.5).sample(&mut layout_rng))
        .collect();
    let road_base: Vec<f64> = stations
        .iter()
        .map(|_| layout_rng.random_range(0.7..1.3))
        .collect();

    let mut weather_rng = sub_rng(seed, "world/weather");
    let mut noise_rng = sub_rng(seed, "world/noise");
    let std_normal = normal(1.0);
    let station_noise = normal(config.noise_sigma);

    let mut field = vec![config.background; cells];
    let mut scratch = vec![0.0; cells];
    let mut wind_state = (0.0f64, 0.0f64);
    let mut ext_state = vec![0.0f64; config.external.len()];
    let mut raining = false;
    let mut rain = 0.0f64;
    let mut pressure_dev = 0.0f64;

    let total = config.spinup_hours + config.hours;
    let t0 = config.start - Duration::hours(config.spinup_hours as i64);
    let mut out = SimResult {
        config: config.clone(),
        grid,
        hours: Vec::with_capacity(config.hours),
        truth: Vec::with_capacity(config.hours),
        wind: Vec::with_capacity(config.hours),
        external: Vec::with_capacity(config.hours),
        density: density.clone(),
        stations: stations.clone(),
        records: Vec::new(),
    };
    let phi = config.wind.persistence;
    let innov = (1.0 - phi * phi).sqrt();

    for step in 0..total {
        let t = t0 + Duration::hours(step as i64);
        let hod = t.hour() as f64;
        let doy = t.ordinal0() as f64;

        wind_state.0 = (phi * wind_state.0 + innov * std_normal.sample(&mut weather_rng)).clamp(-1.0, 1.0);
        wind_state.1 = (phi * wind_state.1 + innov * std_normal.sample(&mut weather_rng)).clamp(-1.0, 1.0);
        let u = config.wind.mean_u + config.wind.amplitude * wind_state.0;
        let v = config.wind.mean_v + config.wind.amplitude * wind_state.1;
        for z in ext_state.iter_mut() {
            *z = 0.97 * *z + 0.1 * std_normal.sample(&mut weather_rng);
        }
        let ext_values: Vec<f64> = config
            .external
            .iter()
            .zip(&ext_state)
            .map(|(a, z)| a.base * z.exp())
            .collect();
        raining = if raining {
            weather_rng.random::<f64>() > 0.2
        } else {
            weather_rng.random::<f64>() < 0.02
        };
        rain = if raining {
            (0.5 * rain + weather_rng.random_range(0.5..4.0)).min(10.0)
        } else {
            0.0
        };
        pressure_dev = 0.98 * pressure_dev + 0.5 * std_normal.sample(&mut weather_rng);

        let mut ghosts = Ghosts::default();
        if config.inflow {
            ghosts = Ghosts {
                north: Some(config.background),
                south: Some(config.background),
                east: Some(config.background),
                west: Some(config.background),
            };
            for (a, &val) in config.external.iter().zip(&ext_values) {
                let slot = match a.edge {
                    Edge::North => &mut ghosts.north,
                    Edge::South => &mut ghosts.south,
                    Edge::East => &mut ghosts.east,
                    Edge::West => &mut ghosts.west,
                };
                *slot = Some(val);
            }
        }

        let profile = diurnal_profile(hod);
        let relax = (-config.relaxation * stepper.dt).exp();
        let wash = (-config.washout * rain * stepper.dt).exp();
        for _ in 0..config.substeps {
            stepper.transport(&field, u, v, &ghosts, &mut scratch);
            for (cell, f) in scratch.iter_mut().enumerate() {
                *f += stepper.dt * config.sources.strength * density[cell] * profile;
                *f = config.background + (*f - config.background) * relax;
                *f *= wash;
            }
            std::mem::swap(&mut field, &mut scratch);
        }

        if step < config.spinup_hours {
            continue;
        }
        out.hours.push(t);
        out.truth.push(field.clone());
        out.wind.push((u, v));
        out.external.push(ext_values.clone());

        let temp_base = 12.0 + 10.0 * (2.0 * PI * (doy - 110.0) / 365.0).sin()
            + 4.0 * (2.0 * PI * (hod - 9.0) / 24.0).sin();
        for (s, st) in stations.iter().enumerate() {
            let cell = st.row * n + st.col;
            let mut values = std::collections::BTreeMap::new();
            match st.kind {
                SensorKind::Pollution => {
                    let val = (field[cell] + station_noise.sample(&mut noise_rng)).max(0.0);
                    values.insert(keys::PM25.to_string(), val);
                }
                SensorKind::Met => {
                    let temp = temp_base + met_offsets[s] - 0.1 * st.row as f64
                        + 0.3 * std_normal.sample(&mut noise_rng);
                    let speed = ((u * u + v * v).sqrt() + 0.05 * std_normal.sample(&mut noise_rng)).max(0.0);
                    let rainfall = if rain > 0.0 {
                        rain * noise_rng.random_range(0.8..1.2)
                    } else {
                        0.0
                    };
                    let pressure = 1013.0 + pressure_dev + 0.2 * std_normal.sample(&mut noise_rng);
                    let humidity = (55.0 + 25.0 * rain.min(1.0) - 0.45 * (temp - 12.0)
                        + 2.0 * std_normal.sample(&mut noise_rng))
                    .clamp(5.0, 100.0);
                    let dir = (bearing_from(u, v) + 5.0 * std_normal.sample(&mut noise_rng)).rem_euclid(360.0);
                    values.insert(keys::TEMPERATURE.to_string(), temp);
                    values.insert(keys::WIND_SPEED.to_string(), speed);
                    values.insert(keys::RAINFALL.to_string(), rainfall);
                    values.insert(keys::PRESSURE.to_string(), pressure);
                    values.insert(keys::HUMIDITY.to_string(), humidity);
                    values.insert(keys::WIND_DIR.to_string(), dir);
                }
                SensorKind::Traffic => {
                    let vol = road_base[s] * (200.0 + 1500.0 * density[cell] * profile)
                        + 30.0 * std_normal.sample(&mut noise_rng);
                    values.insert(keys::VOLUME.to_string(), vol.max(0.0));
                }
                SensorKind::Speed => {
                    let kmh = 60.0 * road_base[s] - 28.0 * density[cell] * profile
                        + 3.0 * std_normal.sample(&mut noise_rng);
                    values.insert(keys::SPEED.to_string(), kmh.clamp(5.0, 90.0));
                }
                SensorKind::External => unreachable!("external areas are not placed on the grid"),
            }
            out.records.push(SensorRecord {
                station_id: st.id.clone(),
                kind: st.kind,
                lat: st.lat,
                lon: st.lon,
                timestamp: t,
                values,
            });
        }
        for (a, &val) in config.external.iter().zip(&ext_values) {
            let (lat, lon) = external_location(&config.bbox, a.edge);
            out.records.push(SensorRecord {
                station_id: a.name.clone(),
                kind: SensorKind::External,
                lat,
                lon,
                timestamp: t,
                values: [(keys::PM25.to_string(), val)].into(),
            });
        }
    }
    Ok(out)
}

pub const SENSORS_FILE: &str = "sensors.csv";
pub const WORLD_FILE: &str = "world.json";
pub const TRUTH_DIR: &str = "truth";
pub const TRUTH_FILE: &str = "truth.gtsr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub bbox: BoundingBox,
    #[serde(rename = "M")]
    pub rows: usize,
    #[serde(rename = "N")]
    pub cols: usize,
    pub hours: Vec<Timestamp>,
    pub stations: Vec<Station>,
}

impl SimResult {
    /// Keys reported per station of each kind.
    pub fn keys_per_station(kind: SensorKind) -> usize {
        match kind {
            SensorKind::Met => keys::MET_NUMERIC.len() + 1,
            _ => 1,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        write_csv(BufWriter::new(file), &self.records)
    }

    /// Dense field as `[T, M, N]`.
    pub fn truth_tensor(&self) -> Tensor<f32> {
        let data = self.truth.iter().flatten().map(|&v| v as f32).collect();
        Tensor::from_parts(vec![self.hours.len(), self.grid.rows, self.grid.cols], data)
    }

    /// Writes `sensors.csv`, `world.json` and the `truth/` bundle into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(TRUTH_DIR)).map_err(|e| Error::io(dir, e))?;
        self.write_csv(&dir.join(SENSORS_FILE))?;
        crate::pipeline::write_json(&dir.join(WORLD_FILE), &self.config)?;
        let truth = dir.join(TRUTH_DIR);
        crate::pipeline::write_gtsr(&truth.join(TRUTH_FILE), &self.truth_tensor())?;
        crate::pipeline::write_json(
            &truth.join("spec.json"),
            &TruthSpec {
                bbox: self.grid.bbox,
                rows: self.grid.rows,
                cols: self.grid.cols,
                hours: self.hours.clone(),
                stations: self.stations.clone(),
            },
        )
    }

    pub fn dataset(&self) -> Result<Dataset> {
        build_dataset(&self.records, &self.config.raster_config()?)
    }
}
