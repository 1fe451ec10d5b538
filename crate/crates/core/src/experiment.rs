//! Named experiment registry: factor ablations in both regimes and the
//! architecture baselines, plus the runner that trains and evaluates one
//! entry end to end.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_rmse, sp_rmse, variance_of_predictions, Persistence, SpRmseOptions};
use crate::models::{Arch, Model, ModelConfig};
use crate::params::Init;
use crate::pipeline::{ChannelGroup, Dataset, SampleWindow};
use crate::report::{EvalReport, REPORT_VERSION};
use crate::seeds::sub_seed;
use crate::train::{fit, DatasetSamples, LossCurve, Schedule, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// One step ahead at every cell.
    Interpolation,
    /// Twelve hours ahead.
    Forecasting,
}

impl Regime {
    pub fn k(self) -> usize {
        match self {
            Regime::Interpolation => 1,
            Regime::Forecasting => 12,
        }
    }
}

/// Input factor sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    Met,
    Traffic,
    Speed,
    External,
    All,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Base,
        Variant::Met,
        Variant::Traffic,
        Variant::Speed,
        Variant::External,
        Variant::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Met => "met",
            Variant::Traffic => "traffic",
            Variant::Speed => "speed",
            Variant::External => "external",
            Variant::All => "all",
        }
    }

    pub fn groups(self) -> Vec<ChannelGroup> {
        use ChannelGroup::*;
        match self {
            Variant::Base => vec![Pollution],
            Variant::Met => vec![Pollution, Met, Wind],
            Variant::Traffic => vec![Pollution, Traffic],
            Variant::Speed => vec![Pollution, Speed],
            Variant::External => vec![Pollution, External],
            Variant::All => vec![Pollution, Met, Wind, Traffic, Speed, External],
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected base, met, traffic, speed, external or all)")))
    }
}

/// Model sizes. `Paper` is the published configuration; `Desk` shrinks
/// layer widths and the weight penalty so the benchmark trains in minutes
/// on one core.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Paper,
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(Error::Config(format!("unknown scale `{s}` (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub name: String,
    pub regime: Regime,
    pub arch: Arch,
    pub variant: Variant,
    pub st_loss: bool,
}

impl ExperimentSpec {
    /// Same entry evaluated in another regime.
    pub fn in_regime(&self, regime: Regime) -> Self {
        ExperimentSpec {
            regime,
            ..self.clone()
        }
    }

    pub fn model_config(&self, grid: (usize, usize), in_channels: usize, scale: Scale) -> ModelConfig {
        let mut c = preset(self.arch, self.regime.k(), grid, in_channels, scale);
        c.use_st_loss |= self.st_loss;
        c.input_groups = Some(self.variant.groups());
        c
    }

    pub fn train_config(&self, scale: Scale, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        match scale {
            Scale::Paper => base,
            Scale::Desk => TrainConfig {
                batch_size: 32,
                steps: 1000,
                l2_beta: DESK_L2,
                dropout: DESK_DROPOUT,
                learning_rate: 0.005,
                schedule: Schedule::Cosine,
                ..base
            },
        }
    }
}

/// Published configuration of `arch` for `K` output steps, optionally
/// shrunk to desk scale.
pub fn preset(arch: Arch, k: usize, grid: (usize, usize), in_channels: usize, scale: Scale) -> ModelConfig {
    let mut c = match arch {
        Arch::ConvLstm if k == 1 => ModelConfig::convlstm_interp(grid, in_channels),
        Arch::ConvLstm => ModelConfig {
            k,
            ..ModelConfig::convlstm_forecast(grid, in_channels)
        },
        Arch::FcLstm => ModelConfig::fc_lstm(grid, in_channels, k),
        Arch::CnnEd => ModelConfig::cnn_ed(grid, in_channels, k),
        Arch::Dal => ModelConfig::dal(grid, in_channels, k),
    };
    if scale == Scale::Desk {
        c.channels = c.channels.iter().map(|&ch| (ch / 4).max(8)).collect();
        c.hidden = 128;
        c.pretrain_epochs = 5;
        c.l2_beta = DESK_L2;
        c.dropout = DESK_DROPOUT;
    }
    c
}

const DESK_L2: f64 = 1e-5;
const DESK_DROPOUT: f64 = 0.0;

fn entry(name: &str, regime: Regime, arch: Arch, variant: Variant, st_loss: bool) -> ExperimentSpec {
    ExperimentSpec {
        name: name.into(),
        regime,
        arch,
        variant,
        st_loss,
    }
}

/// Six factor variants in each regime plus four architecture baselines.
pub fn registry() -> Vec<ExperimentSpec> {
    let mut out = Vec::new();
    for (prefix, regime) in [("interp", Regime::Interpolation), ("forecast", Regime::Forecasting)] {
        for v in Variant::ALL {
            out.push(entry(&format!("{prefix}_{}", v.name()), regime, Arch::ConvLstm, v, false));
        }
    }
    let r = Regime::Interpolation;
    out.push(entry("baseline_dal", r, Arch::Dal, Variant::Base, true));
    out.push(entry("baseline_cnn_ed", r, Arch::CnnEd, Variant::Base, false));
    out.push(entry("baseline_fc_lstm", r, Arch::FcLstm, Variant::Base, false));
    out.push(entry("baseline_convlstm_st", r, Arch::ConvLstm, Variant::Base, true));
    out
}

pub fn registry_names() -> Vec<String> {
    registry().into_iter().map(|e| e.name).collect()
}

pub fn lookup(name: &str) -> Result<ExperimentSpec> {
    registry()
        .into_iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownExperiment {
            name: name.into(),
            available: registry_names(),
        })
}

pub const MATRICES: [&str; 4] = ["all-interp", "factors-interp", "all-forecast", "factors-forecast"];

/// Row sets of the comparison tables.
pub fn matrix(name: &str) -> Result<Vec<ExperimentSpec>> {
    let get = |n: &str| lookup(n);
    let baselines = ["baseline_dal", "baseline_cnn_ed", "baseline_fc_lstm"];
    match name {
        "all-interp" => ["interp_base", "baseline_dal", "baseline_cnn_ed", "baseline_fc_lstm", "baseline_convlstm_st"]
            .iter()
            .map(|n| get(n))
            .collect(),
        "factors-interp" => Variant::ALL.iter().map(|v| get(&format!("interp_{}", v.name()))).collect(),
        "all-forecast" => std::iter::once(get("forecast_base"))
            .chain(baselines.iter().map(|n| Ok(get(n)?.in_regime(Regime::Forecasting))))
            .collect(),
        "factors-forecast" => Variant::ALL.iter().map(|v| get(&format!("forecast_{}", v.name()))).collect(),
        _ => {
            let mut available: Vec<String> = MATRICES.iter().map(|s| s.to_string()).collect();
            available.extend(registry_names());
            Err(Error::UnknownExperiment {
                name: name.into(),
                available,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub scale: Scale,
    pub seed: u64,
    /// Window stride of the training set.
    pub train_stride: usize,
    /// Evenly spaced test windows used for spRMSE (0 = all).
    pub sp_rmse_windows: usize,
    pub sp_rmse: SpRmseOptions,
    pub variance_steps: usize,
    /// Overrides the scale's step count.
    pub steps: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            scale: Scale::Paper,
            seed: 0,
            train_stride: 1,
            sp_rmse_windows: 64,
            sp_rmse: SpRmseOptions::default(),
            variance_steps: 10,
            steps: None,
        }
    }
}

/// Channel indices a model config reads from `data`.
pub fn input_channels(data: &Dataset, config: &ModelConfig) -> Vec<usize> {
    match &config.input_groups {
        Some(groups) => data.layout.select(groups),
        None => (0..data.channels()).collect(),
    }
}

fn evenly_spaced(windows: &[SampleWindow], max: usize) -> Vec<SampleWindow> {
    if max == 0 || windows.len() <= max {
        return windows.to_vec();
    }
    (0..max).map(|i| windows[i * windows.len() / max]).collect()
}

/// Evaluates a trained model on the test split: RMSE with per-step
/// breakdown and the persistence reference, and for one-step models the
/// spRMSE and variance series.
pub fn evaluate(model: &Model<f32>, data: &Dataset, opts: &RunOptions) -> Result<EvalReport> {
    let started = Instant::now();
    let c = &model.config;
    let channels = input_channels(data, c);
    if channels.len() != c.in_channels {
        return Err(Error::Config(format!(
            "model expects {} input channels, dataset selection yields {}",
            c.in_channels,
            channels.len()
        )));
    }
    if (data.grid.rows, data.grid.cols) != c.grid {
        return Err(Error::Config(format!(
            "model grid {:?} differs from dataset grid {}x{}",
            c.grid, data.grid.rows, data.grid.cols
        )));
    }
    let test = data.test_windows(c.j, c.k, 1)?.windows;
    let pol = data.stats.pollutant();
    let scale = pol.max - pol.min;
    let samples = DatasetSamples::new(data, test.clone(), channels.clone());
    let rmse = evaluate_rmse(model, &samples, scale)?;
    let persistence = evaluate_rmse(&Persistence { k: c.k }, &samples, scale)?;
    let (sp, stations, variance) = if c.is_interpolation() {
        let subset = DatasetSamples::new(data, evenly_spaced(&test, opts.sp_rmse_windows), channels.clone());
        let sp = sp_rmse(model, &subset, opts.sp_rmse, scale)?;
        let var = variance_of_predictions(model, &samples, opts.variance_steps, scale, pol.min)?;
        (Some(sp.mean), sp.stations, var)
    } else {
        (None, Vec::new(), Default::default())
    };
    let names = data.layout.channels();
    Ok(EvalReport {
        version: REPORT_VERSION,
        experiment: None,
        arch: c.arch.name().into(),
        k: c.k,
        channels: channels.iter().map(|&i| names[i].name.clone()).collect(),
        rmse: rmse.rmse,
        per_step_rmse: rmse.per_step,
        persistence_rmse: persistence.rmse,
        sp_rmse: sp,
        sp_rmse_stations: stations,
        variance_series: variance.points,
        variance_truncated: variance.truncated,
        model: c.clone(),
        train: None,
        train_windows: data.train_windows(c.j, c.k, 1)?.windows.len(),
        test_windows: test.len(),
        final_loss: None,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Builds a model for `spec` on `data`.
pub fn build_model(spec: &ExperimentSpec, data: &Dataset, opts: &RunOptions) -> Result<(Model<f32>, TrainConfig)> {
    let grid = (data.grid.rows, data.grid.cols);
    let cin = data.layout.select(&spec.variant.groups()).len();
    let config = spec.model_config(grid, cin, opts.scale);
    let mut train = spec.train_config(opts.scale, opts.seed);
    if let Some(steps) = opts.steps {
        train.steps = steps;
    }
    let model = Model::new(config, &mut Init::seeded(sub_seed(opts.seed, "init")))?;
    Ok((model, train))
}

/// Trains an already built model on the training split.
pub fn train_model(model: &mut Model<f32>, data: &Dataset, cfg: &TrainConfig, stride: usize) -> Result<LossCurve> {
    let c = &model.config;
    let windows = data.train_windows(c.j, c.k, stride)?.windows;
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "no training windows of {} + {} hours in the training split",
            c.j, c.k
        )));
    }
    let channels = input_channels(data, c);
    let samples = DatasetSamples::new(data, windows, channels);
    fit(model, &samples, cfg)
}

/// Trains and evaluates one registry entry.
pub fn run_experiment(spec: &ExperimentSpec, data: &Dataset, opts: &RunOptions) -> Result<(Model<f32>, EvalReport)> {
    let started = Instant::now();
    let (mut model, train) = build_model(spec, data, opts)?;
    let curve = train_model(&mut model, data, &train, opts.train_stride)?;
    let mut report = evaluate(&model, data, opts)?;
    report.experiment = Some(spec.name.clone());
    report.train = Some(train);
    report.final_loss = curve.last();
    report.wall_clock_seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}
