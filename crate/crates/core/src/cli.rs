//! `gridcast` command line: simulate, rasterize, train, evaluate,
//! experiment and export-heatmap. Every command writes one `run.json`
//! manifest into its output directory.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::{
    self, evaluate, input_channels, lookup, matrix, preset, ExperimentSpec, RunOptions, Scale, Variant,
};
use crate::metrics::SpRmseOptions;
use crate::models::{Arch, Model, ModelConfig};
use crate::params::Init;
use crate::pipeline::{build_dataset, read_csv, read_json, write_json, Dataset, RasterConfig};
use crate::report::{export_heatmap, write_loss_curve, EvalReport, LOSS_FILE, REPORT_FILE};
use crate::seeds::sub_seed;
use crate::synth::{simulate, WorldConfig};
use crate::train::{pretrain_dal, train, DatasetSamples, OptimizerKind, Schedule, TrainConfig};

pub const RUN_MANIFEST: &str = "run.json";
pub const RASTER_FILE: &str = "raster.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const THREADS_ENV: &str = "GRIDCAST_THREADS";

#[derive(Debug, Parser)]
#[command(name = "gridcast", version, about = "Citywide pollution grids: simulate, rasterize, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the synthetic city and write sensors.csv, truth/ and raster.json.
    Simulate(SimulateArgs),
    /// Turn a sensor CSV into a normalized dataset bundle.
    Rasterize(RasterizeArgs),
    /// Train a model on a bundle and write a checkpoint and loss curve.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split of a bundle.
    Evaluate(EvaluateArgs),
    /// Train and evaluate a registry entry or a whole comparison matrix.
    Experiment(ExperimentArgs),
    /// Write PGM and CSV heatmaps of one frame or one prediction.
    ExportHeatmap(HeatmapArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Default,
    Benchmark,
    Tiny,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// World configuration JSON; defaults to the chosen preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hours: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RasterizeArgs {
    pub csv: PathBuf,
    /// Raster configuration (grid, channel layout, optional split boundary).
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub j: Option<usize>,
    /// Comma-separated layer channels.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Input factor set; all dataset channels when omitted.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub st_loss: Option<bool>,
    #[arg(long, default_value = "paper")]
    pub scale: Scale,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerFlag {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScheduleFlag {
    Constant,
    Cosine,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerFlag>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleFlag>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub bundle: PathBuf,
    /// Full model configuration; flags override its fields.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Training configuration; flags override its fields.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[command(flatten)]
    pub model_flags: ModelFlags,
    #[command(flatten)]
    pub train_flags: TrainFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    /// Zero a left-out station only in the last input frame.
    #[arg(long)]
    pub sprmse_last_frame_only: bool,
    /// Evenly spaced test windows used for spRMSE (0 = all).
    #[arg(long, default_value_t = 64)]
    pub sprmse_windows: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub bundle: PathBuf,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Registry entry or matrix name.
    pub name: String,
    /// Dataset bundle; the synthetic benchmark city when omitted.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "paper")]
    pub scale: Scale,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[command(flatten)]
    pub eval: EvalFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    pub bundle: PathBuf,
    /// Export the prediction of this checkpoint instead of an observed frame.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Hour index of the observed frame, or test window index with a checkpoint.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: Vec<String>,
    pub seed: Option<u64>,
    /// Hash of the effective configuration after flag overrides.
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    /// Files written into the output directory, relative to it.
    pub artifacts: Vec<FileHash>,
    pub timing_seconds: f64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join(RUN_MANIFEST))
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut file = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut h = Sha256::new();
    std::io::copy(&mut file, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    if root.is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn hash_inputs(paths: &[&Path]) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    for p in paths {
        for f in files_under(p)? {
            if f.file_name().is_some_and(|n| n == RUN_MANIFEST) {
                continue;
            }
            out.push(FileHash {
                path: f.display().to_string(),
                sha256: sha256_file(&f)?,
            });
        }
    }
    Ok(out)
}

fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}

struct Run {
    started: Instant,
    command: Vec<String>,
}

impl Run {
    fn finish<T: Serialize>(self, out: &Path, seed: Option<u64>, config: &T, inputs: &[&Path]) -> Result<()> {
        let mut artifacts = Vec::new();
        for f in files_under(out)? {
            if f.file_name().is_some_and(|n| n == RUN_MANIFEST) {
                continue;
            }
            let rel = f.strip_prefix(out).unwrap_or(&f);
            artifacts.push(FileHash {
                path: rel.display().to_string(),
                sha256: sha256_file(&f)?,
            });
        }
        let manifest = RunManifest {
            version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            seed,
            config_hash: config_hash(config)?,
            inputs: hash_inputs(inputs)?,
            artifacts,
            timing_seconds: self.started.elapsed().as_secs_f64(),
        };
        write_json(&out.join(RUN_MANIFEST), &manifest)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_path(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} `{}` does not exist", path.display())))
    }
}

fn cmd_simulate(a: &SimulateArgs, run: Run) -> Result<()> {
    let mut world = match &a.config {
        Some(p) => read_json(p)?,
        None => match a.preset {
            Preset::Default => WorldConfig::default(),
            Preset::Benchmark => WorldConfig::benchmark(),
            Preset::Tiny => WorldConfig::tiny(),
        },
    };
    if let Some(s) = a.seed {
        world.seed = s;
    }
    if let Some(h) = a.hours {
        world.hours = h;
    }
    world.validate()?;
    let sim = simulate(&world)?;
    create_dir(&a.out)?;
    sim.export(&a.out)?;
    write_json(&a.out.join(RASTER_FILE), &world.raster_config()?)?;
    eprintln!(
        "{} stations, {} records over {} hours",
        sim.stations.len(),
        sim.records.len(),
        sim.hours.len()
    );
    let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    run.finish(&a.out, Some(world.seed), &world, &inputs)
}

fn load_records(path: &Path) -> Result<Vec<crate::pipeline::SensorRecord>> {
    require_path(path, "sensor CSV")?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file))
}

fn cmd_rasterize(a: &RasterizeArgs, run: Run) -> Result<()> {
    require_path(&a.spec, "raster spec")?;
    let config: RasterConfig = read_json(&a.spec)?;
    let records = load_records(&a.csv)?;
    let data = build_dataset(&records, &config)?;
    let r = &data.report;
    eprintln!(
        "{} records used, {} outside the bounding box, {} external; {} hours x {} channels",
        r.records,
        r.outside_bbox,
        r.external_records,
        r.hours,
        data.channels()
    );
    if !r.degenerate_channels.is_empty() {
        eprintln!("constant channels (normalized to 0): {}", r.degenerate_channels.join(", "));
    }
    data.save(&a.out)?;
    run.finish(&a.out, None, &config, &[&a.csv, &a.spec])
}

fn load_bundle(path: &Path) -> Result<Dataset> {
    require_path(path, "dataset bundle")?;
    Dataset::load(path)
}

/// Effective model configuration: file or preset, then flag overrides.
pub fn resolve_model(data: &Dataset, file: Option<&Path>, f: &ModelFlags) -> Result<ModelConfig> {
    let grid = (data.grid.rows, data.grid.cols);
    let mut c = match file {
        Some(p) => read_json::<ModelConfig>(p)?,
        None => preset(
            f.arch.unwrap_or(Arch::ConvLstm),
            f.k.unwrap_or(1),
            grid,
            data.channels(),
            f.scale,
        ),
    };
    if file.is_some() {
        if let Some(arch) = f.arch {
            c.arch = arch;
        }
        if let Some(k) = f.k {
            c.k = k;
        }
    }
    if let Some(j) = f.j {
        c.j = j;
    }
    if let Some(ch) = &f.channels {
        c.channels = ch.clone();
    }
    if let Some(k) = f.kernel {
        c.kernel = k;
    }
    if let Some(h) = f.hidden {
        c.hidden = h;
    }
    if let Some(st) = f.st_loss {
        c.use_st_loss = st;
    }
    if let Some(v) = f.variant {
        c.input_groups = Some(v.groups());
    }
    c.grid = grid;
    c.in_channels = input_channels(data, &c).len();
    c.validate()?;
    Ok(c)
}

/// Effective training configuration: file or the scale's defaults, then
/// flag overrides.
pub fn resolve_train(file: Option<&Path>, f: &TrainFlags, model: &ModelConfig, scale: Scale) -> Result<TrainConfig> {
    let mut t = match file {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => {
            let spec = ExperimentSpec {
                name: String::new(),
                regime: experiment::Regime::Interpolation,
                arch: model.arch,
                variant: Variant::All,
                st_loss: model.use_st_loss,
            };
            spec.train_config(scale, 0)
        }
    };
    if let Some(v) = f.lr {
        t.learning_rate = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.steps {
        t.steps = v;
    }
    if let Some(v) = f.l2 {
        t.l2_beta = v;
    }
    if let Some(v) = f.dropout {
        t.dropout = v;
    }
    if let Some(o) = f.optimizer {
        t.optimizer = match o {
            OptimizerFlag::Sgd => OptimizerKind::Sgd,
            OptimizerFlag::Adam => OptimizerKind::default(),
        };
    }
    if let Some(s) = f.schedule {
        t.schedule = match s {
            ScheduleFlag::Constant => Schedule::Constant,
            ScheduleFlag::Cosine => Schedule::Cosine,
        };
    }
    if let Some(s) = f.seed {
        t.seed = s;
    }
    t.validate()?;
    Ok(t)
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn cmd_train(a: &TrainArgs, run: Run) -> Result<()> {
    let data = load_bundle(&a.bundle)?;
    let model_cfg = resolve_model(&data, a.model.as_deref(), &a.model_flags)?;
    let train_cfg = resolve_train(a.train.as_deref(), &a.train_flags, &model_cfg, a.model_flags.scale)?;
    let mut model = Model::new(model_cfg.clone(), &mut Init::seeded(sub_seed(train_cfg.seed, "init")))?;
    let windows = data.train_windows(model_cfg.j, model_cfg.k, 1)?;
    if windows.windows.is_empty() {
        return Err(Error::Config(format!(
            "bundle has no training windows of {} + {} hours",
            model_cfg.j, model_cfg.k
        )));
    }
    let samples = DatasetSamples::new(&data, windows.windows, input_channels(&data, &model_cfg));
    create_dir(&a.out)?;
    if model_cfg.arch == Arch::Dal {
        let curve = pretrain_dal(&mut model, &samples, &train_cfg)?;
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in curve.iter().enumerate() {
            csv.push_str(&format!("{i},{l:.8}\n"));
        }
        let p = a.out.join("pretrain.csv");
        std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    }
    let curve = train(&mut model, &samples, &train_cfg)?;
    model.save(&a.out, train_cfg.steps)?;
    write_loss_curve(&a.out.join(LOSS_FILE), &curve)?;
    if let (Some(first), Some(last)) = (curve.initial(), curve.last()) {
        eprintln!("{} steps: loss {first:.6} -> {last:.6}", curve.loss.len());
    }
    let mut inputs: Vec<&Path> = vec![&a.bundle];
    inputs.extend(a.model.as_deref());
    inputs.extend(a.train.as_deref());
    let record = TrainRecord {
        model: &model_cfg,
        train: &train_cfg,
    };
    run.finish(&a.out, Some(train_cfg.seed), &record, &inputs)
}

fn run_options(eval: &EvalFlags, scale: Scale, seed: u64, steps: Option<usize>) -> RunOptions {
    RunOptions {
        scale,
        seed,
        sp_rmse_windows: eval.sprmse_windows,
        sp_rmse: SpRmseOptions {
            last_frame_only: eval.sprmse_last_frame_only,
            channel: 0,
        },
        steps,
        ..RunOptions::default()
    }
}

/// Prediction heatmaps of one test window, one file pair per output step.
fn prediction_heatmaps(model: &Model<f32>, data: &Dataset, index: usize, out: &Path) -> Result<()> {
    let c = &model.config;
    let test = data.test_windows(c.j, c.k, 1)?.windows;
    let w = test.get(index).ok_or_else(|| {
        Error::Config(format!("test window {index} out of range ({} windows)", test.len()))
    })?;
    let pred = model.predict(&data.inputs(w, &input_channels(data, c)))?;
    for step in 0..c.k {
        export_heatmap(out, &format!("pred_step{:02}", step + 1), &pred.index0(step))?;
    }
    Ok(())
}

fn print_report(r: &EvalReport) {
    let sp = r.sp_rmse.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<22} {:<9} K={:<3} rmse {:>8.4}  sp_rmse {:>8}  persistence {:>8.4}",
        r.experiment.as_deref().unwrap_or("-"),
        r.arch,
        r.k,
        r.rmse,
        sp,
        r.persistence_rmse
    );
}

fn cmd_evaluate(a: &EvaluateArgs, run: Run) -> Result<()> {
    require_path(&a.checkpoint, "checkpoint")?;
    let data = load_bundle(&a.bundle)?;
    let (model, _) = Model::load(&a.checkpoint)?;
    let opts = run_options(&a.eval, Scale::Paper, 0, None);
    let report = evaluate(&model, &data, &opts)?;
    create_dir(&a.out)?;
    report.save(&a.out.join(REPORT_FILE))?;
    prediction_heatmaps(&model, &data, 0, &a.out.join("heatmaps"))?;
    print_report(&report);
    run.finish(&a.out, None, &opts, &[&a.checkpoint, &a.bundle])
}

fn cmd_experiment(a: &ExperimentArgs, run: Run) -> Result<()> {
    let rows = match lookup(&a.name) {
        Ok(spec) => vec![spec],
        Err(_) => matrix(&a.name)?,
    };
    let data = match &a.data {
        Some(p) => load_bundle(p)?,
        None => {
            let mut world = WorldConfig::benchmark();
            world.seed = a.seed;
            simulate(&world)?.dataset()?
        }
    };
    let opts = run_options(&a.eval, a.scale, a.seed, a.steps);
    create_dir(&a.out)?;
    let mut table = String::from("experiment,arch,K,rmse,sp_rmse,persistence_rmse\n");
    for spec in &rows {
        let (_, mut report) = experiment::run_experiment(spec, &data, &opts)?;
        // Matrix rows evaluated in another regime keep distinct file names.
        let name = if lookup(&spec.name)?.regime == spec.regime {
            spec.name.clone()
        } else {
            format!("{}_k{}", spec.name, report.k)
        };
        report.experiment = Some(name.clone());
        report.save(&a.out.join(format!("{name}.json")))?;
        print_report(&report);
        table.push_str(&format!(
            "{name},{},{},{:.6},{},{:.6}\n",
            report.arch,
            report.k,
            report.rmse,
            report.sp_rmse.map(|v| format!("{v:.6}")).unwrap_or_default(),
            report.persistence_rmse
        ));
    }
    let p = a.out.join("table.csv");
    std::fs::write(&p, table).map_err(|e| Error::io(&p, e))?;
    let inputs: Vec<&Path> = a.data.iter().map(|p| p.as_path()).collect();
    run.finish(&a.out, Some(a.seed), &(&a.name, &opts), &inputs)
}

fn cmd_heatmap(a: &HeatmapArgs, run: Run) -> Result<()> {
    let data = load_bundle(&a.bundle)?;
    create_dir(&a.out)?;
    let mut inputs: Vec<&Path> = vec![&a.bundle];
    match &a.checkpoint {
        Some(ck) => {
            require_path(ck, "checkpoint")?;
            let (model, _) = Model::load(ck)?;
            prediction_heatmaps(&model, &data, a.index, &a.out)?;
            inputs.push(ck);
        }
        None => {
            let frame = data.frames.get(a.index).ok_or_else(|| {
                Error::Config(format!("hour {} out of range ({} hours)", a.index, data.len()))
            })?;
            export_heatmap(&a.out, &format!("observed_{:05}", a.index), &frame.index0(0))?;
        }
    }
    run.finish(&a.out, None, &a.index, &inputs)
}

/// Caps rayon's global pool from `GRIDCAST_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A pool built earlier in the process keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli, command: Vec<String>) -> Result<()> {
    configure_threads()?;
    let run = Run {
        started: Instant::now(),
        command,
    };
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, run),
        Command::Rasterize(a) => cmd_rasterize(a, run),
        Command::Train(a) => cmd_train(a, run),
        Command::Evaluate(a) => cmd_evaluate(a, run),
        Command::Experiment(a) => cmd_experiment(a, run),
        Command::ExportHeatmap(a) => cmd_heatmap(a, run),
    }
}

/// Parses `args`, runs the command and returns the process exit code:
/// 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let command = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}
