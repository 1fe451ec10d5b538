//! The four forecasting architectures behind one [`Model`] type, the
//! spatiotemporal smoothness loss, and checkpoints.

mod cnn_ed;
mod dal;
mod encoder_forecaster;
mod fc_lstm;
mod st_loss;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cnn_ed::CnnEd;
pub use dal::{Autoencoder, Dal, Prepared as DalPrepared};
pub use encoder_forecaster::EncoderForecaster;
pub use fc_lstm::FcLstm;
pub use st_loss::{spatiotemporal_loss, st_pair_count};

use crate::error::{Error, Result};
use crate::pipeline::ChannelGroup;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{read_tensors, write_tensors, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    #[serde(rename = "convlstm")]
    ConvLstm,
    FcLstm,
    CnnEd,
    Dal,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ConvLstm => "convlstm",
            Arch::FcLstm => "fc_lstm",
            Arch::CnnEd => "cnn_ed",
            Arch::Dal => "dal",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convlstm" => Ok(Arch::ConvLstm),
            "fc_lstm" => Ok(Arch::FcLstm),
            "cnn_ed" => Ok(Arch::CnnEd),
            "dal" => Ok(Arch::Dal),
            _ => Err(Error::Config(format!(
                "unknown arch `{s}` (expected convlstm, fc_lstm, cnn_ed or dal)"
            ))),
        }
    }
}

fn default_hidden() -> usize {
    2000
}
fn default_true() -> bool {
    true
}
fn default_radius() -> usize {
    2
}
fn default_st_weight() -> f64 {
    0.1
}
fn default_fraction() -> f64 {
    1.0
}
fn default_pretrain_epochs() -> usize {
    20
}

/// Architecture and shape of a model. `K = 1` is interpolation, `K > 1`
/// prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub encoder_layers: usize,
    pub forecaster_layers: usize,
    /// Output channels per encoder layer (ConvLSTM, CNN-ED).
    #[serde(default)]
    pub channels: Vec<usize>,
    pub kernel: usize,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub grid: (usize, usize),
    pub in_channels: usize,
    #[serde(default)]
    pub use_st_loss: bool,
    #[serde(default = "default_st_weight")]
    pub st_loss_weight: f64,
    pub dropout: f64,
    pub l2_beta: f64,
    /// Layer width of FC-LSTM cells and DAL autoencoder layers.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Peephole connections in ConvLSTM cells.
    #[serde(default = "default_true")]
    pub peephole: bool,
    #[serde(default = "default_radius")]
    pub st_spatial_radius: usize,
    #[serde(default = "default_radius")]
    pub st_temporal_radius: usize,
    /// Fraction of cells entering the smoothness loss (1 = every cell).
    #[serde(default = "default_fraction")]
    pub st_cell_fraction: f64,
    #[serde(default = "default_pretrain_epochs")]
    pub pretrain_epochs: usize,
    /// Input channel groups the model was built for; `None` means every
    /// channel of the dataset.
    #[serde(default)]
    pub input_groups: Option<Vec<ChannelGroup>>,
}

impl ModelConfig {
    /// Interpolation ConvLSTM: 1 encoder + 1 forecaster layer, 64 channels,
    /// 3×3 kernels, one output step.
    pub fn convlstm_interp(grid: (usize, usize), in_channels: usize) -> Self {
        ModelConfig {
            arch: Arch::ConvLstm,
            encoder_layers: 1,
            forecaster_layers: 1,
            channels: vec![64],
            kernel: 3,
            j: 12,
            k: 1,
            grid,
            in_channels,
            use_st_loss: false,
            st_loss_weight: default_st_weight(),
            dropout: 0.5,
            l2_beta: 0.01,
            hidden: default_hidden(),
            peephole: true,
            st_spatial_radius: 2,
            st_temporal_radius: 2,
            st_cell_fraction: 1.0,
            pretrain_epochs: default_pretrain_epochs(),
            input_groups: None,
        }
    }

    /// Prediction ConvLSTM: 3 + 3 layers with (16, 16, 32) channels, 12 → 12.
    pub fn convlstm_forecast(grid: (usize, usize), in_channels: usize) -> Self {
        ModelConfig {
            encoder_layers: 3,
            forecaster_layers: 3,
            channels: vec![16, 16, 32],
            k: 12,
            ..Self::convlstm_interp(grid, in_channels)
        }
    }

    /// Three stacked LSTM cells of width 2000.
    pub fn fc_lstm(grid: (usize, usize), in_channels: usize, k: usize) -> Self {
        ModelConfig {
            arch: Arch::FcLstm,
            encoder_layers: 3,
            forecaster_layers: 0,
            channels: vec![],
            k,
            ..Self::convlstm_interp(grid, in_channels)
        }
    }

    /// Convolutional encoder and deconvolutional decoder, 1 + 1 layers of
    /// 64 channels for interpolation, 3 + 3 with (16, 16, 32) for prediction.
    pub fn cnn_ed(grid: (usize, usize), in_channels: usize, k: usize) -> Self {
        let base = if k == 1 {
            Self::convlstm_interp(grid, in_channels)
        } else {
            Self::convlstm_forecast(grid, in_channels)
        };
        ModelConfig { arch: Arch::CnnEd, k, ..base }
    }

    /// Semi-supervised autoencoder regressor: 4 layers of width 2000 with
    /// the smoothness loss. Prediction uses 24 input hours.
    pub fn dal(grid: (usize, usize), in_channels: usize, k: usize) -> Self {
        ModelConfig {
            arch: Arch::Dal,
            encoder_layers: 4,
            forecaster_layers: 0,
            channels: vec![],
            j: if k == 1 { 12 } else { 24 },
            k,
            use_st_loss: true,
            ..Self::convlstm_interp(grid, in_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.j == 0 || self.k == 0 {
            return bad(format!("J and K must be >= 1 (J={}, K={})", self.j, self.k));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.in_channels == 0 {
            return bad("grid extents and in_channels must be >= 1".into());
        }
        if self.encoder_layers == 0 {
            return bad("encoder_layers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        for (name, v) in [("l2_beta", self.l2_beta), ("st_loss_weight", self.st_loss_weight)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.st_cell_fraction > 0.0 && self.st_cell_fraction <= 1.0) {
            return bad(format!("st_cell_fraction must lie in (0, 1], got {}", self.st_cell_fraction));
        }
        if self.use_st_loss && self.st_spatial_radius > 0 && self.st_spatial_radius >= self.grid.0.max(self.grid.1) {
            return bad(format!(
                "spatial neighbour radius {} exceeds the {}x{} grid",
                self.st_spatial_radius, self.grid.0, self.grid.1
            ));
        }
        match self.arch {
            Arch::ConvLstm | Arch::CnnEd => {
                if self.channels.len() != self.encoder_layers {
                    return bad(format!(
                        "channels has {} entries for {} encoder layers",
                        self.channels.len(),
                        self.encoder_layers
                    ));
                }
                if self.channels.contains(&0) {
                    return bad("channel counts must be >= 1".into());
                }
                if self.kernel % 2 == 0 {
                    return bad(format!("kernel must be odd, got {}", self.kernel));
                }
                if self.forecaster_layers != self.encoder_layers {
                    return bad(format!(
                        "forecaster_layers ({}) must equal encoder_layers ({})",
                        self.forecaster_layers, self.encoder_layers
                    ));
                }
            }
            Arch::FcLstm | Arch::Dal => {
                if self.hidden == 0 {
                    return bad("hidden must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn is_interpolation(&self) -> bool {
        self.k == 1
    }
}

/// Inverted dropout on non-recurrent connections.
#[derive(Debug)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, rng: ChaCha8Rng) -> Self {
        Dropout { rate, rng }
    }

    pub fn apply<T: Real>(&mut self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let scale = T::of(1.0 / keep);
        let shape = tape.shape(x).to_vec();
        let rng = &mut self.rng;
        let mask = Tensor::from_fn(shape, |_| {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        tape.mul_const(x, mask)
    }
}

pub(crate) fn maybe_drop<T: Real>(tape: &mut Tape<T>, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(tape, x),
        None => Ok(x),
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Net {
    Ef(EncoderForecaster),
    Fc(FcLstm),
    Cnn(CnnEd),
    Dal(Dal),
}

/// Parameters bound to a tape with per-pass preprocessing (fused gates)
/// done once and shared by every sample recorded on it.
pub enum Prepared {
    Ef(encoder_forecaster::Prepared),
    Fc(fc_lstm::Prepared),
    Cnn(cnn_ed::Prepared),
    Dal(dal::Prepared),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    net: Net,
    /// DAL only: the encoder carries pretrained autoencoder weights.
    pub pretrained: bool,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let net = match config.arch {
            Arch::ConvLstm => Net::Ef(EncoderForecaster::register(&mut params, &config, init)?),
            Arch::FcLstm => Net::Fc(FcLstm::register(&mut params, &config, init)),
            Arch::CnnEd => Net::Cnn(CnnEd::register(&mut params, &config, init)),
            Arch::Dal => Net::Dal(Dal::register(&mut params, &config, init)),
        };
        Ok(Model {
            pretrained: config.arch != Arch::Dal,
            config,
            params,
            net,
        })
    }

    pub fn prepare(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Prepared> {
        Ok(match &self.net {
            Net::Ef(n) => Prepared::Ef(n.prepare(tape, bound)?),
            Net::Fc(n) => Prepared::Fc(n.prepare(tape, bound)?),
            Net::Cnn(n) => Prepared::Cnn(n.prepare(bound)),
            Net::Dal(n) => Prepared::Dal(n.prepare(bound)),
        })
    }

    /// Records one sample: `inputs` are `J` frames `[C_in, M, N]`, the result
    /// is `[K, M, N]`. Dropout is active only when given.
    pub fn run(
        &self,
        tape: &mut Tape<T>,
        prepared: &Prepared,
        inputs: &[Var],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var> {
        let c = &self.config;
        if inputs.len() != c.j {
            return Err(Error::dim("model inputs", &[inputs.len()], &[c.j]));
        }
        let want = [c.in_channels, c.grid.0, c.grid.1];
        for &x in inputs {
            if tape.shape(x) != want {
                return Err(Error::dim("model input frame", tape.shape(x), &want));
            }
        }
        match (&self.net, prepared) {
            (Net::Ef(n), Prepared::Ef(p)) => n.run(tape, p, inputs, &mut dropout),
            (Net::Fc(n), Prepared::Fc(p)) => n.run(tape, p, inputs, &mut dropout),
            (Net::Cnn(n), Prepared::Cnn(p)) => n.run(tape, p, inputs, &mut dropout),
            (Net::Dal(n), Prepared::Dal(p)) => n.run(tape, p, inputs, &mut dropout),
            _ => Err(Error::Contract("prepared parameters belong to another architecture".into())),
        }
    }

    /// Inference on plain tensors.
    pub fn predict(&self, inputs: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let prepared = self.prepare(&mut tape, &bound)?;
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = self.run(&mut tape, &prepared, &xs, None)?;
        Ok(tape.value(out).clone())
    }

    /// Biases that set the output level before any training signal.
    pub fn output_bias(&self) -> ParamId {
        match &self.net {
            Net::Ef(n) => n.head_b,
            Net::Fc(n) => n.fc_b,
            Net::Cnn(n) => n.output_bias(),
            Net::Dal(n) => n.head_b,
        }
    }

    pub fn set_output_bias(&mut self, value: f64) {
        let id = self.output_bias();
        self.params.get_mut(id).data_mut().iter_mut().for_each(|b| *b = T::of(value));
    }

    pub fn dal(&self) -> Option<&Dal> {
        match &self.net {
            Net::Dal(d) => Some(d),
            _ => None,
        }
    }

    /// DAL fine-tuning needs a restored autoencoder encoder.
    pub fn require_pretrained(&self) -> Result<()> {
        if self.pretrained {
            Ok(())
        } else {
            Err(Error::State(
                "DAL fine-tuning requested without a pretrained autoencoder checkpoint".into(),
            ))
        }
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
            pretrained: self.pretrained,
        }
    }
}

pub const CHECKPOINT_TENSORS: &str = "model.gtsr";
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub arch: Arch,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    pub step: usize,
    pub pretrained: bool,
}

impl Model<f32> {
    /// Writes `model.gtsr` and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, step: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CHECKPOINT_TENSORS);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let refs: Vec<&Tensor<f32>> = self.params.tensors().iter().collect();
        write_tensors(&mut w, &refs).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            arch: self.config.arch,
            config: self.config.clone(),
            tensors: self
                .params
                .ids()
                .map(|id| TensorEntry {
                    name: self.params.name(id).to_string(),
                    shape: self.params.get(id).shape().to_vec(),
                })
                .collect(),
            step,
            pretrained: self.pretrained,
        };
        crate::pipeline::write_json(&dir.join(CHECKPOINT_MANIFEST), &manifest)
    }

    /// Loads a checkpoint directory, returning the model and its step.
    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("checkpoint `{}` does not exist", dir.display())));
        }
        let manifest: CheckpointManifest = crate::pipeline::read_json(&dir.join(CHECKPOINT_MANIFEST))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {} is not supported",
                manifest.version
            )));
        }
        let mut model = Model::new(manifest.config.clone(), &mut Init::Zeros)?;
        let names_match = model.params.len() == manifest.tensors.len()
            && model
                .params
                .names()
                .iter()
                .zip(&manifest.tensors)
                .all(|(a, b)| *a == b.name);
        if !names_match {
            return Err(Error::Integrity("checkpoint tensor names do not match the architecture".into()));
        }
        let path = dir.join(CHECKPOINT_TENSORS);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let tensors = read_tensors(&mut BufReader::new(file))?;
        model.params.load(tensors)?;
        model.pretrained = manifest.pretrained;
        Ok((model, manifest.step))
    }
}
