//! Optimization: training configuration, optimizers, sample sources, the
//! minibatch training loop and DAL autoencoder pretraining.

mod optim;
mod samples;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use samples::{DatasetSamples, Sample, Samples};

use crate::error::{Error, Result};
use crate::models::{spatiotemporal_loss, st_pair_count, Arch, Autoencoder, Dropout, Model};
use crate::params::{Init, ParamStore};
use crate::seeds::{sub_rng, sub_seed};
use crate::tensor::{Tape, Tensor, Var};

fn d_lr() -> f64 {
    0.001
}
fn d_batch() -> usize {
    128
}
fn d_steps() -> usize {
    200
}
fn d_l2() -> f64 {
    0.01
}
fn d_dropout() -> f64 {
    0.5
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Minibatch steps.
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_l2")]
    pub l2_beta: f64,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub seed: u64,
    /// Start the output bias at the mean training target.
    #[serde(default = "d_true")]
    pub init_output_bias: bool,
    /// Rescale gradients whose global norm exceeds this value.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            steps: d_steps(),
            l2_beta: d_l2(),
            dropout: d_dropout(),
            optimizer: OptimizerKind::default(),
            schedule: Schedule::Constant,
            seed: 0,
            init_output_bias: true,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.l2_beta.is_finite() && self.l2_beta >= 0.0) {
            return bad(format!("l2_beta must be finite and >= 0, got {}", self.l2_beta));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    /// Total objective per step, evaluated before that step's update.
    pub loss: Vec<f64>,
    /// Masked data term alone.
    pub data_loss: Vec<f64>,
}

impl LossCurve {
    pub fn initial(&self) -> Option<f64> {
        self.loss.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.loss.last().copied()
    }

    /// `step,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.loss.iter().enumerate() {
            s.push_str(&format!("{i},{l:.8}\n"));
        }
        s
    }
}

/// Mean normalized target over masked cells of all samples.
fn mean_target(data: &dyn Samples) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0.0f64);
    for i in 0..data.len() {
        let s = data.get(i);
        for (t, m) in s.target.data().iter().zip(s.mask.data()) {
            sum += (*t as f64) * (*m as f64);
            n += *m as f64;
        }
    }
    if n > 0.0 {
        sum / n
    } else {
        0.0
    }
}

/// Fixed cell subset for the smoothness loss when only a fraction of cells
/// take part. Station cells always stay in.
fn st_active(model: &Model<f32>, seed: u64) -> Option<Tensor<f32>> {
    let c = &model.config;
    if c.st_cell_fraction >= 1.0 {
        return None;
    }
    let mut rng = sub_rng(seed, "st-cells");
    let (m, n) = c.grid;
    Some(Tensor::from_fn(vec![m, n], |_| {
        if rng.random::<f64>() < c.st_cell_fraction {
            1.0
        } else {
            0.0
        }
    }))
}

struct SampleGrad {
    grads: Vec<Tensor<f32>>,
    data: f64,
    st: f64,
}

/// Records one sample and returns its contribution to the batch objective
/// (data term already divided by the batch's mask count).
fn sample_grad(
    model: &Model<f32>,
    sample: &Sample,
    mask_total: f64,
    batch: usize,
    st: Option<(&Option<Tensor<f32>>, f64)>,
    dropout: Option<Dropout>,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let prepared = model.prepare(&mut tape, &bound)?;
    let xs: Vec<Var> = sample.inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let mut dropout = dropout;
    let pred = model.run(&mut tape, &prepared, &xs, dropout.as_mut())?;
    let target = tape.constant(sample.target.clone());
    let diff = tape.sub(pred, target)?;
    let masked = tape.mul_const(diff, sample.mask.clone())?;
    let sse = tape.sum_squares(masked);
    let data = tape.scale(sse, (1.0 / mask_total) as f32);
    let mut loss = data;
    let mut st_value = 0.0;
    if let Some((active, weight)) = st {
        let c = &model.config;
        let raw = spatiotemporal_loss(&mut tape, pred, c.st_spatial_radius, c.st_temporal_radius, active.as_ref())?;
        let active64 = active.as_ref().map(|a| a.cast::<f64>());
        let pairs = st_pair_count(
            [c.k, c.grid.0, c.grid.1],
            c.st_spatial_radius,
            c.st_temporal_radius,
            active64.as_ref(),
        )?
        .max(1);
        let per_pair = tape.scale(raw, (1.0 / (pairs * batch) as f64) as f32);
        st_value = tape.value(per_pair).item()? as f64;
        let weighted = tape.scale(per_pair, weight as f32);
        loss = tape.add(loss, weighted)?;
    }
    let grads = tape.backward(loss)?;
    Ok(SampleGrad {
        grads: bound.vars().iter().map(|&v| grads.wrt(&tape, v)).collect(),
        data: tape.value(data).item()? as f64,
        st: st_value,
    })
}

fn check_grads(store: &ParamStore<f32>, grads: &[Tensor<f32>], step: usize) -> Result<()> {
    for (id, g) in store.ids().zip(grads) {
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of `{}` at step {step}",
                store.name(id)
            )));
        }
    }
    Ok(())
}

/// L2 term value and gradients added in place.
fn add_l2(store: &ParamStore<f32>, grads: &mut [Tensor<f32>], beta: f64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let mut total = 0.0f64;
    for (id, g) in store.ids().zip(grads.iter_mut()) {
        if !store.decays(id) {
            continue;
        }
        let w = store.get(id);
        for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
            *gv += (2.0 * beta) as f32 * wv;
            total += (wv as f64) * (wv as f64);
        }
    }
    beta * total
}

fn clip(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm: f64 = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
    }
}

/// Gradient and objective of one minibatch, exposed for tests and tools.
pub fn batch_gradient(
    model: &Model<f32>,
    data: &dyn Samples,
    indices: &[usize],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Vec<Tensor<f32>>, f64, f64)> {
    let samples: Vec<Sample> = indices.iter().map(|&i| data.get(i)).collect();
    for (&i, s) in indices.iter().zip(&samples) {
        for (t, x) in s.inputs.iter().enumerate() {
            if x.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("input frame {t} of window {i} at step {step}")));
            }
        }
        if s.target.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("target of window {i} at step {step}")));
        }
    }
    let mask_total: f64 = samples.iter().map(|s| s.mask.sum() as f64).sum();
    if mask_total == 0.0 {
        return Err(Error::Contract(format!("minibatch at step {step} has an empty station mask")));
    }
    let active = st_active(model, cfg.seed);
    let st = model
        .config
        .use_st_loss
        .then_some((&active, model.config.st_loss_weight));
    let batch = samples.len();
    let parts: Vec<SampleGrad> = samples
        .par_iter()
        .enumerate()
        .map(|(b, s)| {
            let dropout = (cfg.dropout > 0.0).then(|| {
                let seed = sub_seed(cfg.seed, "dropout") ^ ((step as u64) << 20) ^ b as u64;
                Dropout::new(cfg.dropout, rand::SeedableRng::seed_from_u64(seed))
            });
            sample_grad(model, s, mask_total, batch, st, dropout)
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let first = iter.next().expect("non-empty batch");
    let (mut grads, mut data_loss, mut st_loss) = (first.grads, first.data, first.st);
    for p in iter {
        for (g, pg) in grads.iter_mut().zip(&p.grads) {
            g.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b);
        }
        data_loss += p.data;
        st_loss += p.st;
    }
    let total = data_loss + model.config.st_loss_weight * st_loss * model.config.use_st_loss as u8 as f64;
    Ok((grads, data_loss, total))
}

/// Minibatch training. The objective is the masked mean squared error on
/// normalized targets, plus `l2_beta · Σ‖W‖²` over weights, plus the
/// weighted per-pair smoothness term when the model enables it.
pub fn train(model: &mut Model<f32>, data: &dyn Samples, cfg: &TrainConfig) -> Result<LossCurve> {
    cfg.validate()?;
    if data.len() == 0 {
        return Err(Error::Contract("training needs at least one window".into()));
    }
    if model.config.arch == Arch::Dal {
        model.require_pretrained()?;
    }
    if cfg.init_output_bias {
        model.set_output_bias(mean_target(data));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params);
    let mut shuffle = sub_rng(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut curve = LossCurve::default();
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut shuffle);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (mut grads, data_loss, objective) = batch_gradient(model, data, &batch, cfg, step)?;
        let l2 = add_l2(&model.params, &mut grads, cfg.l2_beta);
        let loss = objective + l2;
        if !loss.is_finite() {
            let culprit = model
                .params
                .ids()
                .zip(&grads)
                .find(|(_, g)| g.data().iter().any(|v| !v.is_finite()))
                .map(|(id, _)| model.params.name(id).to_string());
            return Err(Error::NonFinite(match culprit {
                Some(name) => format!("training loss at step {step} (first non-finite gradient: `{name}`)"),
                None => format!("training loss at step {step}"),
            }));
        }
        check_grads(&model.params, &grads, step)?;
        if let Some(c) = cfg.clip_norm {
            clip(&mut grads, c);
        }
        curve.loss.push(loss);
        curve.data_loss.push(data_loss);
        opt.set_learning_rate(cfg.schedule.rate(cfg.learning_rate, step, cfg.steps));
        opt.step(&mut model.params, &grads);
        for id in model.params.ids() {
            if model.params.get(id).data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter `{}` after step {step}",
                    model.params.name(id)
                )));
            }
        }
    }
    Ok(curve)
}

/// Per-cell feature columns of up to `max_windows` samples, concatenated.
fn autoencoder_batches(model: &Model<f32>, data: &dyn Samples, max_windows: usize) -> Result<Vec<Tensor<f32>>> {
    let dal = model.dal().expect("DAL model");
    let take = data.len().min(max_windows.max(1));
    let stride = (data.len() / take).max(1);
    (0..take)
        .map(|w| {
            let s = data.get(w * stride);
            let mut tape = Tape::<f32>::new();
            let xs: Vec<Var> = s.inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let f = dal.features(&mut tape, &xs)?;
            Ok(tape.value(f).clone())
        })
        .collect()
}

/// Pretrains the DAL encoder as the first half of an autoencoder on cell
/// feature vectors (mean squared reconstruction error), then keeps the
/// encoder weights. One epoch is a pass over the feature columns of up to
/// 32 evenly spaced training windows. Returns the reconstruction loss per
/// epoch.
pub fn pretrain_dal(model: &mut Model<f32>, data: &dyn Samples, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let dal = model
        .dal()
        .cloned()
        .ok_or_else(|| Error::Config("autoencoder pretraining applies to the dal arch only".into()))?;
    if model.config.pretrain_epochs == 0 {
        return Ok(Vec::new());
    }
    if data.len() == 0 {
        return Err(Error::Contract("pretraining needs at least one window".into()));
    }
    let mut ae: Autoencoder<f32> = Autoencoder::new(&dal, &mut Init::seeded(sub_seed(cfg.seed, "ae-init")));
    let blocks = autoencoder_batches(model, data, 32)?;
    let n_enc = model.params.len();
    // One joint store so a single optimizer covers encoder and decoder.
    let mut joint = model.params.clone();
    for id in ae.params.ids() {
        joint.add(ae.params.name(id), ae.params.get(id).clone(), ae.params.decays(id));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &joint);
    let mut rng = sub_rng(cfg.seed, "ae-shuffle");
    let cols: Vec<(usize, usize)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, t)| (0..t.shape()[1]).map(move |c| (b, c)))
        .collect();
    let d = dal.feature_dim;
    let mut curve = Vec::new();
    for _ in 0..model.config.pretrain_epochs {
        let mut order = cols.clone();
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = vec![0f32; d * chunk.len()];
            for (j, &(b, c)) in chunk.iter().enumerate() {
                let src = blocks[b].data();
                let width = blocks[b].shape()[1];
                for r in 0..d {
                    x[r * chunk.len() + j] = src[r * width + c];
                }
            }
            let x = Tensor::from_parts(vec![d, chunk.len()], x);
            let mut tape = Tape::new();
            let bound = joint.bind(&mut tape);
            let enc_bound = crate::params::Bound::from_vars(bound.vars()[..n_enc].to_vec());
            let dec_bound = crate::params::Bound::from_vars(bound.vars()[n_enc..].to_vec());
            let enc = dal.prepare(&enc_bound);
            let xv = tape.constant(x.clone());
            let recon = ae.reconstruct(&mut tape, &dal, &enc, &dec_bound, xv)?;
            let target = tape.constant(x);
            let diff = tape.sub(recon, target)?;
            let sse = tape.sum_squares(diff);
            let loss = tape.scale(sse, 1.0 / (d * chunk.len()) as f32);
            let value = tape.value(loss).item()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("autoencoder reconstruction loss".into()));
            }
            let g = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = bound.vars().iter().map(|&v| g.wrt(&tape, v)).collect();
            opt.step(&mut joint, &grads);
            epoch_loss += value;
            batches += 1;
        }
        curve.push(epoch_loss / batches.max(1) as f64);
    }
    let trained: Vec<Tensor<f32>> = joint.tensors()[..n_enc].to_vec();
    model.params.load(trained)?;
    ae.params.load(joint.tensors()[n_enc..].to_vec())?;
    model.pretrained = true;
    Ok(curve)
}

/// Trains any architecture, pretraining DAL first when needed.
pub fn fit(model: &mut Model<f32>, data: &dyn Samples, cfg: &TrainConfig) -> Result<LossCurve> {
    if model.config.arch == Arch::Dal && !model.pretrained {
        pretrain_dal(model, data, cfg)?;
    }
    train(model, data, cfg)
}
