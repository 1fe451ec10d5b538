//! Per-cell semi-supervised regressor: a stacked autoencoder's encoder,
//! pretrained on cell feature vectors, followed by a linear head that emits
//! the `K` output steps of every cell.
//!
//! A cell's feature vector holds all input channels of all `J` frames at
//! that cell plus its normalized row and column.

use super::{maybe_drop, Dropout, ModelConfig};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Dal {
    /// `[hidden, in]` weights and `[hidden]` biases.
    pub encoder: Vec<(ParamId, ParamId)>,
    /// `[K, hidden]`
    pub head_w: ParamId,
    /// `[K]`
    pub head_b: ParamId,
    pub feature_dim: usize,
    hidden: usize,
    grid: (usize, usize),
    k: usize,
}

pub struct Prepared {
    encoder: Vec<(Var, Var)>,
    head_w: Var,
    head_b: Var,
}

impl Dal {
    pub fn register<T: Real>(store: &mut ParamStore<T>, c: &ModelConfig, init: &mut Init) -> Self {
        let feature_dim = c.j * c.in_channels + 2;
        let mut width = feature_dim;
        let encoder = (0..c.encoder_layers)
            .map(|l| {
                let w = store.add(format!("encoder.{l}.w"), init.weight(vec![c.hidden, width], width), true);
                let b = store.add(format!("encoder.{l}.b"), init.bias(c.hidden, 0.0), false);
                width = c.hidden;
                (w, b)
            })
            .collect();
        let head_w = store.add("head.w", init.weight(vec![c.k, c.hidden], c.hidden), true);
        let head_b = store.add("head.b", init.bias(c.k, 0.0), false);
        Dal {
            encoder,
            head_w,
            head_b,
            feature_dim,
            hidden: c.hidden,
            grid: c.grid,
            k: c.k,
        }
    }

    pub fn prepare(&self, bound: &Bound) -> Prepared {
        Prepared {
            encoder: self
                .encoder
                .iter()
                .map(|&(w, b)| (bound.var(w), bound.var(b)))
                .collect(),
            head_w: bound.var(self.head_w),
            head_b: bound.var(self.head_b),
        }
    }

    /// `[feature_dim, M·N]`: one column per cell.
    pub fn features<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var> {
        let (m, n) = self.grid;
        let stacked = tape.concat(inputs)?;
        let rows = tape.value(stacked).shape()[0];
        let flat = tape.reshape(stacked, &[rows, m * n])?;
        let coord = |i: usize, extent: usize| {
            if extent > 1 {
                i as f64 / (extent - 1) as f64
            } else {
                0.0
            }
        };
        let coords = Tensor::from_fn(vec![2, m * n], |idx| {
            let (axis, cell) = (idx / (m * n), idx % (m * n));
            T::of(if axis == 0 { coord(cell / n, m) } else { coord(cell % n, n) })
        });
        let coords = tape.constant(coords);
        tape.concat(&[flat, coords])
    }

    /// Hidden code `[hidden, B]` of feature columns `[feature_dim, B]`.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Prepared,
        x: Var,
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let mut h = x;
        for (l, &(w, b)) in p.encoder.iter().enumerate() {
            if l > 0 {
                h = maybe_drop(tape, h, dropout)?;
            }
            let y = tape.matmul(w, h)?;
            let y = tape.bias_add(y, b)?;
            h = tape.tanh(y);
        }
        Ok(h)
    }

    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Prepared,
        inputs: &[Var],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let x = self.features(tape, inputs)?;
        let h = self.encode(tape, p, x, dropout)?;
        let y = tape.matmul(p.head_w, h)?;
        let y = tape.bias_add(y, p.head_b)?;
        tape.reshape(y, &[self.k, self.grid.0, self.grid.1])
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }
}

/// Decoder half used only while pretraining: mirrors the encoder back to
/// the feature width, tanh between layers and a linear reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub params: ParamStore<T>,
    decoder: Vec<(ParamId, ParamId)>,
}

impl<T: Real> Autoencoder<T> {
    pub fn new(dal: &Dal, init: &mut Init) -> Self {
        let mut params = ParamStore::new();
        let depth = dal.encoder.len();
        let decoder = (0..depth)
            .map(|l| {
                let out = if l + 1 == depth { dal.feature_dim } else { dal.hidden };
                let w = params.add(format!("decoder.{l}.w"), init.weight(vec![out, dal.hidden], dal.hidden), true);
                let b = params.add(format!("decoder.{l}.b"), init.bias(out, 0.0), false);
                (w, b)
            })
            .collect();
        Autoencoder { params, decoder }
    }

    /// Reconstruction `[feature_dim, B]` of `x` through the model's encoder.
    pub fn reconstruct(
        &self,
        tape: &mut Tape<T>,
        dal: &Dal,
        enc: &Prepared,
        dec: &Bound,
        x: Var,
    ) -> Result<Var> {
        let mut h = dal.encode(tape, enc, x, &mut None)?;
        let last = self.decoder.len() - 1;
        for (l, &(w, b)) in self.decoder.iter().enumerate() {
            let y = tape.matmul(dec.var(w), h)?;
            h = tape.bias_add(y, dec.var(b))?;
            if l != last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}
