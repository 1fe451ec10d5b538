//! Stacked fully connected LSTM over flattened frames, with a dense layer
//! mapping the last hidden state to all `K·M·N` outputs.

use super::{maybe_drop, Dropout, ModelConfig};
use crate::cells::{CellState, FusedLstm, LstmParams, Recurrent};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FcLstm {
    pub layers: Vec<LstmParams<ParamId>>,
    /// `[K·M·N, hidden]`
    pub fc_w: ParamId,
    /// `[K·M·N]`
    pub fc_b: ParamId,
    hidden: usize,
    out_shape: [usize; 3],
}

pub struct Prepared {
    layers: Vec<FusedLstm>,
    fc_w: Var,
    fc_b: Var,
}

impl FcLstm {
    pub fn register<T: Real>(store: &mut ParamStore<T>, c: &ModelConfig, init: &mut Init) -> Self {
        let input = c.in_channels * c.cells();
        let layers = (0..c.encoder_layers)
            .map(|l| {
                let width = if l == 0 { input } else { c.hidden };
                LstmParams::register(store, &format!("lstm.{l}"), width, c.hidden, init)
            })
            .collect();
        let outputs = c.k * c.cells();
        let fc_w = store.add("fc.w", init.weight(vec![outputs, c.hidden], c.hidden), true);
        let fc_b = store.add("fc.b", init.bias(outputs, 0.0), false);
        FcLstm {
            layers,
            fc_w,
            fc_b,
            hidden: c.hidden,
            out_shape: [c.k, c.grid.0, c.grid.1],
        }
    }

    pub fn prepare<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Prepared> {
        Ok(Prepared {
            layers: self
                .layers
                .iter()
                .map(|l| l.bind(bound).fuse(tape))
                .collect::<Result<_>>()?,
            fc_w: bound.var(self.fc_w),
            fc_b: bound.var(self.fc_b),
        })
    }

    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Prepared,
        inputs: &[Var],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let mut states: Vec<CellState> = (0..self.layers.len())
            .map(|_| CellState::zeros(tape, &[self.hidden, 1]))
            .collect();
        for &x in inputs {
            let len = tape.value(x).len();
            let mut below = tape.reshape(x, &[len, 1])?;
            for (l, cell) in p.layers.iter().enumerate() {
                let input = if l == 0 { below } else { maybe_drop(tape, below, dropout)? };
                states[l] = cell.step(tape, Some(input), states[l])?;
                below = states[l].h;
            }
        }
        let top = states.last().expect("at least one layer").h;
        let top = maybe_drop(tape, top, dropout)?;
        let y = tape.matmul(p.fc_w, top)?;
        let y = tape.bias_add(y, p.fc_b)?;
        tape.reshape(y, &self.out_shape)
    }
}
