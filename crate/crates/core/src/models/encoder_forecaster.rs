//! Stacked ConvLSTM encoder handing its final states to a stacked ConvLSTM
//! forecaster, whose concatenated hidden states feed a 1×1 convolution.

use super::{maybe_drop, Dropout, ModelConfig};
use crate::cells::{CellState, ConvLstmParams, FusedConvLstm, Recurrent};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderForecaster {
    pub encoder: Vec<ConvLstmParams<ParamId>>,
    pub forecaster: Vec<ConvLstmParams<ParamId>>,
    /// `[1, ΣC, 1, 1]`
    pub head_w: ParamId,
    /// `[1]`
    pub head_b: ParamId,
    k: usize,
    grid: (usize, usize),
    channels: Vec<usize>,
}

pub struct Prepared {
    encoder: Vec<FusedConvLstm>,
    forecaster: Vec<FusedConvLstm>,
    head_w: Var,
    head_b: Var,
}

impl EncoderForecaster {
    pub fn register<T: Real>(store: &mut ParamStore<T>, c: &ModelConfig, init: &mut Init) -> Result<Self> {
        let mut stack = |role: &str, init: &mut Init| -> Result<Vec<ConvLstmParams<ParamId>>> {
            let mut cin = c.in_channels;
            let mut layers = Vec::new();
            for (l, &ch) in c.channels.iter().enumerate() {
                layers.push(ConvLstmParams::register(
                    store,
                    &format!("{role}.{l}"),
                    cin,
                    ch,
                    c.kernel,
                    c.grid,
                    c.peephole,
                    init,
                )?);
                cin = ch;
            }
            Ok(layers)
        };
        let encoder = stack("encoder", init)?;
        // The first forecaster layer is fed zeros, so its input kernels
        // never influence the output.
        let forecaster = stack("forecaster", init)?;
        let total: usize = c.channels.iter().sum();
        let head_w = store.add("head.w", init.weight(vec![1, total, 1, 1], total), true);
        let head_b = store.add("head.b", init.bias(1, 0.0), false);
        Ok(EncoderForecaster {
            encoder,
            forecaster,
            head_w,
            head_b,
            k: c.k,
            grid: c.grid,
            channels: c.channels.clone(),
        })
    }

    pub fn prepare<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Prepared> {
        let fuse = |layers: &[ConvLstmParams<ParamId>], tape: &mut Tape<T>| -> Result<Vec<FusedConvLstm>> {
            layers.iter().map(|l| l.bind(bound).fuse(tape)).collect()
        };
        Ok(Prepared {
            encoder: fuse(&self.encoder, tape)?,
            forecaster: fuse(&self.forecaster, tape)?,
            head_w: bound.var(self.head_w),
            head_b: bound.var(self.head_b),
        })
    }

    /// Final encoder states, one per layer.
    pub fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Prepared,
        inputs: &[Var],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Vec<CellState>> {
        let (m, n) = self.grid;
        let mut states: Vec<CellState> = self
            .channels
            .iter()
            .map(|&ch| CellState::zeros(tape, &[ch, m, n]))
            .collect();
        for &x in inputs {
            let mut below = x;
            for (l, cell) in p.encoder.iter().enumerate() {
                let input = if l == 0 { below } else { maybe_drop(tape, below, dropout)? };
                states[l] = cell.step(tape, Some(input), states[l])?;
                below = states[l].h;
            }
        }
        Ok(states)
    }

    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Prepared,
        inputs: &[Var],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let mut states = self.encode(tape, p, inputs, dropout)?;
        let mut outputs = Vec::with_capacity(self.k);
        for _ in 0..self.k {
            let mut below: Option<Var> = None;
            for (l, cell) in p.forecaster.iter().enumerate() {
                let input = match below {
                    Some(h) => Some(maybe_drop(tape, h, dropout)?),
                    None => None,
                };
                states[l] = cell.step(tape, input, states[l])?;
                below = Some(states[l].h);
            }
            let hs: Vec<Var> = states.iter().map(|s| s.h).collect();
            let all = tape.concat(&hs)?;
            let all = maybe_drop(tape, all, dropout)?;
            let y = tape.conv1x1(all, p.head_w)?;
            outputs.push(tape.bias_add(y, p.head_b)?);
        }
        tape.concat(&outputs)
    }
}
