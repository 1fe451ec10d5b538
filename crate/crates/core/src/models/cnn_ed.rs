//! Convolutional encoder and transposed-convolution decoder over the `J`
//! input frames stacked as channels. Stride 1 and same padding throughout.

use super::{maybe_drop, Dropout, ModelConfig};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct CnnEd {
    /// Kernels `[C_out, C_in, k, k]` and biases.
    pub encoder: Vec<(ParamId, ParamId)>,
    /// Transposed kernels `[C_in, C_out, k, k]` and biases; the last layer
    /// emits `K` channels.
    pub decoder: Vec<(ParamId, ParamId)>,
}

pub struct Prepared {
    encoder: Vec<(Var, Var)>,
    decoder: Vec<(Var, Var)>,
}

impl CnnEd {
    pub fn register<T: Real>(store: &mut ParamStore<T>, c: &ModelConfig, init: &mut Init) -> Self {
        let k = c.kernel;
        let kk = k * k;
        let mut cin = c.j * c.in_channels;
        let mut encoder = Vec::new();
        for (l, &ch) in c.channels.iter().enumerate() {
            let w = store.add(format!("conv.{l}.w"), init.weight(vec![ch, cin, k, k], cin * kk), true);
            let b = store.add(format!("conv.{l}.b"), init.bias(ch, 0.0), false);
            encoder.push((w, b));
            cin = ch;
        }
        let mut outs: Vec<usize> = c.channels.iter().rev().skip(1).copied().collect();
        outs.push(c.k);
        let mut decoder = Vec::new();
        for (l, &ch) in outs.iter().enumerate() {
            let w = store.add(format!("deconv.{l}.w"), init.weight(vec![cin, ch, k, k], cin * kk), true);
            let b = store.add(format!("deconv.{l}.b"), init.bias(ch, 0.0), false);
            decoder.push((w, b));
            cin = ch;
        }
        CnnEd { encoder, decoder }
    }

    pub fn output_bias(&self) -> ParamId {
        self.decoder.last().expect("at least one decoder layer").1
    }

    pub fn prepare(&self, bound: &Bound) -> Prepared {
        let bind = |layers: &[(ParamId, ParamId)]| {
            layers
                .iter()
                .map(|&(w, b)| (bound.var(w), bound.var(b)))
                .collect()
        };
        Prepared {
            encoder: bind(&self.encoder),
            decoder: bind(&self.decoder),
        }
    }

    pub fn run<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Prepared,
        inputs: &[Var],
        dropout: &mut Option<&mut Dropout>,
    ) -> Result<Var> {
        let mut x = tape.concat(inputs)?;
        for &(w, b) in &p.encoder {
            let y = tape.conv2d(x, w)?;
            let y = tape.bias_add(y, b)?;
            let y = tape.relu(y);
            x = maybe_drop(tape, y, dropout)?;
        }
        let last = p.decoder.len() - 1;
        for (l, &(w, b)) in p.decoder.iter().enumerate() {
            let y = tape.conv_transpose2d(x, w)?;
            x = tape.bias_add(y, b)?;
            if l != last {
                let y = tape.relu(x);
                x = maybe_drop(tape, y, dropout)?;
            }
        }
        Ok(x)
    }
}
