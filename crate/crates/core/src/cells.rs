//! Single time-step recurrent transitions: the fully connected LSTM and the
//! convolutional LSTM with peephole connections.
//!
//! Parameter sets are generic over their handle type so the same layout can
//! refer to stored parameters ([`ParamId`]) or to tape values ([`Var`]).
//! Gate weights are fused along the output axis once per forward pass
//! ([`LstmParams::fuse`], [`ConvLstmParams::fuse`]) so each step runs one
//! product per operand instead of four.

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Hidden and cell state of one layer at one time step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl CellState {
    /// All-zero state of the given shape (sequence start).
    pub fn zeros<T: Real>(tape: &mut Tape<T>, shape: &[usize]) -> Self {
        let h = tape.constant(Tensor::zeros(shape.to_vec()));
        let c = tape.constant(Tensor::zeros(shape.to_vec()));
        CellState { h, c }
    }
}

/// Weights of the fully connected LSTM. Each `w_*` is `[hidden, hidden + input]`
/// acting on the stacked column `[h_{t-1}; x_t]`; each `b_*` has length `hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<P> {
    pub w_f: P,
    pub w_i: P,
    pub w_c: P,
    pub w_o: P,
    pub b_f: P,
    pub b_i: P,
    pub b_c: P,
    pub b_o: P,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl<P> LstmParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> LstmParams<Q> {
        LstmParams {
            w_f: f(&self.w_f),
            w_i: f(&self.w_i),
            w_c: f(&self.w_c),
            w_o: f(&self.w_o),
            b_f: f(&self.b_f),
            b_i: f(&self.b_i),
            b_c: f(&self.b_c),
            b_o: f(&self.b_o),
            input_size: self.input_size,
            hidden_size: self.hidden_size,
        }
    }

    /// Fixed manifest order of the tensors.
    pub fn handles(&self) -> [&P; 8] {
        [
            &self.w_f, &self.w_i, &self.w_c, &self.w_o, &self.b_f, &self.b_i, &self.b_c, &self.b_o,
        ]
    }
}

impl LstmParams<ParamId> {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input_size: usize,
        hidden_size: usize,
        init: &mut Init,
    ) -> Self {
        let cols = hidden_size + input_size;
        let mut w = |name: &str, init: &mut Init| {
            store.add(
                format!("{prefix}.{name}"),
                init.weight(vec![hidden_size, cols], cols),
                true,
            )
        };
        let w_f = w("w_f", init);
        let w_i = w("w_i", init);
        let w_c = w("w_c", init);
        let w_o = w("w_o", init);
        let b_f = store.add(format!("{prefix}.b_f"), init.bias(hidden_size, 1.0), false);
        let b_i = store.add(format!("{prefix}.b_i"), init.bias(hidden_size, 0.0), false);
        let b_c = store.add(format!("{prefix}.b_c"), init.bias(hidden_size, 0.0), false);
        let b_o = store.add(format!("{prefix}.b_o"), init.bias(hidden_size, 0.0), false);
        LstmParams {
            w_f,
            w_i,
            w_c,
            w_o,
            b_f,
            b_i,
            b_c,
            b_o,
            input_size,
            hidden_size,
        }
    }

    pub fn bind(&self, bound: &Bound) -> LstmParams<Var> {
        self.map(|&id| bound.var(id))
    }
}

/// The four LSTM gates stacked into one `[4·hidden, hidden + input]` matrix.
#[derive(Clone, Copy, Debug)]
pub struct FusedLstm {
    w: Var,
    b: Var,
    input_size: usize,
    hidden: usize,
}

impl LstmParams<Var> {
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>) -> Result<FusedLstm> {
        let h = self.hidden_size;
        for (&w, &b) in [self.w_f, self.w_i, self.w_c, self.w_o]
            .iter()
            .zip(&[self.b_f, self.b_i, self.b_c, self.b_o])
        {
            if tape.shape(w) != [h, h + self.input_size] {
                return Err(Error::dim("lstm weight", tape.shape(w), &[h, h + self.input_size]));
            }
            if tape.shape(b) != [h] {
                return Err(Error::dim("lstm bias", tape.shape(b), &[h]));
            }
        }
        Ok(FusedLstm {
            w: tape.concat(&[self.w_f, self.w_i, self.w_c, self.w_o])?,
            b: tape.concat(&[self.b_f, self.b_i, self.b_c, self.b_o])?,
            input_size: self.input_size,
            hidden: h,
        })
    }
}

/// Anything that advances a [`CellState`] by one input.
pub trait Recurrent<T: Real> {
    fn step(&self, tape: &mut Tape<T>, x: Option<Var>, prev: CellState) -> Result<CellState>;
}

impl<T: Real> Recurrent<T> for FusedLstm {
    /// `x` is a column `[input, 1]`; `None` means a zero input.
    fn step(&self, tape: &mut Tape<T>, x: Option<Var>, prev: CellState) -> Result<CellState> {
        let h = self.hidden;
        if tape.shape(prev.h) != [h, 1] || tape.shape(prev.c) != [h, 1] {
            return Err(Error::dim("lstm state", tape.shape(prev.h), &[h, 1]));
        }
        let x = match x {
            Some(x) => x,
            None => tape.constant(Tensor::zeros(vec![self.input_size, 1])),
        };
        if tape.shape(x) != [self.input_size, 1] {
            return Err(Error::dim("lstm input", tape.shape(x), &[self.input_size, 1]));
        }
        let hx = tape.concat(&[prev.h, x])?;
        let pre = tape.matmul(self.w, hx)?;
        let pre = tape.bias_add(pre, self.b)?;
        let f = tape.slice(pre, 0, h)?;
        let i = tape.slice(pre, h, h)?;
        let g = tape.slice(pre, 2 * h, h)?;
        let o = tape.slice(pre, 3 * h, h)?;
        let f = tape.sigmoid(f);
        let i = tape.sigmoid(i);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.hadamard(f, prev.c)?;
        let write = tape.hadamard(i, g)?;
        let c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        let h = tape.hadamard(o, tc)?;
        Ok(CellState { h, c })
    }
}

/// One LSTM transition with `x` of shape `[input]` or `[input, 1]`.
pub fn lstm_step<T: Real>(
    tape: &mut Tape<T>,
    params: &LstmParams<Var>,
    x: Var,
    prev: CellState,
) -> Result<CellState> {
    let x = if tape.shape(x).len() == 1 {
        let n = tape.shape(x)[0];
        tape.reshape(x, &[n, 1])?
    } else {
        x
    };
    params.fuse(tape)?.step(tape, Some(x), prev)
}

/// Convolutional LSTM parameters. Input kernels are `[C, C_in, k, k]`,
/// state kernels `[C, C, k, k]`, peepholes `[C, H, W]` and biases `[C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams<P> {
    pub w_xf: P,
    pub w_hf: P,
    pub w_xi: P,
    pub w_hi: P,
    pub w_xc: P,
    pub w_hc: P,
    pub w_xo: P,
    pub w_ho: P,
    pub peephole: Option<Peephole<P>>,
    pub b_f: P,
    pub b_i: P,
    pub b_c: P,
    pub b_o: P,
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Peephole<P> {
    pub w_cf: P,
    pub w_ci: P,
    pub w_co: P,
}

impl<P> ConvLstmParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ConvLstmParams<Q> {
        ConvLstmParams {
            w_xf: f(&self.w_xf),
            w_hf: f(&self.w_hf),
            w_xi: f(&self.w_xi),
            w_hi: f(&self.w_hi),
            w_xc: f(&self.w_xc),
            w_hc: f(&self.w_hc),
            w_xo: f(&self.w_xo),
            w_ho: f(&self.w_ho),
            peephole: self.peephole.as_ref().map(|p| Peephole {
                w_cf: f(&p.w_cf),
                w_ci: f(&p.w_ci),
                w_co: f(&p.w_co),
            }),
            b_f: f(&self.b_f),
            b_i: f(&self.b_i),
            b_c: f(&self.b_c),
            b_o: f(&self.b_o),
            in_channels: self.in_channels,
            channels: self.channels,
            kernel: self.kernel,
            grid: self.grid,
        }
    }
}

impl ConvLstmParams<ParamId> {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        channels: usize,
        kernel: usize,
        grid: (usize, usize),
        peephole: bool,
        init: &mut Init,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("ConvLSTM kernel must be odd, got {kernel}")));
        }
        let kk = kernel * kernel;
        let mut wx = |name: &str, init: &mut Init| {
            store.add(
                format!("{prefix}.{name}"),
                init.weight(vec![channels, in_channels, kernel, kernel], in_channels * kk),
                true,
            )
        };
        let w_xf = wx("w_xf", init);
        let w_xi = wx("w_xi", init);
        let w_xc = wx("w_xc", init);
        let w_xo = wx("w_xo", init);
        let mut wh = |name: &str, init: &mut Init| {
            store.add(
                format!("{prefix}.{name}"),
                init.weight(vec![channels, channels, kernel, kernel], channels * kk),
                true,
            )
        };
        let w_hf = wh("w_hf", init);
        let w_hi = wh("w_hi", init);
        let w_hc = wh("w_hc", init);
        let w_ho = wh("w_ho", init);
        let peephole = peephole.then(|| {
            let mut p = |name: &str, init: &mut Init| {
                store.add(
                    format!("{prefix}.{name}"),
                    init.zeros(vec![channels, grid.0, grid.1]),
                    true,
                )
            };
            Peephole {
                w_cf: p("w_cf", init),
                w_ci: p("w_ci", init),
                w_co: p("w_co", init),
            }
        });
        let b_f = store.add(format!("{prefix}.b_f"), init.bias(channels, 1.0), false);
        let b_i = store.add(format!("{prefix}.b_i"), init.bias(channels, 0.0), false);
        let b_c = store.add(format!("{prefix}.b_c"), init.bias(channels, 0.0), false);
        let b_o = store.add(format!("{prefix}.b_o"), init.bias(channels, 0.0), false);
        Ok(ConvLstmParams {
            w_xf,
            w_hf,
            w_xi,
            w_hi,
            w_xc,
            w_hc,
            w_xo,
            w_ho,
            peephole,
            b_f,
            b_i,
            b_c,
            b_o,
            in_channels,
            channels,
            kernel,
            grid,
        })
    }

    pub fn bind(&self, bound: &Bound) -> ConvLstmParams<Var> {
        self.map(|&id| bound.var(id))
    }
}

/// ConvLSTM gates fused along the output-channel axis.
#[derive(Clone, Debug)]
pub struct FusedConvLstm {
    wx: Var,
    wh: Var,
    b: Var,
    peephole: Option<Peephole<Var>>,
    channels: usize,
    in_channels: usize,
}

impl ConvLstmParams<Var> {
    pub fn fuse<T: Real>(&self, tape: &mut Tape<T>) -> Result<FusedConvLstm> {
        Ok(FusedConvLstm {
            wx: tape.concat(&[self.w_xf, self.w_xi, self.w_xc, self.w_xo])?,
            wh: tape.concat(&[self.w_hf, self.w_hi, self.w_hc, self.w_ho])?,
            b: tape.concat(&[self.b_f, self.b_i, self.b_c, self.b_o])?,
            peephole: self.peephole.clone(),
            channels: self.channels,
            in_channels: self.in_channels,
        })
    }
}

impl<T: Real> Recurrent<T> for FusedConvLstm {
    /// `x` is `[C_in, H, W]`; `None` stands for an all-zero input.
    fn step(&self, tape: &mut Tape<T>, x: Option<Var>, prev: CellState) -> Result<CellState> {
        let ch = self.channels;
        let ps = tape.shape(prev.h).to_vec();
        if ps.len() != 3 || ps[0] != ch || tape.shape(prev.c) != ps.as_slice() {
            return Err(Error::dim("convlstm state", &ps, tape.shape(prev.c)));
        }
        let gh = tape.conv2d(prev.h, self.wh)?;
        let pre = match x {
            Some(x) => {
                let xs = tape.shape(x);
                if xs.len() != 3 || xs[0] != self.in_channels || xs[1..] != ps[1..] {
                    return Err(Error::dim("convlstm input", xs, &ps));
                }
                let gx = tape.conv2d(x, self.wx)?;
                tape.add(gx, gh)?
            }
            None => gh,
        };
        let pre = tape.bias_add(pre, self.b)?;
        let mut f = tape.slice(pre, 0, ch)?;
        let mut i = tape.slice(pre, ch, ch)?;
        let g = tape.slice(pre, 2 * ch, ch)?;
        let mut o = tape.slice(pre, 3 * ch, ch)?;
        if let Some(p) = &self.peephole {
            let pf = tape.hadamard(p.w_cf, prev.c)?;
            f = tape.add(f, pf)?;
            let pi = tape.hadamard(p.w_ci, prev.c)?;
            i = tape.add(i, pi)?;
        }
        let f = tape.sigmoid(f);
        let i = tape.sigmoid(i);
        let g = tape.tanh(g);
        let keep = tape.hadamard(f, prev.c)?;
        let write = tape.hadamard(i, g)?;
        let c = tape.add(keep, write)?;
        if let Some(p) = &self.peephole {
            let po = tape.hadamard(p.w_co, c)?;
            o = tape.add(o, po)?;
        }
        let o = tape.sigmoid(o);
        let tc = tape.tanh(c);
        let h = tape.hadamard(o, tc)?;
        Ok(CellState { h, c })
    }
}

/// One ConvLSTM transition.
pub fn convlstm_step<T: Real>(
    tape: &mut Tape<T>,
    params: &ConvLstmParams<Var>,
    x: Var,
    prev: CellState,
) -> Result<CellState> {
    params.fuse(tape)?.step(tape, Some(x), prev)
}

/// Threads `init` through `inputs` left to right and returns every state.
pub fn unroll<T: Real, C: Recurrent<T>>(
    tape: &mut Tape<T>,
    cell: &C,
    inputs: &[Var],
    init: CellState,
) -> Result<Vec<CellState>> {
    if inputs.is_empty() {
        return Err(Error::Contract("unroll over an empty sequence".into()));
    }
    let mut states = Vec::with_capacity(inputs.len());
    let mut s = init;
    for &x in inputs {
        s = cell.step(tape, Some(x), s)?;
        states.push(s);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_lstm(tape: &mut Tape<f64>, input: usize, hidden: usize) -> LstmParams<Var> {
        let mut store = ParamStore::<f64>::new();
        let p = LstmParams::register(&mut store, "l", input, hidden, &mut Init::Zeros);
        let b = store.bind(tape);
        p.bind(&b)
    }

    #[test]
    fn zero_lstm_halves_unit_cell() {
        let mut tape = Tape::new();
        let p = zero_lstm(&mut tape, 1, 1);
        let x = tape.constant(Tensor::zeros(vec![1]));
        let h0 = tape.constant(Tensor::zeros(vec![1, 1]));
        let c0 = tape.constant(Tensor::ones(vec![1, 1]));
        let s = lstm_step(&mut tape, &p, x, CellState { h: h0, c: c0 }).unwrap();
        assert!((tape.value(s.c).data()[0] - 0.5).abs() < 1e-12);
        let want = 0.5 * 0.5f64.tanh();
        assert!((tape.value(s.h).data()[0] - want).abs() < 1e-12);
        assert!((want - 0.23106).abs() < 1e-5);
    }

    #[test]
    fn zero_lstm_zero_fixed_point() {
        let mut tape = Tape::new();
        let p = zero_lstm(&mut tape, 2, 3);
        let x = tape.constant(Tensor::zeros(vec![2]));
        let s0 = CellState::zeros(&mut tape, &[3, 1]);
        let s = lstm_step(&mut tape, &p, x, s0).unwrap();
        assert!(tape.value(s.h).data().iter().all(|&v| v == 0.0));
        assert!(tape.value(s.c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_bad_input() {
        let mut tape = Tape::new();
        let p = zero_lstm(&mut tape, 2, 3);
        let x = tape.constant(Tensor::zeros(vec![5]));
        let s0 = CellState::zeros(&mut tape, &[3, 1]);
        assert!(matches!(
            lstm_step(&mut tape, &p, x, s0),
            Err(Error::Dimension { .. })
        ));
    }

    fn zero_convlstm(tape: &mut Tape<f64>, cin: usize, ch: usize, grid: (usize, usize)) -> ConvLstmParams<Var> {
        let mut store = ParamStore::<f64>::new();
        let p = ConvLstmParams::register(&mut store, "c", cin, ch, 3, grid, true, &mut Init::Zeros).unwrap();
        let b = store.bind(tape);
        p.bind(&b)
    }

    #[test]
    fn zero_convlstm_matches_scalar_case() {
        let mut tape = Tape::new();
        let p = zero_convlstm(&mut tape, 2, 3, (4, 5));
        let x = tape.constant(Tensor::zeros(vec![2, 4, 5]));
        let h0 = tape.constant(Tensor::zeros(vec![3, 4, 5]));
        let c0 = tape.constant(Tensor::ones(vec![3, 4, 5]));
        let s = convlstm_step(&mut tape, &p, x, CellState { h: h0, c: c0 }).unwrap();
        let want = 0.5 * 0.5f64.tanh();
        assert!(tape.value(s.c).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        assert!(tape.value(s.h).data().iter().all(|&v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn convlstm_spatial_mismatch() {
        let mut tape = Tape::new();
        let p = zero_convlstm(&mut tape, 1, 2, (4, 4));
        let x = tape.constant(Tensor::zeros(vec![1, 3, 4]));
        let s0 = CellState::zeros(&mut tape, &[2, 4, 4]);
        assert!(matches!(
            convlstm_step(&mut tape, &p, x, s0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn even_kernel_is_config_error() {
        let mut store = ParamStore::<f32>::new();
        let r = ConvLstmParams::register(&mut store, "c", 1, 1, 2, (3, 3), true, &mut Init::Zeros);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn unroll_zero_params_halves_each_step() {
        let mut tape = Tape::new();
        let p = zero_convlstm(&mut tape, 1, 1, (2, 2));
        let cell = p.fuse(&mut tape).unwrap();
        let xs: Vec<Var> = (0..4).map(|_| tape.constant(Tensor::zeros(vec![1, 2, 2]))).collect();
        let h0 = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        let c0 = tape.constant(Tensor::full(vec![1, 2, 2], 3.0));
        let states = unroll(&mut tape, &cell, &xs, CellState { h: h0, c: c0 }).unwrap();
        for (t, s) in states.iter().enumerate() {
            let want = 3.0 * 0.5f64.powi(t as i32 + 1);
            assert!(tape.value(s.c).data().iter().all(|&v| (v - want).abs() < 1e-12));
        }
    }

    #[test]
    fn unroll_empty_is_contract_error() {
        let mut tape = Tape::new();
        let p = zero_convlstm(&mut tape, 1, 1, (2, 2));
        let cell = p.fuse(&mut tape).unwrap();
        let s0 = CellState::zeros(&mut tape, &[1, 2, 2]);
        assert!(matches!(unroll(&mut tape, &cell, &[], s0), Err(Error::Contract(_))));
    }
}
