mod common;

use common::{degenerate_pair_error, gradcheck, randomize, rng, uniform, weighted_sum};
use gridcast::cells::{convlstm_step, lstm_step, unroll, CellState, ConvLstmParams, LstmParams, Recurrent};
use gridcast::params::{Bound, Init, ParamStore};
use gridcast::{Tape, Tensor, Var};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line scalar evaluation of one LSTM step.
fn scalar_lstm(store: &ParamStore<f64>, p: &LstmParams<gridcast::params::ParamId>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hid = p.hidden_size;
    let mut hx = h.to_vec();
    hx.extend_from_slice(x);
    let affine = |w: &Tensor<f64>, b: &Tensor<f64>, r: usize| -> f64 {
        let mut acc = b.data()[r];
        for (j, v) in hx.iter().enumerate() {
            acc += w.get(&[r, j]) * v;
        }
        acc
    };
    let mut c_new = vec![0.0; hid];
    let mut h_new = vec![0.0; hid];
    for r in 0..hid {
        let f = sig(affine(store.get(p.w_f), store.get(p.b_f), r));
        let i = sig(affine(store.get(p.w_i), store.get(p.b_i), r));
        let cand = affine(store.get(p.w_c), store.get(p.b_c), r).tanh();
        let o = sig(affine(store.get(p.w_o), store.get(p.b_o), r));
        c_new[r] = f * c[r] + i * cand;
        h_new[r] = o * c_new[r].tanh();
    }
    (h_new, c_new)
}

#[test]
fn lstm_step_matches_scalar_reimplementation() {
    for seed in 0..20 {
        let mut store = ParamStore::<f64>::new();
        let p = LstmParams::register(&mut store, "l", 3, 4, &mut Init::Zeros);
        randomize(&mut store, seed, 1.0);
        let mut r = rng(seed + 100);
        let x = uniform(&mut r, &[3], -2., 2.);
        let h = uniform(&mut r, &[4, 1], -1., 1.);
        let c = uniform(&mut r, &[4, 1], -1., 1.);
        let (want_h, want_c) = scalar_lstm(&store, &p, x.data(), h.data(), c.data());

        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x);
        let hv = tape.constant(h);
        let cv = tape.constant(c);
        let s = lstm_step(&mut tape, &p.bind(&b), xv, CellState { h: hv, c: cv }).unwrap();
        for (a, b) in tape.value(s.h).data().iter().zip(&want_h) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in tape.value(s.c).data().iter().zip(&want_c) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn convlstm_degenerates_to_lstm() {
    for seed in 0..30 {
        assert!(degenerate_pair_error(seed, 1, 1) < 1e-6);
        assert!(degenerate_pair_error(seed, 3, 2) < 1e-6);
    }
}

#[test]
fn gates_stay_in_unit_interval() {
    // Large weights push pre-activations far out; the state must stay finite
    // and |h| < 1 because h = o ⊙ tanh(c) with o ∈ (0,1).
    let mut store = ParamStore::<f64>::new();
    let p = ConvLstmParams::register(&mut store, "c", 2, 3, 3, (5, 5), true, &mut Init::Zeros).unwrap();
    randomize(&mut store, 9, 3.0);
    let mut r = rng(10);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(uniform(&mut r, &[2, 5, 5], -5., 5.));
    let s0 = CellState::zeros(&mut tape, &[3, 5, 5]);
    let s = convlstm_step(&mut tape, &p.bind(&b), x, s0).unwrap();
    assert!(tape.value(s.h).data().iter().all(|v| v.abs() < 1.0));
}

fn shift_east(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape().to_vec();
    let mut out = Tensor::zeros(s.clone());
    for c in 0..s[0] {
        for i in 0..s[1] {
            for j in 1..s[2] {
                out.set(&[c, i, j], t.get(&[c, i, j - 1]));
            }
        }
    }
    out
}

#[test]
fn convlstm_translation_equivariance() {
    for (seed, peephole) in [(1, false), (2, true), (3, true)] {
        let (m, n) = (6, 8);
        let mut store = ParamStore::<f64>::new();
        let p = ConvLstmParams::register(&mut store, "c", 2, 3, 3, (m, n), peephole, &mut Init::Zeros).unwrap();
        randomize(&mut store, seed, 0.8);
        if let Some(pp) = &p.peephole {
            // Spatially constant peepholes commute with translation.
            let mut r = rng(seed + 50);
            for id in [pp.w_cf, pp.w_ci, pp.w_co] {
                let per_channel = uniform(&mut r, &[3], -1., 1.);
                *store.get_mut(id) = Tensor::from_fn(vec![3, m, n], |i| per_channel.data()[i / (m * n)]);
            }
        }
        let mut r = rng(seed + 7);
        let x = uniform(&mut r, &[2, m, n], -1., 1.);
        let h = uniform(&mut r, &[3, m, n], -1., 1.);
        let c = uniform(&mut r, &[3, m, n], -1., 1.);
        let run = |x: Tensor<f64>, h: Tensor<f64>, c: Tensor<f64>| {
            let mut tape = Tape::new();
            let b = store.bind(&mut tape);
            let xv = tape.constant(x);
            let hv = tape.constant(h);
            let cv = tape.constant(c);
            let s = convlstm_step(&mut tape, &p.bind(&b), xv, CellState { h: hv, c: cv }).unwrap();
            tape.value(s.h).clone()
        };
        let base = run(x.clone(), h.clone(), c.clone());
        let moved = run(shift_east(&x), shift_east(&h), shift_east(&c));
        for ch in 0..3 {
            for i in 1..m - 1 {
                for j in 2..n - 1 {
                    let d = (moved.get(&[ch, i, j]) - base.get(&[ch, i, j - 1])).abs();
                    assert!(d < 1e-12, "seed {seed} ({ch},{i},{j}): {d}");
                }
            }
        }
    }
}

fn bound_from(vars: &[Var]) -> Bound {
    Bound::from_vars(vars.to_vec())
}

#[test]
fn bptt_through_convlstm_unroll_matches_finite_differences() {
    for seed in 0..3 {
        let (m, n) = (4, 5);
        let mut store = ParamStore::<f64>::new();
        let p = ConvLstmParams::register(&mut store, "c", 2, 2, 3, (m, n), true, &mut Init::Zeros).unwrap();
        randomize(&mut store, seed, 0.5);
        let mut r = rng(seed + 1);
        let mut inputs: Vec<Tensor<f64>> = store.tensors().to_vec();
        let np = inputs.len();
        for _ in 0..3 {
            inputs.push(uniform(&mut r, &[2, m, n], -2., 2.));
        }
        let err = gradcheck(&inputs, |tape, v| {
            let cell = p.bind(&bound_from(&v[..np])).fuse(tape)?;
            let s0 = CellState::zeros(tape, &[2, m, n]);
            let states = unroll(tape, &cell, &v[np..], s0)?;
            let last = states.last().unwrap();
            let a = weighted_sum(tape, last.h, seed)?;
            let b = weighted_sum(tape, last.c, seed + 9)?;
            tape.add(a, b)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

#[test]
fn bptt_through_lstm_unroll_matches_finite_differences() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let p = LstmParams::register(&mut store, "l", 3, 4, &mut Init::Zeros);
        randomize(&mut store, seed, 0.7);
        let mut r = rng(seed + 1);
        let mut inputs: Vec<Tensor<f64>> = store.tensors().to_vec();
        let np = inputs.len();
        for _ in 0..4 {
            inputs.push(uniform(&mut r, &[3, 1], -2., 2.));
        }
        let err = gradcheck(&inputs, |tape, v| {
            let cell = p.bind(&bound_from(&v[..np])).fuse(tape)?;
            let s0 = CellState::zeros(tape, &[4, 1]);
            let mut s = s0;
            for &x in &v[np..] {
                s = cell.step(tape, Some(x), s)?;
            }
            weighted_sum(tape, s.h, seed)
        });
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}
