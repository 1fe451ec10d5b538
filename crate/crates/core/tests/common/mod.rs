//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use gridcast::cells::{convlstm_step, lstm_step, CellState, ConvLstmParams, LstmParams};
use gridcast::metrics::Predictor;
use gridcast::params::{Init, ParamStore};
use gridcast::pipeline::Dataset;
use gridcast::synth::{simulate, WorldConfig};
use gridcast::train::{DatasetSamples, Sample, Samples};
use gridcast::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Max relative error between tape gradients and central finite differences
/// (h = 1e-5) for a scalar function of several tensors.
///
/// `f` must record a scalar on the tape from leaves created for `inputs`.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-5;
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(&tape, vars[k]);
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + H;
            let up = eval(&xs);
            xs[k].data_mut()[i] = x.data()[i] - H;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Scalarizes any tensor output with a fixed random weighting so every
/// element carries a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let shape = tape.shape(v).to_vec();
    let w = uniform(&mut r, &shape, -1.0, 1.0);
    let p = tape.mul_const(v, w)?;
    Ok(tape.sum(p))
}

/// Quintuple-loop same-padded cross-correlation.
pub fn naive_conv2d(input: &Tensor<f64>, kernel: &Tensor<f64>) -> Tensor<f64> {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let p = (k / 2) as isize;
    let mut out = Tensor::zeros(vec![co, h, w]);
    for o in 0..co {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as isize + ky as isize - p;
                            let sx = x as isize + kx as isize - p;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                acc += kernel.get(&[o, c, ky, kx]) * input.get(&[c, sy as usize, sx as usize]);
                            }
                        }
                    }
                }
                out.set(&[o, y, x], acc);
            }
        }
    }
    out
}

/// Per-pair double loop for the spatiotemporal smoothness term: every
/// unordered pair of cells within Chebyshev distance `rs` in the same frame,
/// plus every pair of frames `1..=rt` apart at the same cell.
pub fn naive_st_loss(pred: &Tensor<f64>, rs: usize, rt: usize, active: Option<&Tensor<f64>>) -> f64 {
    let (k, m, n) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let on = |i: usize, j: usize| active.map_or(true, |a| a.get(&[i, j]) > 0.5);
    let mut total = 0.0;
    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    for t in 0..k {
        for (a, &(i1, j1)) in cells.iter().enumerate() {
            for &(i2, j2) in &cells[a + 1..] {
                let d = i1.abs_diff(i2).max(j1.abs_diff(j2));
                if d >= 1 && d <= rs && on(i1, j1) && on(i2, j2) {
                    let diff = pred.get(&[t, i1, j1]) - pred.get(&[t, i2, j2]);
                    total += diff * diff;
                }
            }
        }
    }
    for t1 in 0..k {
        for t2 in t1 + 1..k {
            if t2 - t1 > rt {
                continue;
            }
            for &(i, j) in &cells {
                if on(i, j) {
                    let diff = pred.get(&[t1, i, j]) - pred.get(&[t2, i, j]);
                    total += diff * diff;
                }
            }
        }
    }
    total
}

/// Rasterized 4x4 tiny world.
pub fn tiny_world(seed: u64) -> Dataset {
    simulate(&WorldConfig { seed, ..WorldConfig::tiny() })
        .unwrap()
        .dataset()
        .unwrap()
}

/// First `count` training windows of `data` over all channels.
pub fn tiny_samples(data: &Dataset, j: usize, k: usize, count: usize) -> Vec<Sample> {
    let mut windows = data.train_windows(j, k, 1).unwrap().windows;
    windows.truncate(count);
    let src = DatasetSamples::new(data, windows, (0..data.channels()).collect());
    (0..src.len()).map(|i| src.get(i)).collect()
}

/// Random samples with a random station mask shared by every step.
pub fn random_samples(seed: u64, count: usize, j: usize, c: usize, m: usize, n: usize) -> Vec<Sample> {
    let mut r = rng(seed);
    let station: Vec<f32> = (0..m * n).map(|_| if r.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
    let mut station = station;
    station[r.random_range(0..m * n)] = 1.0;
    (0..count)
        .map(|_| {
            let inputs = (0..j).map(|_| uniform(&mut r, &[c, m, n], 0.0, 1.0).cast()).collect();
            let target = uniform(&mut r, &[1, m, n], 0.0, 1.0).cast();
            // Drop each station from some windows so per-station window sets differ.
            let mask: Vec<f32> = station
                .iter()
                .map(|&s| if s > 0.5 && r.random::<f64>() < 0.8 { 1.0 } else { 0.0 })
                .collect();
            Sample {
                inputs,
                target,
                mask: Tensor::new(vec![1, m, n], mask).unwrap(),
            }
        })
        .collect()
}

/// Leave-one-station-out error by brute force: for every cell masked in any
/// window, zero channel `channel` of the input frames there, re-run the
/// predictor on each window observing that cell and take the RMSE at the
/// cell; return the mean over cells.
pub fn naive_sp_rmse(predictor: &dyn Predictor, samples: &[Sample], channel: usize, last_only: bool, scale: f64) -> f64 {
    let (k, m, n) = {
        let s = samples[0].mask.shape();
        (s[0], s[1], s[2])
    };
    let observed = |s: &Sample, i: usize, j: usize| (0..k).any(|t| s.mask.get(&[t, i, j]) > 0.5);
    let mut per_station = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let (mut sse, mut count) = (0.0f64, 0usize);
            for s in samples {
                if !observed(s, i, j) {
                    continue;
                }
                let mut xs = s.inputs.clone();
                let from = if last_only { xs.len() - 1 } else { 0 };
                for x in &mut xs[from..] {
                    x.set(&[channel, i, j], 0.0);
                }
                let pred = predictor.predict(&xs).unwrap();
                for t in 0..k {
                    if s.mask.get(&[t, i, j]) > 0.5 {
                        let d = pred.get(&[t, i, j]) as f64 - s.target.get(&[t, i, j]) as f64;
                        sse += d * d;
                        count += 1;
                    }
                }
            }
            if count > 0 {
                per_station.push(scale * (sse / count as f64).sqrt());
            }
        }
    }
    per_station.iter().sum::<f64>() / per_station.len() as f64
}

/// One-step stub mixing every input frame through a 3x3 box of the pollutant
/// channel plus the next channel at the same cell.
pub struct BoxBlur;

impl Predictor for BoxBlur {
    fn predict(&self, inputs: &[Tensor<f32>]) -> Result<Tensor<f32>> {
        let (m, n) = (inputs[0].shape()[1], inputs[0].shape()[2]);
        let mut out = Tensor::zeros(vec![1, m, n]);
        for x in inputs {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for a in i.saturating_sub(1)..(i + 2).min(m) {
                        for b in j.saturating_sub(1)..(j + 2).min(n) {
                            acc += x.get(&[0, a, b]);
                        }
                    }
                    let v = out.get(&[0, i, j]) + (acc / 9.0 + 0.3 * x.get(&[1, i, j])) / inputs.len() as f32;
                    out.set(&[0, i, j], v);
                }
            }
        }
        Ok(out)
    }
}

/// Overwrites every parameter with uniform values in `[-scale, scale]`.
pub fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = uniform(&mut r, &shape, -scale, scale);
    }
}

/// Build a ConvLSTM with 1×1 kernels on a 1×1 grid and the LSTM holding the
/// same numbers, then compare one step. Peepholes off: the plain LSTM has none.
pub fn degenerate_pair_error(seed: u64, cin: usize, ch: usize) -> f64 {
    let mut cs = ParamStore::<f64>::new();
    let cp = ConvLstmParams::register(&mut cs, "c", cin, ch, 1, (1, 1), false, &mut Init::Zeros).unwrap();
    randomize(&mut cs, seed, 1.5);
    let mut ls = ParamStore::<f64>::new();
    let lp = LstmParams::register(&mut ls, "l", cin, ch, &mut Init::Zeros);
    let pairs = [
        (lp.w_f, cp.w_hf, cp.w_xf, lp.b_f, cp.b_f),
        (lp.w_i, cp.w_hi, cp.w_xi, lp.b_i, cp.b_i),
        (lp.w_c, cp.w_hc, cp.w_xc, lp.b_c, cp.b_c),
        (lp.w_o, cp.w_ho, cp.w_xo, lp.b_o, cp.b_o),
    ];
    for (lw, wh, wx, lb, cb) in pairs {
        let mut w = Tensor::zeros(vec![ch, ch + cin]);
        for r in 0..ch {
            for j in 0..ch {
                w.set(&[r, j], cs.get(wh).get(&[r, j, 0, 0]));
            }
            for j in 0..cin {
                w.set(&[r, ch + j], cs.get(wx).get(&[r, j, 0, 0]));
            }
        }
        *ls.get_mut(lw) = w;
        *ls.get_mut(lb) = cs.get(cb).clone();
    }
    let mut r = rng(seed ^ 77);
    let x = uniform(&mut r, &[cin], -2., 2.);
    let h = uniform(&mut r, &[ch], -1., 1.);
    let c = uniform(&mut r, &[ch], -1., 1.);

    let mut tape = Tape::new();
    let cb = cs.bind(&mut tape);
    let xv = tape.constant(x.reshape(vec![cin, 1, 1]).unwrap());
    let hv = tape.constant(h.reshape(vec![ch, 1, 1]).unwrap());
    let cv = tape.constant(c.reshape(vec![ch, 1, 1]).unwrap());
    let conv = convlstm_step(&mut tape, &cp.bind(&cb), xv, CellState { h: hv, c: cv }).unwrap();
    let lb = ls.bind(&mut tape);
    let xl = tape.constant(x);
    let hl = tape.constant(h.reshape(vec![ch, 1]).unwrap());
    let cl = tape.constant(c.reshape(vec![ch, 1]).unwrap());
    let lstm = lstm_step(&mut tape, &lp.bind(&lb), xl, CellState { h: hl, c: cl }).unwrap();
    let dh = tape.value(conv.h).data().iter().zip(tape.value(lstm.h).data()).map(|(a, b)| (a - b).abs());
    let dc = tape.value(conv.c).data().iter().zip(tape.value(lstm.c).data()).map(|(a, b)| (a - b).abs());
    dh.chain(dc).fold(0.0, f64::max)
}

