use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learning-rate schedule over the run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate down to zero at the last step.
    Cosine,
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f64 / steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// First-order optimizer state, one slot per parameter tensor.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore<f32>) -> Self {
        let slots = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let adam = matches!(kind, OptimizerKind::Adam { .. });
        Optimizer {
            kind,
            lr,
            t: 0,
            m: if adam { slots() } else { Vec::new() },
            v: if adam { slots() } else { Vec::new() },
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>]) {
        self.t += 1;
        let ids: Vec<_> = params.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in ids.into_iter().zip(grads) {
                    let w = params.get_mut(id).data_mut();
                    for (wv, gv) in w.iter_mut().zip(g.data()) {
                        *wv -= (self.lr * *gv as f64) as f32;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for (slot, (id, g)) in ids.into_iter().zip(grads).enumerate() {
                    let w = params.get_mut(id).data_mut();
                    let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
                    for i in 0..w.len() {
                        let gv = g.data()[i] as f64;
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gv;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gv * gv;
                        let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                        w[i] -= step as f32;
                    }
                }
            }
        }
    }
}
