//! Named, ordered parameter storage shared by every model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// How fresh weights are drawn.
#[derive(Debug)]
pub enum Init {
    /// `uniform(-s, s)` with `s = 1/sqrt(fan_in)`; biases use their stated constant.
    Uniform(ChaCha8Rng),
    /// Everything zero, forget-gate biases included.
    Zeros,
}

impl Init {
    pub fn seeded(seed: u64) -> Self {
        use rand::SeedableRng;
        Init::Uniform(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn weight<T: Real>(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Uniform(rng) => {
                let s = 1.0 / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.random_range(-s..s)))
            }
        }
    }

    pub fn bias<T: Real>(&mut self, len: usize, value: f64) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(vec![len]),
            Init::Uniform(_) => Tensor::full(vec![len], T::of(value)),
        }
    }

    /// Parameters that start at zero regardless of the scheme (peepholes).
    pub fn zeros<T: Real>(&mut self, shape: Vec<usize>) -> Tensor<T> {
        Tensor::zeros(shape)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
            decay: Vec::new(),
        }
    }
}

/// Parameters recorded as gradient-requiring leaves on one tape.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps tape leaves created in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for the L2 penalty (weights, not biases).
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        self.decay.push(decay);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), true))
                .collect(),
        )
    }

    /// Binds parameters as constants (inference: no gradient bookkeeping).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.constant(t.clone())).collect())
    }

    /// Replaces all values, keeping names and order. Shapes must match.
    pub fn load(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Integrity(format!(
                "checkpoint holds {} tensors, model expects {}",
                tensors.len(),
                self.tensors.len()
            )));
        }
        for (i, t) in tensors.iter().enumerate() {
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Integrity(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    self.names[i],
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
        }
    }

    /// `Σ ‖W‖²` over decaying parameters, recorded on the tape.
    pub fn l2_penalty(&self, tape: &mut Tape<T>, bound: &Bound) -> Result<Option<Var>> {
        let terms: Vec<Var> = self
            .ids()
            .filter(|&id| self.decays(id))
            .map(|id| tape.sum_squares(bound.var(id)))
            .collect();
        if terms.is_empty() {
            Ok(None)
        } else {
            tape.add_all(&terms).map(Some)
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            t.check_finite(&format!("parameter `{n}`"))?;
        }
        Ok(())
    }
}
