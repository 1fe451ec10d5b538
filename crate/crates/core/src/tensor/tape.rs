use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var },
    ConvTranspose2d { input: Var, kernel: Var },
    BiasAdd { input: Var, bias: Var },
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Crop { input: Var, offset: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of a forward computation. Each op appends one node; the
/// backward sweep walks the nodes in reverse recording order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, `None` if `v` was not reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros for unreached nodes.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Element-wise product with a fixed tensor (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let v = self.value(a).zip_map(&c, "mul_const", |x, y| x * y)?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Same-padded stride-1 cross-correlation, see [`kernels::conv2d`].
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let v = kernels::conv2d(self.value(input), self.value(kernel))?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(v, Op::Conv2d { input, kernel }, rg))
    }

    /// Channel pooling `[1,C,1,1]` kernel over a `[C,H,W]` input.
    pub fn conv1x1(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let ks = self.shape(kernel);
        if ks.len() != 4 || ks[2] != 1 || ks[3] != 1 {
            return Err(Error::dim("conv1x1", self.shape(input), ks));
        }
        self.conv2d(input, kernel)
    }

    pub fn conv_transpose2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let v = kernels::conv_transpose2d(self.value(input), self.value(kernel))?;
        let rg = self.rg(&[input, kernel]);
        Ok(self.push(v, Op::ConvTranspose2d { input, kernel }, rg))
    }

    /// Adds `bias[c]` to every element of slab `c` along the leading axis.
    /// This is the only implicit expansion the tape supports.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (s, bs) = (self.shape(input), self.shape(bias));
        if s.is_empty() || bs.len() != 1 || bs[0] != s[0] {
            return Err(Error::dim("bias_add", s, bs));
        }
        let inner: usize = s[1..].iter().product();
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(input).clone();
        for (c, chunk) in v.data_mut().chunks_mut(inner).enumerate() {
            chunk.iter_mut().for_each(|x| *x += b[c]);
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(v, Op::BiasAdd { input, bias }, rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat0(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// Leading-axis slice `[start, start+len)`.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.is_empty() || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(input).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input, start }, rg))
    }

    /// Sub-box of `input` starting at `offset` with extents `extent`.
    pub fn crop(&mut self, input: Var, offset: &[usize], extent: &[usize]) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if offset.len() != s.len()
            || extent.len() != s.len()
            || extent.contains(&0)
            || offset.iter().zip(extent).zip(&s).any(|((&o, &e), &d)| o + e > d)
        {
            return Err(Error::dim("crop", &s, extent));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(extent.iter().product());
        for_each_box_offset(&s, offset, extent, |o| data.push(src[o]));
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::from_parts(extent.to_vec(), data),
            Op::Crop {
                input,
                offset: offset.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(input).reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(v, Op::Reshape(input), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let v = Tensor::scalar(self.value(input).sum());
        let rg = self.rg(&[input]);
        self.push(v, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = T::of(self.value(input).len() as f64);
        let s = self.sum(input);
        self.scale(s, T::one() / n)
    }

    /// `Σ x²` as a scalar.
    pub fn sum_squares(&mut self, input: Var) -> Var {
        let v = Tensor::scalar(self.value(input).data().iter().map(|&x| x * x).sum());
        let rg = self.rg(&[input]);
        self.push(v, Op::SumSquares(input), rg)
    }

    /// Sum of scalars (or equal-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of zero terms".into()))?;
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, t: Tensor<T>| {
            if rg(v) {
                add_into(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*b, g.clone());
                send(*a, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|x| -x));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    send(*a, g.zip_map(bv, "mul", |x, y| x * y).expect("shape"));
                }
                if rg(*b) {
                    send(*b, g.zip_map(av, "mul", |x, y| x * y).expect("shape"));
                }
            }
            Op::MulConst(a, c) => send(*a, g.zip_map(c, "mul", |x, y| x * y).expect("shape")),
            Op::Scale(a, s) => {
                let s = *s;
                send(*a, g.map(|x| x * s));
            }
            Op::Sigmoid(a) => {
                let d = g
                    .zip_map(&node.value, "sigmoid", |x, s| x * s * (T::one() - s))
                    .expect("shape");
                send(*a, d);
            }
            Op::Tanh(a) => {
                let d = g
                    .zip_map(&node.value, "tanh", |x, t| x * (T::one() - t * t))
                    .expect("shape");
                send(*a, d);
            }
            Op::Relu(a) => {
                let d = g
                    .zip_map(self.value(*a), "relu", |x, v| if v > T::zero() { x } else { T::zero() })
                    .expect("shape");
                send(*a, d);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // Accumulate straight into an existing gradient buffer: shared
                // weights receive one product per time step.
                let mut product = |v: Var, rows: usize, cols: usize, f: &dyn Fn(&mut [T], bool)| {
                    if !rg(v) {
                        return;
                    }
                    match &mut grads[v.0] {
                        Some(acc) => f(acc.data_mut(), true),
                        slot => {
                            let mut d = vec![T::zero(); rows * cols];
                            f(&mut d, false);
                            *slot = Some(Tensor::from_parts(vec![rows, cols], d));
                        }
                    }
                };
                product(*a, m, k, &|c, acc| kernels::gemm(m, n, k, g.data(), false, bv.data(), true, c, acc));
                product(*b, k, n, &|c, acc| kernels::gemm(k, m, n, av.data(), true, g.data(), false, c, acc));
            }
            Op::Conv2d { input, kernel } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                if rg(*kernel) {
                    send(*kernel, kernels::conv2d_kernel_grad(&g, iv, kv.shape()[2]));
                }
                if rg(*input) {
                    send(*input, kernels::conv2d_input_grad(&g, kv));
                }
            }
            Op::ConvTranspose2d { input, kernel } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                if rg(*kernel) {
                    send(*kernel, kernels::conv2d_kernel_grad(iv, &g, kv.shape()[2]));
                }
                if rg(*input) {
                    send(*input, kernels::conv2d(&g, kv).expect("shape"));
                }
            }
            Op::BiasAdd { input, bias } => {
                if rg(*bias) {
                    let c = self.shape(*bias)[0];
                    let inner = g.len() / c;
                    let db: Vec<T> = g.data().chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
                    send(*bias, Tensor::from_parts(vec![c], db));
                }
                send(*input, g);
            }
            Op::Concat(parts) => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if rg(p) {
                        let shape = self.shape(p).to_vec();
                        send(p, Tensor::from_parts(shape, g.data()[at..at + n].to_vec()));
                    }
                    at += n;
                }
            }
            Op::Slice { input, start } => {
                if rg(*input) {
                    let s = self.shape(*input).to_vec();
                    let inner: usize = s[1..].iter().product();
                    let mut d = vec![T::zero(); s.iter().product()];
                    d[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                    send(*input, Tensor::from_parts(s, d));
                }
            }
            Op::Crop { input, offset } => {
                if rg(*input) {
                    let s = self.shape(*input).to_vec();
                    let mut d = vec![T::zero(); s.iter().product()];
                    let mut it = g.data().iter();
                    for_each_box_offset(&s, offset, g.shape(), |o| {
                        d[o] += *it.next().expect("box size");
                    });
                    send(*input, Tensor::from_parts(s, d));
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                send(*a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                send(*a, Tensor::full(self.shape(*a).to_vec(), gv));
            }
            Op::SumSquares(a) => {
                let gv = g.data()[0];
                let two = T::of(2.0);
                send(*a, self.value(*a).map(|x| two * gv * x));
            }
        }
    }
}

/// Visits row-major flat offsets (into a tensor of `shape`) of the box at
/// `offset` with `extent`, in row-major box order.
fn for_each_box_offset(shape: &[usize], offset: &[usize], extent: &[usize], mut f: impl FnMut(usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let mut strides = vec![1; rank];
    for d in (0..rank - 1).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    loop {
        let base: usize = (0..last).map(|d| (offset[d] + idx[d]) * strides[d]).sum::<usize>() + offset[last];
        for x in 0..extent[last] {
            f(base + x);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < extent[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}
