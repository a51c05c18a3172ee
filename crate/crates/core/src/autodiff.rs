//! Define-by-run reverse-mode differentiation over tensor values.
//!
//! A [`Tape`] records every operation as it is evaluated. Leaves are either
//! trainable parameters or constants; random draws enter the graph as
//! constants, so a rebuilt tape per training step is all the bookkeeping a
//! stochastic graph needs. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a topological order by construction.
//!
//! Operations whose gradient is not the true derivative (straight-through
//! estimators, the magnitude gradient of feature augmentation) implement
//! [`CustomBackward`] and are recorded with [`Tape::custom`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Padding, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A user-supplied operation with its own gradient rule.
///
/// `backward` receives the forward inputs and the upstream gradient (always
/// shaped like the forward output) and must return one gradient per input,
/// each shaped like that input.
pub trait CustomBackward: Send + Sync {
    fn name(&self) -> &str {
        "custom"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn backward(&self, inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>>;
}

type UnaryFn = dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync;

/// Single-input custom op built from two closures: the forward map and the
/// upstream-to-input gradient map used in place of the true derivative.
pub struct StraightThrough {
    forward: Box<UnaryFn>,
    backward: Box<UnaryFn>,
}

impl StraightThrough {
    pub fn new(
        forward: impl Fn(&Tensor) -> Result<Tensor> + Send + Sync + 'static,
        backward: impl Fn(&Tensor) -> Result<Tensor> + Send + Sync + 'static,
    ) -> Self {
        Self {
            forward: Box::new(forward),
            backward: Box::new(backward),
        }
    }

    /// Forward and backward are both the identity.
    pub fn identity() -> Self {
        Self::new(|x| Ok(x.clone()), |g| Ok(g.clone()))
    }
}

impl CustomBackward for StraightThrough {
    fn name(&self) -> &str {
        "straight_through"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        (self.forward)(inputs[0])
    }

    fn backward(&self, _inputs: &[&Tensor], upstream: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![(self.backward)(upstream)?])
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Logit(Var),
    Square(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        cols: Option<Vec<f32>>,
        geom: ConvGeom,
    },
    ChannelBias(Var, Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatOuter(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    RowScale(Var, Var),
    Softmax {
        x: Var,
        tau: f32,
    },
    Select {
        x: Var,
        index: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomBackward>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ChannelBias(a, b) | RowScale(a, b) => vec![*a, *b],
            Scale(a, _) | AddScalar(a) | Relu(a) | Sigmoid(a) | Exp(a) | Logit(a) | Square(a) | GlobalAvgPool(a)
            | Reshape(a) | Sum(a) | Mean(a) => vec![*a],
            Conv2d { x, w, .. } => vec![*x, *w],
            MaxPool2 { x, .. } | Softmax { x, .. } | Select { x, .. } | WeightedSum { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            Custom { inputs, .. } | ConcatOuter(inputs) => inputs.clone(),
            SliceChannels { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Gradients of a backward pass, keyed by trainable leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.grads.iter()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn unary_dims_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.dims().to_vec(),
        rhs: b.dims().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf; backward reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            trainable: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf (inputs, frozen weights, sampled noise).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::exp);
        self.push(v, Op::Exp(a))
    }

    /// `ln(x / (1 - x))`, defined on (0, 1).
    pub fn logit(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.data().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidArgument("logit input outside (0, 1)".into()));
        }
        let v = x.map(|p| (p / (1.0 - p)).ln());
        Ok(self.push(v, Op::Logit(a)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let (v, cols, geom) = tensor::conv2d_with_cols(self.value(x), self.value(w), padding)?;
        let cols = self.nodes[w.0].requires_grad.then_some(cols);
        Ok(self.push(v, Op::Conv2d { x, w, cols, geom }))
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let v = tensor::add_channel_bias(self.value(x), self.value(b))?;
        Ok(self.push(v, Op::ChannelBias(x, b)))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (v, argmax) = tensor::max_pool2(self.value(x))?;
        Ok(self.push(v, Op::MaxPool2 { x, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let v = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(dims)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Stacks along the leading axis.
    pub fn concat_outer(&mut self, parts: &[Var]) -> Result<Var> {
        let v = Tensor::concat_outer(&parts.iter().map(|p| self.value(*p)).collect::<Vec<_>>())?;
        Ok(self.push(v, Op::ConcatOuter(parts.to_vec())))
    }

    /// Channels `start..start + len` of an `N×C×…` value.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, len)?;
        Ok(self.push(v, Op::SliceChannels { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| v as f64).sum();
        let m = (s / t.numel() as f64) as f32;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Multiplies consecutive blocks of `x` by the entries of `s`: with
    /// `x.numel() = s.numel() · b`, element `i` is scaled by `s[i / b]`.
    /// A one-element `s` broadcasts over the whole tensor.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(s));
        if xv.numel() % sv.numel() != 0 || (sv.numel() > 1 && xv.dims()[0] != sv.numel()) {
            return Err(unary_dims_err("row_scale", xv, sv));
        }
        let block = xv.numel() / sv.numel();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv.data()[i / block])
            .collect();
        let v = Tensor::new(xv.dims().to_vec(), data)?;
        Ok(self.push(v, Op::RowScale(x, s)))
    }

    /// Temperature softmax over a vector.
    pub fn softmax(&mut self, x: Var, tau: f32) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 {
            return Err(Error::InvalidShape {
                dims: xv.dims().to_vec(),
                reason: "softmax expects a vector".into(),
            });
        }
        let p = tensor::softmax_temp(xv.data(), tau)?;
        let v = Tensor::from_vec(p)?;
        Ok(self.push(v, Op::Softmax { x, tau }))
    }

    /// Element `index` of a flattened tensor as a one-element tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        let value = *xv
            .data()
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("select index {index} out of range")))?;
        Ok(self.push(Tensor::scalar(value), Op::Select { x, index }))
    }

    /// Mean softmax cross-entropy of `N×K` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let [n, k] = *lv.dims() else {
            return Err(Error::InvalidShape {
                dims: lv.dims().to_vec(),
                reason: "cross entropy expects N×K logits".into(),
            });
        };
        if labels.len() != n || labels.iter().any(|&y| y >= k) {
            return Err(Error::InvalidArgument("labels do not match logits".into()));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &y) in lv.data().chunks(k).zip(labels) {
            let p = tensor::softmax_temp(row, 1.0)?;
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row.iter().map(|&z| ((z - max) as f64).exp()).sum::<f64>().ln() + max as f64;
            total += lse - row[y] as f64;
            probs.extend(p);
        }
        let v = Tensor::scalar((total / n as f64) as f32);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        tensor::ensure_same_dims("weighted_sum", xv, &weights)?;
        let s: f64 = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &w)| a as f64 * w as f64)
            .sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::WeightedSum { x, weights }))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomBackward>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    pub fn straight_through(&mut self, st: Arc<StraightThrough>, input: Var) -> Result<Var> {
        self.custom(st, &[input])
    }

    /// `mean((a - b)²)`.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Gradients of a scalar `loss` with respect to every trainable leaf.
    /// Leaves with no path to the loss receive zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        self.backward_from(loss, Tensor::ones(lv.dims())?)
    }

    /// Reverse sweep seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_from(&self, root: Var, upstream: Tensor) -> Result<Gradients> {
        tensor::ensure_same_dims("backward seed", self.value(root), &upstream)?;
        for (id, node) in self.nodes.iter().enumerate() {
            if let Some(bad) = node.op.inputs().into_iter().find(|v| v.0 >= id) {
                return Err(Error::MalformedTape { node: id, input: bad.0 });
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(upstream);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.trainable {
                let g = match grads.get_mut(id).and_then(Option::take) {
                    Some(g) => g,
                    None => Tensor::zeros(node.value.dims())?,
                };
                out.grads.insert(Var(id), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => *existing = existing.zip_map(&t, "grad accumulate", |a, b| a + b)?,
                slot => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), "mul grad", |x, y| x * y)?)?;
                }
                if needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), "mul grad", |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s))?,
            Op::AddScalar(a) => acc(*a, g.clone())?,
            Op::Relu(a) => acc(*a, g.zip_map(self.value(*a), "relu grad", |x, y| if y > 0.0 { x } else { 0.0 })?)?,
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, "sigmoid grad", |x, y| x * y * (1.0 - y))?)?,
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, "exp grad", |x, y| x * y)?)?,
            Op::Logit(a) => acc(*a, g.zip_map(self.value(*a), "logit grad", |x, p| x / (p * (1.0 - p)))?)?,
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), "square grad", |x, y| 2.0 * x * y)?)?,
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    tensor::gemm(m, n, k, g.data(), false, bv.data(), true, 0.0, &mut ga);
                    acc(*a, Tensor::new(vec![m, k], ga)?)?;
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    tensor::gemm(k, m, n, av.data(), true, g.data(), false, 0.0, &mut gb);
                    acc(*b, Tensor::new(vec![k, n], gb)?)?;
                }
            }
            Op::Conv2d { x, w, cols, geom } => {
                let g_kn = geom.nk_to_kn(g.data());
                let np = geom.n * geom.out_pixels();
                let pl = geom.patch_len();
                if needs(*w) {
                    let cols = cols.as_ref().expect("columns saved for trainable kernel");
                    let mut gw = vec![0.0; geom.k_out * pl];
                    tensor::gemm(geom.k_out, np, pl, &g_kn, false, cols, true, 0.0, &mut gw);
                    acc(*w, Tensor::new(self.value(*w).dims().to_vec(), gw)?)?;
                }
                if needs(*x) {
                    let mut gcols = vec![0.0; pl * np];
                    tensor::gemm(pl, geom.k_out, np, self.value(*w).data(), true, &g_kn, false, 0.0, &mut gcols);
                    acc(*x, Tensor::new(self.value(*x).dims().to_vec(), geom.col2im(&gcols))?)?;
                }
            }
            Op::ChannelBias(x, b) => {
                acc(*x, g.clone())?;
                if needs(*b) {
                    let c = self.value(*b).numel();
                    let inner = g.numel() / (g.dims()[0] * c);
                    let mut gb = vec![0.0f32; c];
                    for (i, chunk) in g.data().chunks(inner).enumerate() {
                        gb[i % c] += chunk.iter().sum::<f32>();
                    }
                    acc(*b, Tensor::from_vec(gb)?)?;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                acc(*x, Tensor::new(xv.dims().to_vec(), gx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let p = xv.dims()[2] * xv.dims()[3];
                let gx = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / p as f32, p))
                    .collect();
                acc(*x, Tensor::new(xv.dims().to_vec(), gx)?)?;
            }
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).dims())?)?,
            Op::ConcatOuter(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if needs(*p) {
                        acc(*p, Tensor::new(self.value(*p).dims().to_vec(), g.data()[offset..offset + n].to_vec())?)?;
                    }
                    offset += n;
                }
            }
            Op::SliceChannels { x, start } => acc(*x, g.pad_channels(*start, self.value(*x).dims()[1])?)?,
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).dims(), g.data()[0])?)?,
            Op::Mean(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.dims(), g.data()[0] / xv.numel() as f32)?)?;
            }
            Op::RowScale(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let block = xv.numel() / sv.numel();
                if needs(*x) {
                    let gx = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * sv.data()[i / block])
                        .collect();
                    acc(*x, Tensor::new(xv.dims().to_vec(), gx)?)?;
                }
                if needs(*s) {
                    let gs = g
                        .data()
                        .chunks(block)
                        .zip(xv.data().chunks(block))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum::<f32>())
                        .collect();
                    acc(*s, Tensor::new(sv.dims().to_vec(), gs)?)?;
                }
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let dot: f32 = g.data().iter().zip(y).map(|(a, b)| a * b).sum();
                let gx = g.data().iter().zip(y).map(|(&gv, &yv)| yv * (gv - dot) / tau).collect();
                acc(*x, Tensor::from_vec(gx)?)?;
            }
            Op::Select { x, index } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.numel()];
                gx[*index] = g.data()[0];
                acc(*x, Tensor::new(xv.dims().to_vec(), gx)?)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let k = lv.dims()[1];
                let scale = g.data()[0] / labels.len() as f32;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_mut(k).zip(labels) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                acc(*logits, Tensor::new(lv.dims().to_vec(), gl)?)?;
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                acc(*x, weights.map(|w| w * gv))?;
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&values, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::ShapeContract(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (v, gi) in inputs.iter().zip(gs) {
                    if gi.dims() != self.value(*v).dims() {
                        return Err(Error::ShapeContract(format!(
                            "{} gradient dims {:?} differ from input dims {:?}",
                            op.name(),
                            gi.dims(),
                            self.value(*v).dims()
                        )));
                    }
                    acc(*v, gi)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::finite_diff_grad;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1., -2., 3., 0., 5., 6.]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]).unwrap());
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let c = tape.constant(t(&[3], &[4., 5., 6.]));
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::zeros(&[3]).unwrap());
        assert!(g.get(c).is_none());
    }

    #[test]
    fn mse_gradient_hand_case() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[2., 0.]));
        let target = tape.constant(Tensor::zeros(&[2]).unwrap());
        let loss = tape.mse(x, target).unwrap();
        assert_eq!(tape.value(loss).data(), &[2.0]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn straight_through_threshold_passes_gradient() {
        let st = Arc::new(StraightThrough::new(
            |x| Ok(x.map(|v| if v > 0.5 { 1.0 } else { 0.0 })),
            |g| Ok(g.clone()),
        ));
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[0.7]));
        let y = tape.straight_through(st, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
        let loss = tape.scale(y, 3.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn identity_straight_through_is_identity() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[0.1, -4.0, 2.5]));
        let y = tape.straight_through(Arc::new(StraightThrough::identity()), x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let sq = tape.square(y);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.2, -8.0, 5.0]);
    }

    #[test]
    fn custom_shape_contract_enforced() {
        let st = Arc::new(StraightThrough::new(|x| Ok(x.clone()), |_| Tensor::zeros(&[5])));
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let y = tape.straight_through(st, x).unwrap();
        let loss = tape.sum(y);
        assert!(matches!(tape.backward(loss), Err(Error::ShapeContract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x*x + x) => grad = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1., -1., 0.5]));
        let xx = tape.mul(x, x).unwrap();
        let y = tape.add(xx, x).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -1.0, 2.0]);
    }

    #[test]
    fn zero_upstream_gives_zero() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let x = tape.constant(t(&[1, 2], &[0.5, -1.]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sigmoid(y);
        let g = tape.backward_from(s, Tensor::zeros(&[1, 2]).unwrap()).unwrap();
        assert!(g.get(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearity_of_gradients() {
        let wv = t(&[2, 3], &[0.3, -0.2, 0.5, 1.1, -0.7, 0.4]);
        let xv = t(&[2, 2], &[1.0, -0.5, 0.25, 2.0]);
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let w = tape.param(wv.clone());
            let x = tape.constant(xv.clone());
            let y = tape.matmul(x, w).unwrap();
            let a = tape.sigmoid(y);
            let a = tape.sum(a);
            let sq = tape.square(y);
            let b = tape.mean(sq);
            let loss = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            tape.backward(loss).unwrap().take(w).unwrap()
        };
        let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-6);
        }
    }

    fn check_fd(x0: Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let ad = tape.backward(loss).unwrap().take(x).unwrap();
        let fd = finite_diff_grad(
            |xv: &Tensor| {
                let mut tape = Tape::new();
                let x = tape.param(xv.clone());
                let l = build(&mut tape, x);
                Ok(tape.value(l).data()[0] as f64)
            },
            &x0,
            1e-3,
        )
        .unwrap();
        let num: f64 = ad.data().iter().zip(fd.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        let den: f64 = ad.data().iter().map(|&a| (a as f64).powi(2)).sum();
        assert!(num.sqrt() <= 1e-3 * den.sqrt().max(1e-3), "ad {ad:?} fd {fd:?}");
    }

    #[test]
    fn conv_pool_gradients_match_fd() {
        let x0 = t(&[1, 2, 4, 4], &(0..32).map(|i| (1.7 * i as f32 + 0.3).sin() * 1.5).collect::<Vec<_>>());
        check_fd(x0, |tape, x| {
            let w = tape.constant(t(&[3, 2, 3, 3], &(0..54).map(|i| (0.9 * i as f32).cos() * 0.5).collect::<Vec<_>>()));
            let y = tape.conv2d(x, w, Padding::Same).unwrap();
            let p = tape.max_pool2(y).unwrap();
            let gp = tape.global_avg_pool(p).unwrap();
            let wts = Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap();
            tape.weighted_sum(gp, wts).unwrap()
        });
    }

    #[test]
    fn softmax_row_scale_gradients_match_fd() {
        let x0 = t(&[3], &[0.2, -0.4, 1.1]);
        check_fd(x0, |tape, x| {
            let p = tape.softmax(x, 0.7).unwrap();
            let s1 = tape.select(p, 1).unwrap();
            let f = tape.constant(t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]));
            let y = tape.row_scale(f, s1).unwrap();
            let e = tape.exp(y);
            tape.sum(e)
        });
    }

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let x0 = t(&[2, 3], &[0.1, 1.2, -0.3, 2.0, 0.0, -1.0]);
        check_fd(x0, |tape, x| tape.cross_entropy(x, &[1, 2]).unwrap());
    }
}
