//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted; [`Graph::backward`] walks it in reverse.
//! Parameters are borrowed from a [`ParamStore`] instead of copied.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    Pointwise { x: Var, derivative: fn(f64) -> f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeom, n: usize },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Concat(Vec<Var>),
    Slice { x: Var, offset: usize },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Pointwise { .. } => "pointwise",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool2 { .. } => "avg_pool2",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Attention { .. } => "attention",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Value,
    requires_grad: bool,
    op: Op,
}

/// The tape. One graph per forward pass; drop it after `backward`.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
    training: bool,
    checked: bool,
    rng: Option<ChaCha8Rng>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph without parameters, in evaluation mode, with finiteness checks.
    pub fn new() -> Self {
        Graph {
            params: None,
            param_nodes: HashMap::new(),
            nodes: Vec::new(),
            training: false,
            checked: true,
            rng: None,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Graph { params: Some(params), ..Self::new() }
    }

    /// Enables dropout, drawing masks from `rng`.
    pub fn train_mode(mut self, rng: ChaCha8Rng) -> Self {
        self.training = true;
        self.rng = Some(rng);
        self
    }

    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node without store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value: Value::Owned(value), requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Pointwise { x, .. }
            | Op::Softmax { x, .. }
            | Op::AvgPool2 { x }
            | Op::GlobalAvgPool { x }
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Dropout { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv2d { x, k, b, .. } => vec![*x, *k, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Concat(parts) => parts.clone(),
        }
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: Value::Owned(t), requires_grad: true, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Borrowed parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "Graph::param needs Graph::with_params");
        self.nodes.push(Node { value: Value::Param(id), requires_grad: true, op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.map(x, |v| v * factor);
        self.push(t, Op::Scale(x, factor))
    }

    /// `x[..., n] + bias[n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap();
        if sb != [n] {
            return Err(Error::Dimension(format!("add_bias of {sx:?} and {sb:?}")));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().iter().enumerate().map(|(i, v)| v + b[i % n]).collect();
        let t = Tensor::new(self.shape(x), data)?;
        self.push(t, Op::AddBias(x, bias))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&e| f(e)).collect()).expect("same shape")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x))
    }

    /// Elementwise `f` with caller-supplied derivative.
    pub fn pointwise(&mut self, x: Var, f: fn(f64) -> f64, derivative: fn(f64) -> f64) -> Result<Var> {
        let t = self.map(x, f);
        self.push(t, Op::Pointwise { x, derivative })
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(Error::Dimension(format!("softmax axis {axis} for shape {:?}", v.shape())));
        }
        let out = softmax_axis(v.data(), v.shape(), axis);
        let t = Tensor::new(v.shape(), out)?;
        self.push(t, Op::Softmax { x, axis })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm of {sx:?} with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let t = Tensor::new(&sx, out)?;
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Cross-correlation. `x` is `[c_in, h, w]` or `[n, c_in, h, w]`,
    /// `k` is `[c_out, c_in, kh, kw]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk, sb) = (self.shape(x).to_vec(), self.shape(k).to_vec(), self.shape(b).to_vec());
        let (n, c_in, h, w) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2]),
            4 => (sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(Error::Dimension(format!("conv2d input {sx:?}"))),
        };
        if sk.len() != 4 || sk[1] != c_in || sb != [sk[0]] || stride == 0 {
            return Err(Error::Dimension(format!(
                "conv2d of input {sx:?} with kernels {sk:?}, bias {sb:?}, stride {stride}"
            )));
        }
        if sk[2] > h + 2 * pad || sk[3] > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                sk[2],
                sk[3],
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom { c_in, h, w, c_out: sk[0], kh: sk[2], kw: sk[3], stride, pad };
        let out = kernels::conv2d_forward(self.value(x).data(), n, &geom, self.value(k).data(), self.value(b).data());
        let shape = if sx.len() == 3 {
            vec![geom.c_out, geom.out_h(), geom.out_w()]
        } else {
            vec![n, geom.c_out, geom.out_h(), geom.out_w()]
        };
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::Conv2d { x, k, b, geom, n })
    }

    /// 2×2 average pooling with stride 2 over the last two axes (odd edges dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[s.len() - 1] < 2 || s[s.len() - 2] < 2 {
            return Err(Error::Dimension(format!("avg_pool2 of {s:?}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = self.value(x).numel() / (h * w);
        let xs = self.value(x).data();
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            let src = &xs[p * h * w..];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out[(p * oh + y) * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::AvgPool2 { x })
    }

    /// Mean over the last two axes: `[.., c, h, w]` → `[.., c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::Dimension(format!("global_avg_pool of {s:?}")));
        }
        let hw = s[s.len() - 2] * s[s.len() - 1];
        let out: Vec<f64> = self.value(x).data().chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect();
        let t = Tensor::new(&s[..s.len() - 2], out)?;
        self.push(t, Op::GlobalAvgPool { x })
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// `q, k, v: [n, d]`. Per-head probabilities are kept for inspection.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 2 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::Dimension(format!(
                "attention of q {:?}, k {:?}, v {:?}",
                s,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (n, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("model dim {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let qi = &qs[i * d + off..i * d + off + dh];
                let row = &mut p[i * n..(i + 1) * n];
                for j in 0..n {
                    let kj = &ks[j * d + off..j * d + off + dh];
                    row[j] = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                }
                softmax_in_place(row);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let pij = row[j];
                    let vj = &vs[j * d + off..j * d + off + dh];
                    for (o, vv) in oi.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
        }
        let t = Tensor::new(&[n, d], out)?;
        self.push(t, Op::Attention { q, k, v, heads, probs })
    }

    /// Attention probabilities `[heads, n, n]` recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => {
                let n = self.shape(v)[0];
                Some(Tensor::new(&[*heads, n, n], probs.clone()).expect("attention probs shape"))
            }
            _ => None,
        }
    }

    /// Concatenation along axis 0. All parts share trailing dimensions.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::EmptySequence("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::Dimension(format!("concat0 of {:?} with {:?}", self.shape(*first), s)));
            }
            lead += s[0];
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        self.concat_flat(parts, &shape)
    }

    /// Stacks equal-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::EmptySequence("stack of zero tensors".into()))?;
        let s = self.shape(*first).to_vec();
        if let Some(bad) = parts.iter().find(|&&p| self.shape(p) != s.as_slice()) {
            return Err(Error::Dimension(format!("stack of {s:?} with {:?}", self.shape(*bad))));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s);
        self.concat_flat(parts, &shape)
    }

    fn concat_flat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let mut data = Vec::with_capacity(shape.iter().product());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::Index(format!("slice {start}..{} of {s:?}", start + len)));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let t = Tensor::new(&shape, data)?;
        self.push(t, Op::Slice { x, offset: start * inner })
    }

    /// `x[i]` along axis 0, dropping that axis.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || i >= s[0] {
            return Err(Error::Index(format!("row {i} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[i * inner..(i + 1) * inner].to_vec();
        let t = Tensor::new(&s[1..], data)?;
        self.push(t, Op::Slice { x, offset: i * inner })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p.min(1.0);
        let n = self.value(x).numel();
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if keep > 0.0 && rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(v.shape(), data)?;
        self.push(t, Op::Dropout { x, mask })
    }

    /// Mean over the batch of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy of logits {s:?} with {} targets",
                targets.len()
            )));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index(format!("target class {t} with {c} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let t = Tensor::scalar(loss / b as f64);
        self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(t, Op::Sum(x))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        let params = self.param_nodes.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::gemm(m, n, k, g, false, self.value(*b).data(), true, 1.0, ga);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::gemm(k, m, n, self.value(*a).data(), true, g, false, 1.0, gb);
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if needs(x) {
                        add_into(acc(grads, x, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let other = self.value(*b).data();
                    for ((d, gg), o) in acc(grads, *a, g.len()).iter_mut().zip(g).zip(other) {
                        *d += gg * o;
                    }
                }
                if needs(*b) {
                    let other = self.value(*a).data();
                    for ((d, gg), o) in acc(grads, *b, g.len()).iter_mut().zip(g).zip(other) {
                        *d += gg * o;
                    }
                }
            }
            Op::Scale(x, f) => {
                for (d, gg) in acc(grads, *x, g.len()).iter_mut().zip(g) {
                    *d += gg * f;
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if needs(*b) {
                    let n = self.value(*b).numel();
                    let gb = acc(grads, *b, n);
                    for (j, gg) in g.iter().enumerate() {
                        gb[j % n] += gg;
                    }
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                for ((d, gg), v) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xs) {
                    if *v > 0.0 {
                        *d += gg;
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.value(*x).data();
                for ((d, gg), v) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xs) {
                    *d += gg * gelu_derivative(*v);
                }
            }
            Op::Pointwise { x, derivative } => {
                let xs = self.value(*x).data();
                for ((d, gg), v) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(xs) {
                    *d += gg * derivative(*v);
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let gx = acc(grads, *x, g.len());
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + inn;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let rows = g.len() / d;
                if needs(*gamma) {
                    let gg = acc(grads, *gamma, d);
                    for (j, (gv, h)) in g.iter().zip(xhat).enumerate() {
                        gg[j % d] += gv * h;
                    }
                }
                if needs(*beta) {
                    let gb = acc(grads, *beta, d);
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % d] += gv;
                    }
                }
                if needs(*x) {
                    let gam = self.value(*gamma).data();
                    let gx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let c = rstd[r] / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += c * (d as f64 * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b, geom, n } => {
                let (dx, dk, db) = kernels::conv2d_backward(self.value(*x).data(), *n, geom, self.value(*k).data(), g);
                for (v, d) in [(*x, dx), (*k, dk), (*b, db)] {
                    if needs(v) {
                        add_into(acc(grads, v, d.len()), &d);
                    }
                }
            }
            Op::AvgPool2 { x } => {
                let s = self.shape(*x);
                let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = g.len() / (oh * ow);
                let gx = acc(grads, *x, planes * h * w);
                for p in 0..planes {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = 0.25 * g[(p * oh + y) * ow + xx];
                            let i = p * h * w + 2 * y * w + 2 * xx;
                            gx[i] += gv;
                            gx[i + 1] += gv;
                            gx[i + w] += gv;
                            gx[i + w + 1] += gv;
                        }
                    }
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s[s.len() - 2] * s[s.len() - 1];
                let gx = acc(grads, *x, g.len() * hw);
                for (c, gv) in g.iter().enumerate() {
                    for e in &mut gx[c * hw..(c + 1) * hw] {
                        *e += gv / hw as f64;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if needs(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Slice { x, offset } => {
                let n = self.value(*x).numel();
                add_into(&mut acc(grads, *x, n)[*offset..*offset + g.len()], g);
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Dropout { x, mask } => {
                for ((d, gg), m) in acc(grads, *x, g.len()).iter_mut().zip(g).zip(mask) {
                    *d += gg * m;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let gl = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                for d in acc(grads, *x, n) {
                    *d += g[0];
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = self.shape(q);
        let (n, d) = (s[0], s[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; n * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let gi = &g[i * d + off..i * d + off + dh];
                let prow = &p[i * n..(i + 1) * n];
                for j in 0..n {
                    let vj = &vs[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    for (t, gg) in gi.iter().enumerate() {
                        gv[j * d + off + t] += prow[j] * gg;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for t in 0..dh {
                        gq[i * d + off + t] += ds * ks[j * d + off + t];
                        gk[j * d + off + t] += ds * qs[i * d + off + t];
                    }
                }
            }
        }
        for (var, d_var) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].requires_grad {
                add_into(acc(grads, var, d_var.len()), &d_var);
            }
        }
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for an input or parameter node; `None` if it never received one.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param, gradient)` pairs for every parameter reached by the sweep.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().filter_map(|&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Max-subtracted softmax along `axis` of a row-major buffer.
pub fn softmax_axis(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = data.to_vec();
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[(o * len + j) * inner + i];
            }
            softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out[(o * len + j) * inner + i] = *b;
            }
        }
    }
    out
}
