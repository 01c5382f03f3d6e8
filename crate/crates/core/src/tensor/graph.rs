use super::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Row,
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    GatherRows(Var, Vec<usize>),
    Softmax(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    LayerNorm {
        src: Var,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    BlockApply {
        blocks: Var,
        x: Var,
        heads: usize,
    },
    SigmoidFocal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive applications. Node indices are a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    let (ar, ac) = a.dims2()?;
    let (br, bc) = b.dims2()?;
    if (ar, ac) == (br, bc) {
        Ok(Bcast::Same)
    } else if br == 1 && bc == 1 {
        Ok(Bcast::Scalar)
    } else if br == 1 && bc == ac {
        Ok(Bcast::Row)
    } else {
        Err(Error::shape(op, a.shape(), b.shape()))
    }
}

fn b_index(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Scalar => 0,
    }
}

fn reduce_to(kind: Bcast, g: &Tensor, b_shape: &[usize]) -> Tensor {
    match kind {
        Bcast::Same => Tensor {
            shape: b_shape.to_vec(),
            data: g.data.clone(),
        },
        Bcast::Row => {
            let cols = g.cols();
            let mut out = vec![0.0; cols];
            for (i, v) in g.data.iter().enumerate() {
                out[i % cols] += v;
            }
            Tensor {
                shape: b_shape.to_vec(),
                data: out,
            }
        }
        Bcast::Scalar => Tensor {
            shape: b_shape.to_vec(),
            data: vec![g.data.iter().sum()],
        },
    }
}

fn shape2(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
}

fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Elementwise sigmoid focal loss and its derivative w.r.t. the logit.
pub(crate) fn focal_terms(z: f64, t: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    let ce = bce_with_logits(z, t);
    let p_t = p * t + (1.0 - p) * (1.0 - t);
    let a_t = alpha * t + (1.0 - alpha) * (1.0 - t);
    let one_m = (1.0 - p_t).max(0.0);
    let modulator = one_m.powf(gamma);
    let loss = a_t * modulator * ce;
    let dmod = if gamma == 0.0 {
        0.0
    } else if one_m == 0.0 {
        if gamma > 1.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        -gamma * one_m.powf(gamma - 1.0) * (2.0 * t - 1.0) * p * (1.0 - p)
    };
    let grad = a_t * (dmod * ce + modulator * (p - t));
    (loss, grad)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, ta, tb)?;
        let (r, c) = ta.dims2()?;
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, tb.data[b_index(kind, i, c)]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: shape2(r, c), data }, mk(a, b, kind), rg))
    }

    /// `a + b`, with `b` the same shape, a row, or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| x * s).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, Op::Scale(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2()?;
        let (k2, m) = tb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let data = matmul_raw(&ta.data, &tb.data, n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: shape2(n, m), data }, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: shape2(c, r), data }, Op::Transpose(a), rg))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", &[], &[]));
        }
        let first = self.value(parts[0]).dims2()?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let d = self.value(*p).dims2()?;
            let ok = match axis {
                0 => d.1 == first.1,
                1 => d.0 == first.0,
                _ => false,
            };
            if !ok {
                return Err(Error::shape(
                    "concat",
                    self.value(parts[0]).shape(),
                    self.value(*p).shape(),
                ));
            }
            dims.push(d);
        }
        let (shape, data) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * first.1);
            for p in parts {
                data.extend_from_slice(&self.value(*p).data);
            }
            (shape2(rows, first.1), data)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(first.0 * cols);
            for r in 0..first.0 {
                for (p, d) in parts.iter().zip(&dims) {
                    let t = self.value(*p);
                    data.extend_from_slice(&t.data[r * d.1..(r + 1) * d.1]);
                }
            }
            (shape2(first.0, cols), data)
        };
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Tensor { shape, data }, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent {
            return Err(Error::shape("slice", t.shape(), &[axis, start, len]));
        }
        let (shape, data) = if axis == 0 {
            (shape2(len, c), t.data[start * c..(start + len) * c].to_vec())
        } else {
            let mut data = Vec::with_capacity(r * len);
            for i in 0..r {
                data.extend_from_slice(&t.data[i * c + start..i * c + start + len]);
            }
            (shape2(r, len), data)
        };
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape, data },
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::shape("gather_rows", t.shape(), &[i]));
            }
            data.extend_from_slice(&t.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: shape2(idx.len(), c),
                data,
            },
            Op::GatherRows(a, idx.to_vec()),
            rg,
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut data = t.data.clone();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor { shape: shape2(r, c), data }, Op::Softmax(a), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let data = t.data.iter().map(|x| f(*x)).collect();
        let shape = t.shape.clone();
        let rg = self.rg(a);
        self.push(Tensor { shape, data }, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = t.dims2()?;
        let mut data = t.data.clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape: shape2(r, c), data },
            Op::LayerNorm { src: a, inv_std },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Row-wise block-diagonal product. Row `i` of `blocks` holds `heads`
    /// row-major `d×d` blocks; row `i` of `x` is split into `heads` chunks of
    /// `d` and each chunk is multiplied by its block.
    pub fn block_apply(&mut self, blocks: Var, x: Var, heads: usize) -> Result<Var> {
        let (tb, tx) = (self.value(blocks), self.value(x));
        let (n, width) = tx.dims2()?;
        let (bn, bw) = tb.dims2()?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::shape("block_apply", tb.shape(), tx.shape()));
        }
        let d = width / heads;
        if bn != n || bw != heads * d * d {
            return Err(Error::shape("block_apply", tb.shape(), tx.shape()));
        }
        let mut data = vec![0.0; n * width];
        for i in 0..n {
            let xr = &tx.data[i * width..(i + 1) * width];
            let kr = &tb.data[i * bw..(i + 1) * bw];
            for j in 0..heads {
                let xs = &xr[j * d..(j + 1) * d];
                for r in 0..d {
                    let krow = &kr[j * d * d + r * d..j * d * d + (r + 1) * d];
                    data[i * width + j * d + r] = krow.iter().zip(xs).map(|(k, v)| k * v).sum();
                }
            }
        }
        let rg = self.rg(blocks) || self.rg(x);
        Ok(self.push(
            Tensor {
                shape: shape2(n, width),
                data,
            },
            Op::BlockApply { blocks, x, heads },
            rg,
        ))
    }

    /// Elementwise sigmoid focal loss of `logits` against constant `targets`.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: &Tensor,
        alpha: f64,
        gamma: f64,
    ) -> Result<Var> {
        let t = self.value(logits);
        if t.shape() != targets.shape() {
            return Err(Error::shape("sigmoid_focal", t.shape(), targets.shape()));
        }
        let data = t
            .data
            .iter()
            .zip(&targets.data)
            .map(|(z, y)| focal_terms(*z, *y, alpha, gamma).0)
            .collect();
        let shape = t.shape.clone();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor { shape, data },
            Op::SigmoidFocal {
                logits,
                targets: targets.data.clone(),
                alpha,
                gamma,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar. Every node reachable from `loss` that
    /// requires a gradient receives the sum over all of its uses.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: lt.shape.clone(),
            data: vec![1.0],
        });
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads.resize_with(self.nodes.len(), || None);
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data.iter_mut().zip(&g.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.value(v).shape.clone(),
            data,
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, kind) => {
                self.accumulate(grads, *a, self.like(*a, g.data.clone()));
                if self.rg(*b) {
                    let gb = reduce_to(*kind, g, self.shape(*b));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sub(a, b, kind) => {
                self.accumulate(grads, *a, self.like(*a, g.data.clone()));
                if self.rg(*b) {
                    let mut gb = reduce_to(*kind, g, self.shape(*b));
                    gb.data.iter_mut().for_each(|v| *v = -*v);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, kind) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let c = ta.cols();
                if self.rg(*a) {
                    let ga = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data[b_index(*kind, i, c)])
                        .collect();
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.rg(*b) {
                    let prod = Tensor {
                        shape: g.shape.clone(),
                        data: g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                    };
                    self.accumulate(grads, *b, reduce_to(*kind, &prod, tb.shape()));
                }
            }
            Op::Scale(a, s) => {
                let ga = g.data.iter().map(|v| v * s).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                if self.rg(*a) {
                    let ga = matmul_bt_raw(&g.data, &tb.data, n, m, k);
                    self.accumulate(grads, *a, self.like(*a, ga));
                }
                if self.rg(*b) {
                    let gb = matmul_at_raw(&ta.data, &g.data, n, k, m);
                    self.accumulate(grads, *b, self.like(*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g.data[i * c + j];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Concat(parts, axis) => {
                let oc = out.cols();
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = (self.value(*p).rows(), self.value(*p).cols());
                    if self.rg(*p) {
                        let gp = if *axis == 0 {
                            g.data[offset * oc..(offset + pr) * oc].to_vec()
                        } else {
                            let mut v = Vec::with_capacity(pr * pc);
                            for r in 0..pr {
                                v.extend_from_slice(&g.data[r * oc + offset..r * oc + offset + pc]);
                            }
                            v
                        };
                        self.accumulate(grads, *p, self.like(*p, gp));
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { src, axis, start } => {
                let ts = self.value(*src);
                let (r, c) = (ts.rows(), ts.cols());
                let mut gs = vec![0.0; r * c];
                let (orow, ocol) = (out.rows(), out.cols());
                for i in 0..orow {
                    for j in 0..ocol {
                        let (si, sj) = if *axis == 0 {
                            (i + start, j)
                        } else {
                            (i, j + start)
                        };
                        gs[si * c + sj] = g.data[i * ocol + j];
                    }
                }
                self.accumulate(grads, *src, self.like(*src, gs));
            }
            Op::GatherRows(a, idx) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let mut ga = vec![0.0; ta.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g.data[k * c + j];
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Softmax(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data[i * c..(i + 1) * c];
                    let dy = &g.data[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (dy[j] - dot);
                    }
                }
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Exp(a) => {
                let ga = g.data.iter().zip(&out.data).map(|(gv, y)| gv * y).collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::Abs(a) => {
                let ta = self.value(*a);
                let ga = g
                    .data
                    .iter()
                    .zip(&ta.data)
                    .map(|(gv, x)| {
                        if *x > 0.0 {
                            *gv
                        } else if *x < 0.0 {
                            -*gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, ga));
            }
            Op::LayerNorm { src, inv_std } => {
                let (r, c) = (out.rows(), out.cols());
                let n = c as f64;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out.data[i * c..(i + 1) * c];
                    let dy = &g.data[i * c..(i + 1) * c];
                    let sum_dy: f64 = dy.iter().sum();
                    let sum_dyy: f64 = dy.iter().zip(y).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga[i * c + j] = inv_std[i] / n * (n * dy[j] - sum_dy - y[j] * sum_dyy);
                    }
                }
                self.accumulate(grads, *src, self.like(*src, ga));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, self.like(*a, vec![g.data[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let v = g.data[0] / n.max(1) as f64;
                self.accumulate(grads, *a, self.like(*a, vec![v; n]));
            }
            Op::BlockApply { blocks, x, heads } => {
                let (tb, tx) = (self.value(*blocks), self.value(*x));
                let (n, width) = (tx.rows(), tx.cols());
                let d = width / heads;
                let bw = tb.cols();
                let mut gb = vec![0.0; tb.len()];
                let mut gx = vec![0.0; tx.len()];
                for i in 0..n {
                    for j in 0..*heads {
                        for r in 0..d {
                            let dy = g.data[i * width + j * d + r];
                            if dy == 0.0 {
                                continue;
                            }
                            let base = i * bw + j * d * d + r * d;
                            for cidx in 0..d {
                                gb[base + cidx] += dy * tx.data[i * width + j * d + cidx];
                                gx[i * width + j * d + cidx] += tb.data[base + cidx] * dy;
                            }
                        }
                    }
                }
                self.accumulate(grads, *blocks, self.like(*blocks, gb));
                self.accumulate(grads, *x, self.like(*x, gx));
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let tl = self.value(*logits);
                let ga = tl
                    .data
                    .iter()
                    .zip(targets)
                    .zip(&g.data)
                    .map(|((z, t), gv)| gv * focal_terms(*z, *t, *alpha, *gamma).1)
                    .collect();
                self.accumulate(grads, *logits, self.like(*logits, ga));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]])
            .unwrap();
        let i = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let out = g.matmul(i, av).unwrap();
        assert_eq!(g.value(out), &a);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(2, 3));
        let b = g.constant(Tensor::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let s = g.sum(x);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(vec![1.0, 2.0]));
        let c = g.constant(Tensor::row(vec![3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        let gr = g.backward(s).unwrap();
        assert!(gr.get(c).is_none());
        assert_eq!(gr.get(x).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn focal_closed_form() {
        // p = 0.5, target 1: 0.25 · 0.5² · ln 2
        let (l, _) = focal_terms(0.0, 1.0, 0.25, 2.0);
        assert!((l - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!((l - 0.0433).abs() < 1e-4);
    }

    #[test]
    fn inputs_not_mutated() {
        let mut g = Graph::new();
        let t = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let x = g.param(t.clone());
        let y = g.layer_norm(x, 1e-5).unwrap();
        let y = g.softmax(y).unwrap();
        let _ = g.relu(y);
        assert_eq!(g.value(x), &t);
    }
}
