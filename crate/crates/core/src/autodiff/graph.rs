use rand::Rng;

use super::gemm::{gemm, MatMut, MatRef};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]; doubles as the node's topological index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `grad_out` has the shape of `output`. Returns one entry per input: the
/// gradient contribution to accumulate, or `None` when the input receives none.
pub trait CustomBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand has the extent of the left operand's last axis.
    Row,
    /// Right operand holds one value.
    Scalar,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Var,
        mask: Vec<f64>,
        count: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        mask: Vec<f64>,
        probs: Vec<f64>,
        count: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

/// Geometry of a stacked batch of sequences for multi-head attention:
/// rows are `batch × seq_len` frames, columns are `heads × head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Dynamic tape for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so inputs always precede their
/// consumers. A graph is built for one step and dropped (or cleared) after.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor, zero-filled when nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, rule: Box<dyn CustomBackward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            rg,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(ta.data(), m, k),
            MatRef::new(tb.data(), k, n),
            0.0,
            MatMut::new(&mut out, m, n),
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::invalid(format!(
                "transpose needs a matrix, got shape {:?}",
                ta.shape()
            )));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let out = transpose_data(ta.data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, rg, Op::Transpose(a)))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Bcast::Same)
        } else if tb.numel() == 1 && tb.shape().iter().all(|&d| d == 1) {
            Ok(Bcast::Scalar)
        } else if tb.rank() == 1 && ta.rank() >= 1 && tb.shape()[0] == ta.cols() {
            Ok(Bcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols().max(1);
        let bd = tb.data();
        let out: Vec<f64> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match mode {
                    Bcast::Same => bd[i],
                    Bcast::Row => bd[i % cols],
                    Bcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, rg, op(a, b, mode)))
    }

    /// Elementwise `a + b`; `b` may be a row vector over the last axis or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * s).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, rg, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let (outer, n, inner) = axis_split(tx.shape(), axis);
        let xd = tx.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| xd[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xd[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Softmax { x, axis }))
    }

    /// Normalizes each row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let tx = self.value(x);
        let n = tx.cols();
        for p in [gamma, beta] {
            let tp = self.value(p);
            if tp.rank() != 1 || tp.shape()[0] != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: tp.shape().to_vec(),
                });
            }
        }
        let rows = tx.rows();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gd[c] + bd[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout: at training time each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; otherwise identity.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, rg, Op::Dropout { x, mask }))
    }

    /// Mean squared error over the rows selected by `mask` (one entry per row).
    pub fn mse_loss(&mut self, pred: Var, target: Var, mask: &Tensor) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(Error::Shape {
                op: "mse_loss",
                lhs: tp.shape().to_vec(),
                rhs: tt.shape().to_vec(),
            });
        }
        let rows = tp.rows();
        let cols = tp.cols();
        let mask = check_mask("mse_loss", mask, rows)?;
        let selected: f64 = mask.iter().sum();
        let count = selected * cols as f64;
        if count == 0.0 {
            return Err(Error::EmptyMask("mse_loss"));
        }
        let (pd, td) = (tp.data(), tt.data());
        let mut acc = 0.0;
        for r in 0..rows {
            if mask[r] == 0.0 {
                continue;
            }
            for c in 0..cols {
                let d = pd[r * cols + c] - td[r * cols + c];
                acc += d * d;
            }
        }
        let rg = self.rg(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(acc / count),
            rg,
            Op::Mse {
                pred,
                target,
                mask,
                count,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, over the rows selected by `mask`.
    pub fn cross_entropy_loss(
        &mut self,
        logits: Var,
        labels: &[usize],
        mask: &Tensor,
    ) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || labels.len() != tl.shape()[0] {
            return Err(Error::Shape {
                op: "cross_entropy_loss",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (rows, k) = (tl.shape()[0], tl.shape()[1]);
        let mask = check_mask("cross_entropy_loss", mask, rows)?;
        if let Some((frame, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(Error::LabelOutOfRange {
                frame,
                label,
                classes: k,
            });
        }
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Err(Error::EmptyMask("cross_entropy_loss"));
        }
        let mut probs = vec![0.0; rows * k];
        let mut acc = 0.0;
        for r in 0..rows {
            let row = tl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
            }
            if mask[r] != 0.0 {
                acc += lse - row[labels[r]];
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(acc / count),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                mask,
                probs,
                count,
            },
        ))
    }

    /// Scaled dot-product multi-head self-attention over a stacked batch.
    ///
    /// `q`, `k`, `v` are `[batch·seq_len × d]` with `d` divisible by `heads`.
    /// Keys whose `key_mask` entry is false get zero attention probability.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let AttnLayout {
            batch,
            seq_len: t,
            heads,
        } = layout;
        for other in [tk, tv] {
            if other.shape() != tq.shape() {
                return Err(Error::Shape {
                    op: "attention",
                    lhs: tq.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        let d = tq.cols();
        if tq.rank() != 2 || tq.rows() != batch * t || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention layout {layout:?} incompatible with shape {:?}",
                tq.shape()
            )));
        }
        if key_mask.len() != batch * t {
            return Err(Error::invalid(format!(
                "attention key mask has {} entries, expected {}",
                key_mask.len(),
                batch * t
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * t * t];
        let mut out = vec![0.0; batch * t * d];
        for b in 0..batch {
            let keys = &key_mask[b * t..(b + 1) * t];
            for h in 0..heads {
                let off = b * t * d + h * dh;
                let p = &mut probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                gemm(
                    scale,
                    MatRef::strided(tq.data(), off, t, dh, d, 1),
                    MatRef::strided(tk.data(), off, t, dh, d, 1).t(),
                    0.0,
                    MatMut::new(p, t, t),
                );
                for i in 0..t {
                    masked_softmax_row(&mut p[i * t..(i + 1) * t], keys);
                }
                gemm(
                    1.0,
                    MatRef::new(p, t, t),
                    MatRef::strided(tv.data(), off, t, dh, d, 1),
                    0.0,
                    MatMut::strided(&mut out, off, t, dh, d, 1),
                );
            }
        }
        let shape = tq.shape().to_vec();
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them, accumulating at fan-in.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let tl = self.value(loss);
        if tl.numel() != 1 {
            return Err(Error::NonScalarLoss(tl.shape().to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[i];
        let val = |v: Var| &nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                accumulate(nodes, grads, *a, |ga| {
                    gemm(
                        1.0,
                        MatRef::new(g, m, n),
                        MatRef::new(tb.data(), k, n).t(),
                        1.0,
                        MatMut::new(ga, m, k),
                    )
                });
                accumulate(nodes, grads, *b, |gb| {
                    gemm(
                        1.0,
                        MatRef::new(ta.data(), m, k).t(),
                        MatRef::new(g, m, n),
                        1.0,
                        MatMut::new(gb, k, n),
                    )
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                let gt = transpose_data(g, n, m);
                accumulate(nodes, grads, *a, |ga| add_into(ga, &gt));
            }
            Op::Add(a, b, mode) => {
                accumulate(nodes, grads, *a, |ga| add_into(ga, g));
                let mode = *mode;
                accumulate(nodes, grads, *b, |gb| reduce_bcast(gb, g, mode, 1.0));
            }
            Op::Sub(a, b, mode) => {
                accumulate(nodes, grads, *a, |ga| add_into(ga, g));
                let mode = *mode;
                accumulate(nodes, grads, *b, |gb| reduce_bcast(gb, g, mode, -1.0));
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (val(*a), val(*b));
                let cols = ta.cols().max(1);
                let mode = *mode;
                let bat = |idx: usize| match mode {
                    Bcast::Same => tb.data()[idx],
                    Bcast::Row => tb.data()[idx % cols],
                    Bcast::Scalar => tb.data()[0],
                };
                accumulate(nodes, grads, *a, |ga| {
                    for (idx, gi) in ga.iter_mut().enumerate() {
                        *gi += g[idx] * bat(idx);
                    }
                });
                let ga_b: Vec<f64> = g.iter().zip(ta.data()).map(|(gi, x)| gi * x).collect();
                accumulate(nodes, grads, *b, |gb| reduce_bcast(gb, &ga_b, mode, 1.0));
            }
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(nodes, grads, *a, |ga| {
                    for (gi, go) in ga.iter_mut().zip(g) {
                        *gi += s * go;
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                accumulate(nodes, grads, *a, |ga| {
                    for idx in 0..ga.len() {
                        if x[idx] > 0.0 {
                            ga[idx] += g[idx];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                accumulate(nodes, grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g0));
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                accumulate(nodes, grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * n + j) * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let rows = node.value.rows();
                let gd = val(*gamma).data();
                accumulate(nodes, grads, *gamma, |gg| {
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                accumulate(nodes, grads, *beta, |gb| {
                    for r in 0..rows {
                        for c in 0..n {
                            gb[c] += g[r * n + c];
                        }
                    }
                });
                accumulate(nodes, grads, *x, |gx| {
                    let nf = n as f64;
                    for r in 0..rows {
                        let base = r * n;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = g[base + c] * gd[c];
                            s1 += dh;
                            s2 += dh * xhat[base + c];
                        }
                        for c in 0..n {
                            let dh = g[base + c] * gd[c];
                            gx[base + c] += inv_std[r] / nf * (nf * dh - s1 - xhat[base + c] * s2);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                accumulate(nodes, grads, *x, |gx| {
                    for idx in 0..gx.len() {
                        gx[idx] += g[idx] * mask[idx];
                    }
                });
            }
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let (tp, tt) = (val(*pred), val(*target));
                let cols = tp.cols();
                let scale = 2.0 * g[0] / count;
                let diff = |idx: usize| {
                    if mask[idx / cols] == 0.0 {
                        0.0
                    } else {
                        scale * (tp.data()[idx] - tt.data()[idx])
                    }
                };
                accumulate(nodes, grads, *pred, |gp| {
                    for (idx, gi) in gp.iter_mut().enumerate() {
                        *gi += diff(idx);
                    }
                });
                accumulate(nodes, grads, *target, |gt| {
                    for (idx, gi) in gt.iter_mut().enumerate() {
                        *gi -= diff(idx);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
                count,
            } => {
                let k = val(*logits).cols();
                let scale = g[0] / count;
                accumulate(nodes, grads, *logits, |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        if mask[r] == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => backprop_attention(nodes, grads, [*q, *k, *v], *layout, probs, g),
            Op::Custom { inputs, rule } => {
                let tins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let contribs = rule.backward(&tins, &node.value, g);
                for (v, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        accumulate(nodes, grads, *v, |gv| add_into(gv, &c));
                    }
                }
            }
        }
    }
}

fn accumulate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    contrib: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.numel();
    contrib(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
}

fn backprop_attention(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    [q, k, v]: [Var; 3],
    layout: AttnLayout,
    probs: &[f64],
    g: &[f64],
) {
    let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let AttnLayout {
        batch,
        seq_len: t,
        heads,
    } = layout;
    let d = tq.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; batch * t * d];
    let mut dk = vec![0.0; batch * t * d];
    let mut dv = vec![0.0; batch * t * d];
    let mut ds = vec![0.0; t * t];
    for b in 0..batch {
        for h in 0..heads {
            let off = b * t * d + h * dh;
            let p = &probs[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
            let go = MatRef::strided(g, off, t, dh, d, 1);
            // dV = Pᵀ·dO
            gemm(
                1.0,
                MatRef::new(p, t, t).t(),
                go,
                0.0,
                MatMut::strided(&mut dv, off, t, dh, d, 1),
            );
            // dP = dO·Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP))
            gemm(
                1.0,
                go,
                MatRef::strided(tv.data(), off, t, dh, d, 1).t(),
                0.0,
                MatMut::new(&mut ds, t, t),
            );
            for i in 0..t {
                let row = i * t..(i + 1) * t;
                let dot: f64 = p[row.clone()]
                    .iter()
                    .zip(&ds[row.clone()])
                    .map(|(a, b)| a * b)
                    .sum();
                for j in row {
                    ds[j] = p[j] * (ds[j] - dot);
                }
            }
            gemm(
                scale,
                MatRef::new(&ds, t, t),
                MatRef::strided(tk.data(), off, t, dh, d, 1),
                0.0,
                MatMut::strided(&mut dq, off, t, dh, d, 1),
            );
            gemm(
                scale,
                MatRef::new(&ds, t, t).t(),
                MatRef::strided(tq.data(), off, t, dh, d, 1),
                0.0,
                MatMut::strided(&mut dk, off, t, dh, d, 1),
            );
        }
    }
    accumulate(nodes, grads, q, |gq| add_into(gq, &dq));
    accumulate(nodes, grads, k, |gk| add_into(gk, &dk));
    accumulate(nodes, grads, v, |gv| add_into(gv, &dv));
}

fn masked_softmax_row(row: &mut [f64], keys: &[bool]) {
    let max = row
        .iter()
        .zip(keys)
        .filter(|(_, &k)| k)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut z = 0.0;
    for (v, &k) in row.iter_mut().zip(keys) {
        *v = if k { (*v - max).exp() } else { 0.0 };
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn check_mask(op: &'static str, mask: &Tensor, rows: usize) -> Result<Vec<f64>> {
    if mask.numel() != rows {
        return Err(Error::Shape {
            op,
            lhs: vec![rows],
            rhs: mask.shape().to_vec(),
        });
    }
    if let Some(bad) = mask.data().iter().find(|&&m| m != 0.0 && m != 1.0) {
        return Err(Error::invalid(format!(
            "{op}: mask entry {bad} not in {{0, 1}}"
        )));
    }
    Ok(mask.data().to_vec())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_data(src: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = src[i * n + j];
        }
    }
    out
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn reduce_bcast(dst: &mut [f64], g: &[f64], mode: Bcast, sign: f64) {
    match mode {
        Bcast::Same => {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += sign * s;
            }
        }
        Bcast::Row => {
            let cols = dst.len();
            for (idx, s) in g.iter().enumerate() {
                dst[idx % cols] += sign * s;
            }
        }
        Bcast::Scalar => dst[0] += sign * g.iter().sum::<f64>(),
    }
}
