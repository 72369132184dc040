use super::kernels::{self, AttnShape};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clip01(Var),
    Affine {
        x: Var,
        scale: f32,
    },
    Silu(Var),
    Sum(Var),
    Mean(Var),
    Index {
        x: Var,
        index: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        probs: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Rope {
        x: Var,
        heads: usize,
        head_dim: usize,
        pos0: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one training step.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Vec<f32>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f32> {
        self.get(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; len])
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f32>>, len: usize) -> &mut Vec<f32> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    /// Matrix product of `a[m×k]` and `b[k×n]`; leading dimensions of `a`
    /// are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, k) = at.as_matrix();
        let (k2, n) = match bt.shape() {
            [r, c] => (*r, *c),
            _ => return Err(shape_err("matmul", at, bt)),
        };
        if k != k2 || at.shape().len() < 2 {
            return Err(shape_err("matmul", at, bt));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(at.data(), bt.data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<Tensor> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() == bt.shape() {
            let data = at
                .data()
                .iter()
                .zip(bt.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(at.shape().to_vec(), data)
        } else if bt.numel() == 1 {
            let y = bt.item();
            Tensor::new(
                at.shape().to_vec(),
                at.data().iter().map(|&x| f(x, y)).collect(),
            )
        } else if at.numel() == 1 {
            let x = at.item();
            Tensor::new(
                bt.shape().to_vec(),
                bt.data().iter().map(|&y| f(x, y)).collect(),
            )
        } else {
            Err(shape_err(name, at, bt))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise product; either operand may be a single element.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let xt = self.value(x);
        let t = Tensor {
            shape: xt.shape().to_vec(),
            data: xt.data().iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).data().iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x, f32::ln, Op::Log(x)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    /// `min(1, max(0, x))` with the hardtanh subgradient.
    pub fn clip01(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.clamp(0.0, 1.0), Op::Clip01(x))
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f32) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::silu, Op::Silu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f32>() / t.numel() as f32;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Single element of a tensor as a one-element tensor.
    pub fn index(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or(Error::Index {
            what: "tensor",
            index,
            size: t.numel(),
        })?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Index { x, index }, rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = xt.as_matrix();
        if start >= end || end > rows {
            return Err(Error::Index {
                what: "rows",
                index: end,
                size: rows,
            });
        }
        let t = Tensor::new(
            vec![end - start, cols],
            xt.data()[start * cols..end * cols].to_vec(),
        )?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows { x, start }, rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let (rows, cols) = xt.as_matrix();
        let mut data = xt.data().to_vec();
        for r in 0..rows {
            kernels::softmax_inplace(&mut data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor {
            shape: xt.shape().to_vec(),
            data,
        };
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax(x), rg)
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (rows, cols) = xt.as_matrix();
        if wt.numel() != cols {
            return Err(shape_err("rmsnorm", xt, wt));
        }
        let mut out = vec![0.0; rows * cols];
        let mut inv = Vec::with_capacity(rows);
        for r in 0..rows {
            inv.push(kernels::rmsnorm_row(
                &xt.data()[r * cols..(r + 1) * cols],
                wt.data(),
                eps,
                &mut out[r * cols..(r + 1) * cols],
            ));
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(t, Op::RmsNorm { x, w, inv }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, vocab) = lt.as_matrix();
        if rows != targets.len() || rows == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lt.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = lt.data().to_vec();
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t as usize >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t as usize,
                    size: vocab,
                });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let lse = kernels::log_sum_exp(row);
            total += (lse - row[t as usize]) as f64;
            kernels::softmax_inplace(row);
        }
        let loss = (total / rows as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = tt.as_matrix();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id as usize,
                    size: vocab,
                });
            }
            out.extend_from_slice(tt.row(id as usize));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotary encoding of `x[s × heads·head_dim]` at positions `pos0..pos0+s`.
    pub fn rope(&mut self, x: Var, heads: usize, head_dim: usize, pos0: usize) -> Result<Var> {
        let xt = self.value(x);
        let (rows, cols) = xt.as_matrix();
        if cols != heads * head_dim || !head_dim.is_multiple_of(2) {
            return Err(Error::Dimension {
                op: "rope",
                left: xt.shape().to_vec(),
                right: vec![heads, head_dim],
            });
        }
        let mut data = xt.data().to_vec();
        for r in 0..rows {
            kernels::rope_row(
                &mut data[r * cols..(r + 1) * cols],
                heads,
                head_dim,
                pos0 + r,
                false,
            );
        }
        let t = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            t,
            Op::Rope {
                x,
                heads,
                head_dim,
                pos0,
            },
            rg,
        ))
    }

    /// Causal grouped-query attention over `q[s × H·hd]`, `k`, `v[s × KV·hd]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (s, qw) = qt.as_matrix();
        let (sk, kw) = kt.as_matrix();
        if qw != shape.q_width() || kw != shape.kv_width() || sk != s || kt.shape() != vt.shape() {
            return Err(shape_err("attention", qt, kt));
        }
        let h = shape.heads;
        let mut out = vec![0.0; s * qw];
        let mut probs = vec![0.0; h * s * (s + 1) / 2];
        for i in 0..s {
            let off = h * i * (i + 1) / 2;
            kernels::attend_row(
                qt.row(i),
                kt.data(),
                vt.data(),
                i + 1,
                shape,
                &mut out[i * qw..(i + 1) * qw],
                &mut probs[off..off + h * (i + 1)],
            );
        }
        let t = Tensor::new(vec![s, qw], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let n = self.value(root).numel();
        self.backward_with_seed(root, &vec![1.0; n])
    }

    /// Reverse sweep seeded with an explicit output gradient.
    pub fn backward_with_seed(&self, root: Var, seed: &[f32]) -> Grads {
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        assert_eq!(seed.len(), self.value(root).numel(), "seed shape");
        grads[root.0] = Some(seed.to_vec());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f32>>], v: Var) -> &'g mut Vec<f32> {
        let len = self.nodes[v.0].value.numel();
        accumulate(&mut grads[v.0], len)
    }

    fn broadcast_acc(&self, grads: &mut [Option<Vec<f32>>], v: Var, g: impl Iterator<Item = f32>) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(grads, v);
        if slot.len() == 1 {
            slot[0] += g.sum::<f32>();
        } else {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    let bt = self.value(*b).data();
                    kernels::matmul_nt_acc(g, bt, *m, *k, *n, self.slot(grads, *a));
                }
                if self.wants(*b) {
                    let at = self.value(*a).data();
                    kernels::matmul_tn_acc(at, g, *m, *k, *n, self.slot(grads, *b));
                }
            }
            Op::Add(a, b) => {
                self.broadcast_acc(grads, *a, g.iter().copied());
                self.broadcast_acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.broadcast_acc(grads, *a, g.iter().copied());
                self.broadcast_acc(grads, *b, g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let other = |t: &Tensor, i: usize| {
                    if t.numel() == 1 {
                        t.item()
                    } else {
                        t.data()[i]
                    }
                };
                self.broadcast_acc(
                    grads,
                    *a,
                    g.iter().enumerate().map(|(i, &x)| x * other(bt, i)),
                );
                self.broadcast_acc(
                    grads,
                    *b,
                    g.iter().enumerate().map(|(i, &x)| x * other(at, i)),
                );
            }
            Op::Sigmoid(x) => {
                self.broadcast_acc(
                    grads,
                    *x,
                    g.iter().zip(out).map(|(&gi, &y)| gi * y * (1.0 - y)),
                );
            }
            Op::Log(x) => {
                let xt = self.value(*x).data();
                self.broadcast_acc(grads, *x, g.iter().zip(xt).map(|(&gi, &v)| gi / v));
            }
            Op::Exp(x) => {
                self.broadcast_acc(grads, *x, g.iter().zip(out).map(|(&gi, &y)| gi * y));
            }
            Op::Clip01(x) => {
                let xt = self.value(*x).data();
                self.broadcast_acc(
                    grads,
                    *x,
                    g.iter()
                        .zip(xt)
                        .map(|(&gi, &v)| if v > 0.0 && v < 1.0 { gi } else { 0.0 }),
                );
            }
            Op::Affine { x, scale } => {
                self.broadcast_acc(grads, *x, g.iter().map(|&gi| gi * scale));
            }
            Op::Silu(x) => {
                let xt = self.value(*x).data();
                self.broadcast_acc(
                    grads,
                    *x,
                    g.iter().zip(xt).map(|(&gi, &v)| {
                        let s = kernels::sigmoid(v);
                        gi * s * (1.0 + v * (1.0 - s))
                    }),
                );
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.broadcast_acc(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / n as f32;
                self.broadcast_acc(grads, *x, std::iter::repeat_n(v, n));
            }
            Op::Index { x, index } => {
                if self.wants(*x) {
                    self.slot(grads, *x)[*index] += g[0];
                }
            }
            Op::SliceRows { x, start } => {
                if self.wants(*x) {
                    let (_, cols) = node.value.as_matrix();
                    let off = start * cols;
                    for (s, &gv) in self.slot(grads, *x)[off..off + g.len()].iter_mut().zip(g) {
                        *s += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let (rows, cols) = node.value.as_matrix();
                    let slot = self.slot(grads, *x);
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dotp = kernels::dot(gr, y);
                        for c in 0..cols {
                            slot[r * cols + c] += y[c] * (gr[c] - dotp);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (rows, cols) = xt.as_matrix();
                let wd = wt.data();
                if self.wants(*x) {
                    let slot = self.slot(grads, *x);
                    for r in 0..rows {
                        let xr = &xt.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let ir = inv[r];
                        let mut s = 0.0f32;
                        for c in 0..cols {
                            s += gr[c] * wd[c] * xr[c];
                        }
                        let coef = ir * ir * ir * s / cols as f32;
                        for c in 0..cols {
                            slot[r * cols + c] += ir * gr[c] * wd[c] - xr[c] * coef;
                        }
                    }
                }
                if self.wants(*w) {
                    let slot = self.slot(grads, *w);
                    for r in 0..rows {
                        let xr = &xt.data()[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            slot[c] += gr[c] * xr[c] * inv[r];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let (rows, vocab) = self.value(*logits).as_matrix();
                    let scale = g[0] / rows as f32;
                    let slot = self.slot(grads, *logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..vocab {
                            let onehot = if c == t as usize { 1.0 } else { 0.0 };
                            slot[r * vocab + c] += scale * (probs[r * vocab + c] - onehot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let (_, d) = self.value(*table).as_matrix();
                    let slot = self.slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut slot[id as usize * d..(id as usize + 1) * d];
                        for (s, &gv) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                pos0,
            } => {
                if self.wants(*x) {
                    let (rows, cols) = node.value.as_matrix();
                    let mut back = g.to_vec();
                    for r in 0..rows {
                        kernels::rope_row(
                            &mut back[r * cols..(r + 1) * cols],
                            *heads,
                            *head_dim,
                            pos0 + r,
                            true,
                        );
                    }
                    for (s, b) in self.slot(grads, *x).iter_mut().zip(back) {
                        *s += b;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (s, qw) = qt.as_matrix();
        let kvw = shape.kv_width();
        let hd = shape.head_dim;
        let h = shape.heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut dq = vec![0.0; s * qw];
        let mut dk = vec![0.0; s * kvw];
        let mut dv = vec![0.0; s * kvw];
        let mut dp = vec![0.0; s];
        for i in 0..s {
            let off = h * i * (i + 1) / 2;
            for head in 0..h {
                let grp = shape.kv_head_of(head);
                let p = &probs[off + head * (i + 1)..off + (head + 1) * (i + 1)];
                let go = &g[i * qw + head * hd..i * qw + (head + 1) * hd];
                let qi = &qt.data()[i * qw + head * hd..i * qw + (head + 1) * hd];
                let mut weighted = 0.0f32;
                for j in 0..=i {
                    let vj = &vt.data()[j * kvw + grp * hd..j * kvw + (grp + 1) * hd];
                    dp[j] = kernels::dot(go, vj);
                    weighted += p[j] * dp[j];
                    let dvj = &mut dv[j * kvw + grp * hd..j * kvw + (grp + 1) * hd];
                    for (d, &o) in dvj.iter_mut().zip(go) {
                        *d += p[j] * o;
                    }
                }
                let dqi = &mut dq[i * qw + head * hd..i * qw + (head + 1) * hd];
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let kj = &kt.data()[j * kvw + grp * hd..j * kvw + (grp + 1) * hd];
                    for (d, &kv) in dqi.iter_mut().zip(kj) {
                        *d += ds * kv;
                    }
                    let dkj = &mut dk[j * kvw + grp * hd..j * kvw + (grp + 1) * hd];
                    for (d, &qv) in dkj.iter_mut().zip(qi) {
                        *d += ds * qv;
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                for (s, x) in self.slot(grads, var).iter_mut().zip(d) {
                    *s += x;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i = tape.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(mat(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

        let r = tape.constant(mat(1, 2, &[1.0, 2.0]));
        let col = tape.constant(mat(2, 1, &[3.0, 4.0]));
        let d = tape.matmul(r, col).unwrap();
        assert_eq!(tape.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn sigmoid_and_clip_points() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_vec(vec![0.0]));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).item(), 0.5);

        let hi = tape.param(Tensor::from_vec(vec![kernels::sigmoid(10.0) * 1.2 - 0.1]));
        assert!((tape.value(hi).item() - 1.0999455).abs() < 1e-6);
        let c = tape.clip01(hi);
        assert_eq!(tape.value(c).item(), 1.0);
        let g = tape.backward(c);
        assert_eq!(g.get(hi).unwrap(), &[0.0]);

        let mut tape = Tape::new();
        let mid = tape.param(Tensor::from_vec(vec![0.5]));
        let c = tape.clip01(mid);
        assert_eq!(tape.value(c).item(), 0.5);
        assert_eq!(tape.backward(c).get(mid).unwrap(), &[1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn softmax_and_cross_entropy_examples() {
        let mut tape = Tape::new();
        let x = tape.param(mat(1, 2, &[0.0, 0.0]));
        let s = tape.softmax_lastdim(x);
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let logits = tape.param(mat(1, 2, &[1000.0, 0.0]));
        let ce = tape.cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-6);
        assert!(matches!(
            tape.cross_entropy(logits, &[2]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn frozen_inputs_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.param(mat(1, 2, &[1.0, 1.0]));
        let y = tape.matmul(x, w).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s);
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 7.0]);
    }
}
