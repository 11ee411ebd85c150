use super::kernels::{gelu, gelu_grad, gemm, log_sum_exp, softmax_row};
use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
        plan: MatMulPlan,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

/// Batch bookkeeping for a (possibly broadcast) batched matmul.
#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `(a_offset, b_offset)` in matrices, one per output batch entry.
    pairs: Vec<(usize, usize)>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of differentiable operations.
///
/// Nodes are appended in execution order, so a node's inputs always have
/// smaller indices. A node requires a gradient when any of its inputs does;
/// backward skips everything else, which keeps frozen sub-graphs free.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<Var>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a copy of `t`; it participates in differentiation iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), Op::Leaf, t.requires_grad)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participates in differentiation and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates the tape gradient of each bound var into its tensor.
    pub fn write_grad(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g);
        }
    }

    /// Node order visited by the last `backward` call.
    pub fn backward_trace(&self) -> &[Var] {
        &self.visited
    }

    // ---- operations -------------------------------------------------------

    /// Batched matrix product `a[..., m, k] @ b[..., k, n]`. Batch dimensions
    /// broadcast numpy-style (missing or size-1 dimensions repeat).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..., m, k] @ b[..., n, k]^T`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];

        let (plan, mut shape) = if bb.iter().all(|&d| d == 1) && bb.len() <= ba.len() {
            // Fold a's batch into rows: one large product.
            let rows: usize = ba.iter().product::<usize>() * m;
            let plan = MatMulPlan {
                m: rows,
                k,
                n,
                pairs: vec![(0, 0)],
            };
            (plan, ba.to_vec())
        } else {
            let rank = ba.len().max(bb.len());
            let pad = |s: &[usize]| {
                let mut v = vec![1; rank - s.len()];
                v.extend_from_slice(s);
                v
            };
            let (pa, pb) = (pad(ba), pad(bb));
            let mut out_batch = Vec::with_capacity(rank);
            for (&x, &y) in pa.iter().zip(&pb) {
                if x == y || y == 1 {
                    out_batch.push(x);
                } else if x == 1 {
                    out_batch.push(y);
                } else {
                    return Err(mismatch());
                }
            }
            let total: usize = out_batch.iter().product();
            let mut pairs = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let (mut oa, mut ob) = (0, 0);
                for d in 0..rank {
                    oa = oa * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                    ob = ob * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
                }
                pairs.push((oa, ob));
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < out_batch[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            (MatMulPlan { m, k, n, pairs }, out_batch)
        };
        shape.push(m);
        shape.push(n);

        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let mut out = vec![0.0; plan.pairs.len() * plan.m * n];
        let (sza, szb, szc) = (plan.m * k, k * n, plan.m * n);
        for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
            gemm(
                plan.m,
                k,
                n,
                &va[oa * sza..(oa + 1) * sza],
                false,
                &vb[ob * szb..(ob + 1) * szb],
                tb,
                &mut out[bi * szc..(bi + 1) * szc],
                0.0,
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, tb, plan }, rg))
    }

    /// Elementwise sum. `b` may also be a suffix-shaped tensor broadcast over
    /// the leading dimensions of `a` (bias rows, positional tables).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (va, vb) = (&self.node(a).value, &self.node(b).value);
        let out: Vec<f64> = va
            .chunks_exact(vb.len())
            .flat_map(|chunk| chunk.iter().zip(vb).map(|(x, y)| x + y))
            .collect();
        let shape = sa.to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, Op::Scale { x, c }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(shape, out, Op::Gelu { x }, rg)
    }

    /// Normalizes each last-dimension row to zero mean and unit variance
    /// (population variance plus `1e-5`), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false)
    }

    /// Softmax over the last dimension of a `[..., T, S]` score tensor where
    /// query row `t` only sees keys `0..=t`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() < 2 {
            return Err(Error::invalid("causal_softmax", "need at least 2 dimensions"));
        }
        Ok(self.softmax_impl(x, true))
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Var {
        let shape = self.shape(x).to_vec();
        let s = shape[shape.len() - 1];
        let t = if causal { shape[shape.len() - 2] } else { 1 };
        let mut out = self.value(x).to_vec();
        for (r, row) in out.chunks_exact_mut(s).enumerate() {
            let valid = if causal { (r % t + 1).min(s) } else { s };
            softmax_row(row, valid);
        }
        let rg = self.requires_grad(x);
        self.push(shape, out, Op::Softmax { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(shape, out, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(
                "permute",
                format!("bad permutation {perm:?} for {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x), &shape, perm);
        let rg = self.requires_grad(x);
        Ok(self.push(out_shape, out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Gathers rows of a `[V, D]` table; output is `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::invalid("embedding", format!("table must be 2-D, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::TokenOutOfRange { id, vocab: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.requires_grad(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` viewed as `[T, V]`. Positions whose target equals
    /// `ignore_index` are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let v = *self.shape(logits).last().expect("non-empty shape");
        let rows = self.value(logits).len() / v;
        if targets.len() != rows {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} targets for {rows} logit rows", targets.len()),
            ));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; lv.len()];
        let mut tg = Vec::with_capacity(rows);
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                tg.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::TokenOutOfRange { id: t, vocab: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            tg.push(Some(t));
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("cross_entropy", "every target is ignored"));
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Replaces gradients from any
    /// earlier call on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.visited.clear();
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.visited.push(Var(i));
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].shape.iter().product();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are moved out temporarily so their cached buffers can be read
        // while sibling gradients are mutated.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb, plan } => self.matmul_backward(*a, *b, *tb, plan, g),
            Op::Add { a, b } => {
                self.accum(*a, |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let nb: usize = self.nodes[b.0].shape.iter().product();
                self.accum(*b, |gb| {
                    for chunk in g.chunks_exact(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul { a, b } => {
                let vb = std::mem::take(&mut self.nodes[b.0].value);
                self.accum(*a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&vb) {
                        *x += gi * bi;
                    }
                });
                self.nodes[b.0].value = vb;
                let va = std::mem::take(&mut self.nodes[a.0].value);
                self.accum(*b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&va) {
                        *x += gi * ai;
                    }
                });
                self.nodes[a.0].value = va;
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(*x, |gx| gx.iter_mut().zip(g).for_each(|(v, gi)| *v += c * gi));
            }
            Op::Gelu { x } => {
                let vx = std::mem::take(&mut self.nodes[x.0].value);
                self.accum(*x, |gx| {
                    for ((v, gi), xi) in gx.iter_mut().zip(g).zip(&vx) {
                        *v += gi * gelu_grad(*xi);
                    }
                });
                self.nodes[x.0].value = vx;
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].shape[0];
                let gv = self.nodes[gain.0].value.clone();
                self.accum(*gain, |gg| {
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                self.accum(*bias, |gb| {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                });
                self.accum(*x, |gx| {
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            dh[c] = gr[c] * gv[c];
                            m1 += dh[c];
                            m2 += dh[c] * hr[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let s = *self.nodes[i].shape.last().expect("non-empty shape");
                let y = std::mem::take(&mut self.nodes[i].value);
                self.accum(*x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_exact_mut(s).zip(g.chunks_exact(s)).zip(y.chunks_exact(s)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..s {
                            gxr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
                self.nodes[i].value = y;
            }
            Op::Reshape { x } => {
                self.accum(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, b)| *a += b));
            }
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[i].shape.clone();
                let mut inv = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inv[p] = o;
                }
                let back = permute_data(g, &out_shape, &inv);
                self.accum(*x, |gx| gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b));
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                self.accum(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = *self.nodes[logits.0].shape.last().expect("non-empty shape");
                let scale = g[0] / *count as f64;
                self.accum(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * v..(r + 1) * v];
                        for c in 0..v {
                            row[c] += scale * probs[r * v + c];
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::Sum { x } => {
                let s = g[0];
                self.accum(*x, |gx| gx.iter_mut().for_each(|v| *v += s));
            }
        }
        self.nodes[i].op = op;
    }

    fn matmul_backward(&mut self, a: Var, b: Var, tb: bool, plan: &MatMulPlan, g: &[f64]) {
        let MatMulPlan { m, k, n, ref pairs } = *plan;
        let (sza, szb, szc) = (m * k, k * n, m * n);
        if self.nodes[a.0].requires_grad {
            let vb = std::mem::take(&mut self.nodes[b.0].value);
            self.accum(a, |ga| {
                for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                    // dA = dC · op(B)^T
                    gemm(
                        m,
                        n,
                        k,
                        &g[bi * szc..(bi + 1) * szc],
                        false,
                        &vb[ob * szb..(ob + 1) * szb],
                        !tb,
                        &mut ga[oa * sza..(oa + 1) * sza],
                        1.0,
                    );
                }
            });
            self.nodes[b.0].value = vb;
        }
        if self.nodes[b.0].requires_grad {
            let va = std::mem::take(&mut self.nodes[a.0].value);
            self.accum(b, |gb| {
                for (bi, &(oa, ob)) in pairs.iter().enumerate() {
                    let (ab, cb) = (&va[oa * sza..(oa + 1) * sza], &g[bi * szc..(bi + 1) * szc]);
                    let dst = &mut gb[ob * szb..(ob + 1) * szb];
                    if tb {
                        // B stored [n, k]: dB = dC^T · A
                        gemm(n, m, k, cb, true, ab, false, dst, 1.0);
                    } else {
                        // dB = A^T · dC
                        gemm(k, m, n, ab, true, cb, false, dst, 1.0);
                    }
                }
            });
            self.nodes[a.0].value = va;
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}
