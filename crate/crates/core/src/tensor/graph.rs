use super::kernels::{gelu, gelu_grad, gemm, inverse_perm, permute, permuted_shape, softmax_rows};
use super::Tensor;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        // b is shared across the batch (rank-2 weight)
        shared_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    MulScalar(Var, f64),
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// node list is already a topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis..].iter().product();
    (outer, inner)
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, t.data, rg, Op::Leaf)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Snapshot of a node as a [`Tensor`], carrying its gradient when one has
    /// been computed.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: n.requires_grad,
            grad: if n.requires_grad {
                self.grad(v).map(<[f64]>::to_vec)
            } else {
                None
            },
        }
    }

    /// Matrix product over the last two axes.
    ///
    /// Accepts `[m,k]·[k,n]`, `[..,m,k]·[k,n]` (weight shared over the
    /// leading axes) and `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(bad());
        }
        let (batch, m, shared_b, out_shape) = if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(n);
            (1, rows, true, out)
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
            (sa[0], m, false, vec![sa[0], m, n])
        } else {
            return Err(bad());
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.value(a);
            let db = self.value(b);
            for i in 0..batch {
                let bs = if shared_b { 0 } else { i * k * n };
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[bs..bs + k * n],
                    false,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            out_shape,
            out,
            rg,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Add(a, b)))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Op::Mul(a, b)))
    }

    /// Adds a `[d]` bias to every row of a `[.., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} for input {:?}", self.shape(bias), sx),
            ));
        }
        let b = self.value(bias);
        let data = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::AddBias { x, bias }))
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Var {
        let data = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, rg, Op::MulScalar(x, s))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("{:?} into {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, rg, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = permuted_shape(self.shape(x), perm)?;
        let data = permute(self.value(x), self.shape(x), perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, false).expect("softmax over last axis")
    }

    /// Softmax over the last axis of a `[.., L, L]` score tensor where
    /// position `i` only sees positions `0..=i`.
    pub fn softmax_causal(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let s = self.shape(x);
        let n = *s.last().unwrap();
        if causal && (s.len() < 2 || s[s.len() - 2] != n) {
            return Err(Error::dim(
                "softmax_causal",
                format!("expected square trailing axes, got {s:?}"),
            ));
        }
        let data = softmax_rows(self.value(x), n, causal);
        let rg = self.rg(&[x]);
        Ok(self.push(s.to_vec(), data, rg, Op::Softmax(x)))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(
                "layernorm",
                format!(
                    "input {:?} with gamma {:?}, beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
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

    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), data, rg, Op::Gelu(x))
    }

    /// Embedding lookup: rows `ids` of a `[vocab, d]` table, giving
    /// `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::dim(
                "embedding",
                format!("table {s:?} with {} ids", ids.len()),
            ));
        }
        let (vocab, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::dim(
                "embedding",
                format!("id {bad} out of range for table {s:?}"),
            ));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            rg,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} does not match {base:?} off axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _) = outer_inner(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let (_, inner) = outer_inner(self.shape(v), axis);
                data.extend_from_slice(&self.value(v)[o * inner..(o + 1) * inner]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            data,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("{start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let tail = inner / s[axis];
        let mut shape = s.clone();
        shape[axis] = end - start;
        let src = self.value(x);
        let mut data = Vec::with_capacity(outer * (end - start) * tail);
        for o in 0..outer {
            data.extend_from_slice(&src[o * inner + start * tail..o * inner + end * tail]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, data, rg, Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![total], rg, Op::Sum(x))
    }

    /// Mean cross-entropy of `[rows, vocab]` logits against one target id per
    /// row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let v = s[1];
        let probs = softmax_rows(self.value(logits), v, false);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[r * v + t].ln())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar. Every reachable node that requires grad
    /// ends up holding d(loss)/d(node).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].shape.iter().product();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Ops are moved out temporarily so the borrow checker lets us read the
        // node while writing into the gradient slots of its inputs.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                if self.requires_grad(a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].data);
                    self.acc(a, |ga| {
                        for t in 0..batch {
                            let bs = if shared_b { 0 } else { t * k * n };
                            gemm(
                                m,
                                n,
                                k,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &bv[bs..bs + k * n],
                                true,
                                &mut ga[t * m * k..(t + 1) * m * k],
                            );
                        }
                    });
                    self.nodes[b.0].data = bv;
                }
                if self.requires_grad(b) {
                    let av = std::mem::take(&mut self.nodes[a.0].data);
                    self.acc(b, |gb| {
                        for t in 0..batch {
                            let bs = if shared_b { 0 } else { t * k * n };
                            gemm(
                                k,
                                m,
                                n,
                                &av[t * m * k..(t + 1) * m * k],
                                true,
                                &g[t * m * n..(t + 1) * m * n],
                                false,
                                &mut gb[bs..bs + k * n],
                            );
                        }
                    });
                    self.nodes[a.0].data = av;
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(v, |gv| gv.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                }
            }
            &Op::Mul(a, b) => {
                let av = self.nodes[a.0].data.clone();
                let bv = self.nodes[b.0].data.clone();
                self.acc(a, |ga| {
                    for ((x, d), o) in ga.iter_mut().zip(g).zip(&bv) {
                        *x += d * o;
                    }
                });
                self.acc(b, |gb| {
                    for ((x, d), o) in gb.iter_mut().zip(g).zip(&av) {
                        *x += d * o;
                    }
                });
            }
            &Op::AddBias { x, bias } => {
                self.acc(x, |gx| gx.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                self.acc(bias, |gb| {
                    let d = gb.len();
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(x, r)| *x += r);
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                self.acc(x, |gx| gx.iter_mut().zip(g).for_each(|(x, d)| *x += d * s));
            }
            &Op::Reshape(x) => {
                self.acc(x, |gx| gx.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[i].shape.clone();
                let back = permute(g, &out_shape, &inverse_perm(perm));
                self.acc(*x, |gx| gx.iter_mut().zip(&back).for_each(|(x, d)| *x += d));
            }
            &Op::Softmax(x) => {
                let n = *self.nodes[i].shape.last().unwrap();
                let y = std::mem::take(&mut self.nodes[i].data);
                self.acc(x, |gx| {
                    for ((gr, yr), dr) in gx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
                self.nodes[i].data = y;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = inv_std.len();
                let d = xhat.len() / d;
                let gv = self.nodes[gamma.0].data.clone();
                self.acc(*x, |gx| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let row = r * d..(r + 1) * d;
                        let (dy, h) = (&g[row.clone()], &xhat[row.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = dy[j] * gv[j];
                            m1 += dh;
                            m2 += dh * h[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (dy[j] * gv[j] - m1 - h[j] * m2);
                        }
                    }
                });
                self.acc(*gamma, |gg| {
                    for (dy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * h[j];
                        }
                    }
                });
                self.acc(*beta, |gb| {
                    for dy in g.chunks(d) {
                        gb.iter_mut().zip(dy).for_each(|(b, d)| *b += d);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = std::mem::take(&mut self.nodes[x.0].data);
                self.acc(x, |gx| {
                    for ((o, d), v) in gx.iter_mut().zip(g).zip(&xv) {
                        *o += d * gelu_grad(*v);
                    }
                });
                self.nodes[x.0].data = xv;
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                self.acc(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, _) = outer_inner(&self.nodes[i].shape, *axis);
                let mut offset = 0;
                for o in 0..outer {
                    for &v in inputs {
                        let (_, inner) = outer_inner(&self.nodes[v.0].shape, *axis);
                        let src = &g[offset..offset + inner];
                        self.acc(v, |gv| {
                            gv[o * inner..(o + 1) * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, d)| *x += d)
                        });
                        offset += inner;
                    }
                }
            }
            &Op::Slice { x, axis, start } => {
                let in_shape = self.nodes[x.0].shape.clone();
                let (outer, inner) = outer_inner(&in_shape, axis);
                let tail = inner / in_shape[axis];
                let width = self.nodes[i].shape[axis] * tail;
                self.acc(x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[o * inner + start * tail..o * inner + start * tail + width];
                        dst.iter_mut()
                            .zip(&g[o * width..(o + 1) * width])
                            .for_each(|(x, d)| *x += d);
                    }
                });
            }
            &Op::Sum(x) => {
                let d = g[0];
                self.acc(x, |gx| gx.iter_mut().for_each(|x| *x += d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let scale = g[0] / targets.len() as f64;
                self.acc(*logits, |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let p = probs[r * v + j];
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (p - y);
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}
