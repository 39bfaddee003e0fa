//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly, appends one node holding its output and
//! whatever activations its adjoint needs, and returns a [`Var`] handle.
//! Inputs always precede their consumers, so [`Tape::backward`] is a single
//! reverse sweep. The tape is not mutated by `backward`, which makes repeated
//! backward passes bitwise identical.

use super::float::Float;
use super::tensor::{as_matrix, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Reshape(Var),
    Narrow {
        x: Var,
        start: usize,
        len: usize,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        lse: Vec<T>,
    },
    ZLoss {
        logits: Var,
        coef: T,
        lse: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Ordered record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.slots[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradients of `vars` out, in order.
    pub fn take(mut self, vars: &[Var]) -> Vec<Tensor<T>> {
        vars.iter()
            .map(|v| {
                let shape = self.shapes[v.0].clone();
                match self.slots[v.0].take() {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// Splits an attention operand into `(batch, seq, heads, head_dim)`.
fn attention_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [l, h, d] => Ok((1, l, h, d)),
        [b, l, h, d] => Ok((b, l, h, d)),
        _ => Err(Error::shape(
            "attention",
            format!("expected [seq, heads, hd] or [batch, seq, heads, hd], got {shape:?}"),
        )),
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input tensor (parameter or data) as a leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `x · wᵀ` for `x: [n, in]`, `w: [out, in]` (a bias-free linear layer).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        self.matmul_impl(x, w, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = as_matrix("matmul", self.value(a))?;
        let (r, c) = as_matrix("matmul", self.value(b))?;
        let (kb, n, rsb, csb) = if trans_b {
            (c, r, 1, c as isize)
        } else {
            (r, c, c as isize, 1)
        };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}{}",
                    self.value(a).shape(),
                    self.value(b).shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            rsb,
            csb,
            T::ZERO,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, trans_b }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a).shape(), self.value(b).shape())?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a).shape(), self.value(b).shape())?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), value)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} outside last axis of {:?}", start + len, src.shape()),
            ));
        }
        let rows = src.numel() / d;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src.data()[r * d + start..r * d + start + len]);
        }
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Narrow { x, start, len }, value))
    }

    /// Row lookup: `out[i] = table[rows[i]]` for `table: [V, d]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (v, d) = as_matrix("gather", self.value(table))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= v) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of range for table with {v} rows"
            )));
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("gather with no rows".into()));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    /// Bias-free layer normalization over the last axis with biased variance.
    pub fn layernorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let d = src.last_dim();
        if d < 2 {
            return Err(Error::shape("layernorm", "normalized axis must have size >= 2"));
        }
        if self.value(gain).shape() != [d] {
            return Err(Error::shape(
                "layernorm",
                format!("gain {:?} does not match last axis {d}", self.value(gain).shape()),
            ));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("layernorm eps must be > 0, got {eps}")));
        }
        let eps = T::from_f64(eps);
        let inv_d = T::ONE / T::from_f64(d as f64);
        let g = self.value(gain).data();
        let rows = src.numel() / d;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { x, gain, xhat, rstd }, value))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu_fwd);
        self.push(Op::Gelu(x), value)
    }

    /// Rotary position embedding on `[..., seq, heads, hd]`, rotating
    /// consecutive pairs by `pos · base^(-2i/hd)`.
    pub fn rope(&mut self, x: Var, base: f64) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape();
        if shape.len() < 3 {
            return Err(Error::shape(
                "rope",
                format!("expected [..., seq, heads, hd], got {shape:?}"),
            ));
        }
        let hd = shape[shape.len() - 1];
        let heads = shape[shape.len() - 2];
        let seq = shape[shape.len() - 3];
        if !hd.is_multiple_of(2) {
            return Err(Error::shape("rope", format!("head dimension {hd} is odd")));
        }
        let half = hd / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for i in 0..half {
                let theta = pos as f64 * libm::pow(base, -2.0 * i as f64 / hd as f64);
                cos.push(T::from_f64(libm::cos(theta)));
                sin.push(T::from_f64(libm::sin(theta)));
            }
        }
        let mut out = src.data().to_vec();
        rotate_pairs(&mut out, seq, heads, hd, &cos, &sin, false);
        let value = Tensor::new(shape.to_vec(), out)?;
        Ok(self.push(Op::Rope { x, cos, sin }, value))
    }

    /// Causal softmax attention, `softmax(q kᵀ/√hd + mask) v`, per batch and head.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        same_shape("attention", &shape, self.value(k).shape())?;
        same_shape("attention", &shape, self.value(v).shape())?;
        let (nb, seq, heads, hd) = attention_dims(&shape)?;
        let scale = T::ONE / T::from_f64(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let at = |b: usize, l: usize, h: usize| ((b * seq + l) * heads + h) * hd;
        let mut probs = vec![T::ZERO; nb * heads * seq * seq];
        let mut out = vec![T::ZERO; qd.len()];
        let mut scores = vec![T::ZERO; seq];
        for b in 0..nb {
            for h in 0..heads {
                for i in 0..seq {
                    let qi = &qd[at(b, i, h)..at(b, i, h) + hd];
                    let mut max = T::from_f64(f64::NEG_INFINITY);
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[at(b, j, h)..at(b, j, h) + hd];
                        *s = dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    let mut z = T::ZERO;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let o = at(b, i, h);
                    for j in 0..=i {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vj = &vd[at(b, j, h)..at(b, j, h) + hd];
                        for (acc, &x) in out[o..o + hd].iter_mut().zip(vj) {
                            *acc += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Attention { q, k, v, probs }, value))
    }

    /// Mean token cross-entropy and mean z-loss `z_coef · (log Z)²` as two
    /// scalar nodes; the trained objective is their sum.
    pub fn cross_entropy_with_zloss(&mut self, logits: Var, targets: &[usize], z_coef: f64) -> Result<(Var, Var)> {
        let (n, vocab) = as_matrix("cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!(
                "target {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let data = self.value(logits).data();
        let mut lse = Vec::with_capacity(n);
        let mut ce = T::ZERO;
        let mut zl = T::ZERO;
        for (row, &t) in data.chunks_exact(vocab).zip(targets) {
            let max = row.iter().copied().fold(T::from_f64(f64::NEG_INFINITY), T::max);
            let s: T = row.iter().map(|&x| (x - max).exp()).sum();
            let l = max + s.ln();
            lse.push(l);
            ce += l - row[t];
            zl += l * l;
        }
        let inv_n = T::ONE / T::from_f64(n as f64);
        let coef = T::from_f64(z_coef);
        let ce_var = self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                lse: lse.clone(),
            },
            Tensor::scalar(ce * inv_n),
        );
        let z_var = self.push(Op::ZLoss { logits, coef, lse }, Tensor::scalar(coef * zl * inv_n));
        Ok((ce_var, z_var))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![T::ONE]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients {
            slots: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = node.value.shape()[1];
                let (gi, ni) = (n as isize, 1);
                if *trans_b {
                    // C = A Bᵀ, B: [n, k]. dA = G B, dB = Gᵀ A.
                    let da = slot(adj, *a, av.numel());
                    T::gemm(m, n, k, g, gi, ni, bv.data(), k as isize, 1, T::ONE, da);
                    let db = slot(adj, *b, bv.numel());
                    T::gemm(n, m, k, g, 1, n as isize, av.data(), k as isize, 1, T::ONE, db);
                } else {
                    // C = A B, B: [k, n]. dA = G Bᵀ, dB = Aᵀ G.
                    let da = slot(adj, *a, av.numel());
                    T::gemm(m, n, k, g, gi, ni, bv.data(), 1, n as isize, T::ONE, da);
                    let db = slot(adj, *b, bv.numel());
                    T::gemm(k, m, n, av.data(), 1, k as isize, g, gi, ni, T::ONE, db);
                }
            }
            Op::Add(a, b) => {
                accumulate(slot(adj, *a, g.len()), g);
                accumulate(slot(adj, *b, g.len()), g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = slot(adj, *a, g.len());
                for ((d, &gi), &y) in da.iter_mut().zip(g).zip(bv) {
                    *d += gi * y;
                }
                let db = slot(adj, *b, g.len());
                for ((d, &gi), &x) in db.iter_mut().zip(g).zip(av) {
                    *d += gi * x;
                }
            }
            Op::Scale(a, c) => {
                for (d, &gi) in slot(adj, *a, g.len()).iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                for d in slot(adj, *a, n) {
                    *d += g[0];
                }
            }
            Op::Reshape(a) => accumulate(slot(adj, *a, g.len()), g),
            Op::Narrow { x, start, len } => {
                let src = self.value(*x);
                let d = src.last_dim();
                let dx = slot(adj, *x, src.numel());
                for (r, grow) in g.chunks_exact(*len).enumerate() {
                    accumulate(&mut dx[r * d + start..r * d + start + len], grow);
                }
            }
            Op::Gather { table, rows } => {
                let tv = self.value(*table);
                let d = tv.shape()[1];
                let dt = slot(adj, *table, tv.numel());
                for (&r, grow) in rows.iter().zip(g.chunks_exact(d)) {
                    accumulate(&mut dt[r * d..(r + 1) * d], grow);
                }
            }
            Op::LayerNorm { x, gain, xhat, rstd } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let inv_d = T::ONE / T::from_f64(d as f64);
                {
                    let dgain = slot(adj, *gain, d);
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dgain[j] += grow[j] * hrow[j];
                        }
                    }
                }
                let dx = slot(adj, *x, g.len());
                let mut dh = vec![T::ZERO; d];
                for (r, (grow, hrow)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).enumerate() {
                    let mut mean_dh = T::ZERO;
                    let mut mean_dh_h = T::ZERO;
                    for j in 0..d {
                        dh[j] = grow[j] * gv[j];
                        mean_dh += dh[j];
                        mean_dh_h += dh[j] * hrow[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    let out = &mut dx[r * d..(r + 1) * d];
                    for j in 0..d {
                        out[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                for ((d, &gi), &v) in slot(adj, *x, g.len()).iter_mut().zip(g).zip(xv) {
                    *d += gi * gelu_grad(v);
                }
            }
            Op::Rope { x, cos, sin } => {
                let shape = node.value.shape();
                let hd = shape[shape.len() - 1];
                let heads = shape[shape.len() - 2];
                let seq = shape[shape.len() - 3];
                let mut back = g.to_vec();
                rotate_pairs(&mut back, seq, heads, hd, cos, sin, true);
                accumulate(slot(adj, *x, g.len()), &back);
            }
            Op::Attention { q, k, v, probs } => {
                self.attention_backward(node.value.shape(), *q, *k, *v, probs, g, adj);
            }
            Op::CrossEntropy { logits, targets, lse } => {
                let lv = self.value(*logits);
                let vocab = lv.shape()[1];
                let scale = g[0] / T::from_f64(targets.len() as f64);
                let dl = slot(adj, *logits, lv.numel());
                for (r, (row, &t)) in lv.data().chunks_exact(vocab).zip(targets).enumerate() {
                    let out = &mut dl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        out[j] += scale * (row[j] - lse[r]).exp();
                    }
                    out[t] -= scale;
                }
            }
            Op::ZLoss { logits, coef, lse } => {
                let lv = self.value(*logits);
                let vocab = lv.shape()[1];
                let n = lse.len();
                let scale = g[0] * *coef * T::from_f64(2.0) / T::from_f64(n as f64);
                if scale == T::ZERO {
                    return;
                }
                let dl = slot(adj, *logits, lv.numel());
                for (r, row) in lv.data().chunks_exact(vocab).enumerate() {
                    let out = &mut dl[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        out[j] += scale * lse[r] * (row[j] - lse[r]).exp();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        shape: &[usize],
        q: Var,
        k: Var,
        v: Var,
        probs: &[T],
        g: &[T],
        adj: &mut [Option<Vec<T>>],
    ) {
        let (nb, seq, heads, hd) = attention_dims(shape).expect("validated in forward");
        let scale = T::ONE / T::from_f64(hd as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let at = |b: usize, l: usize, h: usize| ((b * seq + l) * heads + h) * hd;
        let n = qd.len();
        let mut dq = vec![T::ZERO; n];
        let mut dk = vec![T::ZERO; n];
        let mut dv = vec![T::ZERO; n];
        let mut dp = vec![T::ZERO; seq];
        for b in 0..nb {
            for h in 0..heads {
                for i in 0..seq {
                    let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &g[at(b, i, h)..at(b, i, h) + hd];
                    let mut s = T::ZERO;
                    for j in 0..=i {
                        let vj = at(b, j, h);
                        dp[j] = dot(go, &vd[vj..vj + hd]);
                        s += prow[j] * dp[j];
                        for (acc, &x) in dv[vj..vj + hd].iter_mut().zip(go) {
                            *acc += prow[j] * x;
                        }
                    }
                    let qi = at(b, i, h);
                    for j in 0..=i {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let kj = at(b, j, h);
                        for t in 0..hd {
                            dq[qi + t] += ds * kd[kj + t];
                            dk[kj + t] += ds * qd[qi + t];
                        }
                    }
                }
            }
        }
        accumulate(slot(adj, q, n), &dq);
        accumulate(slot(adj, k, n), &dk);
        accumulate(slot(adj, v, n), &dv);
    }
}

fn slot<T: Float>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::ZERO; len])
}

fn accumulate<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::ZERO, |acc, (&x, &y)| acc + x * y)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gelu_fwd<T: Float>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    x * cdf
}

fn gelu_grad<T: Float>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(INV_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

/// Rotates pairs `(2i, 2i+1)` of every head vector by the tabulated angle for
/// its position; `inverse` rotates by the negated angle (the adjoint).
fn rotate_pairs<T: Float>(data: &mut [T], seq: usize, heads: usize, hd: usize, cos: &[T], sin: &[T], inverse: bool) {
    let half = hd / 2;
    for (vec_idx, head) in data.chunks_exact_mut(hd).enumerate() {
        let pos = (vec_idx / heads) % seq;
        for i in 0..half {
            let (c, mut s) = (cos[pos * half + i], sin[pos * half + i]);
            if inverse {
                s = -s;
            }
            let (x0, x1) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = x0 * c - x1 * s;
            head[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Rng;
    use crate::testutil::{central_difference, max_rel_err, random_tensor};

    /// Finite-difference check of a tape-built scalar function of `inputs`.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Tape<f64>, &[Var]) -> Var, tol: f64) {
        let eval = |xs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item().unwrap()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        for (idx, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v);
            let numeric = central_difference(&inputs, idx, 1e-5, eval);
            let err = max_rel_err(analytic.data(), &numeric);
            assert!(err <= tol, "input {idx}: rel err {err}");
        }
    }

    /// Contracts an arbitrary output against fixed random weights so the check
    /// exercises every output element.
    fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
        let shape = tape.value(out).shape().to_vec();
        let mut rng = Rng::new(seed);
        let w = random_tensor(&mut rng, &shape, 1.0);
        let wv = tape.leaf(w);
        let p = tape.mul(out, wv).unwrap();
        tape.sum(p)
    }

    #[test]
    fn matmul_gradient() {
        let mut rng = Rng::new(3);
        let a = random_tensor(&mut rng, &[3, 4], 1.0);
        let b = random_tensor(&mut rng, &[4, 2], 1.0);
        check(
            vec![a, b],
            |t, v| {
                let c = t.matmul(v[0], v[1]).unwrap();
                project(t, c, 11)
            },
            1e-6,
        );
    }

    #[test]
    fn linear_gradient() {
        let mut rng = Rng::new(4);
        let x = random_tensor(&mut rng, &[5, 3], 1.0);
        let w = random_tensor(&mut rng, &[2, 3], 1.0);
        check(
            vec![x, w],
            |t, v| {
                let c = t.linear(v[0], v[1]).unwrap();
                project(t, c, 12)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::zeros(vec![2, 3]));
        let b = t.leaf(Tensor::zeros(vec![2, 3]));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::full(vec![1, 4], 3.7));
        let g = t.leaf(Tensor::full(vec![4], 1.0));
        let y = t.layernorm(x, g, 1e-5).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layernorm_two_values() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let g = t.leaf(Tensor::full(vec![2], 2.0));
        let y = t.layernorm(x, g, 1e-12).unwrap();
        let out = t.value(y).data();
        assert!((out[0] - 2.0).abs() < 1e-9 && (out[1] + 2.0).abs() < 1e-9, "{out:?}");
    }

    #[test]
    fn layernorm_normalizes() {
        let mut rng = Rng::new(5);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(random_tensor(&mut rng, &[3, 8], 2.0));
        let g = t.leaf(Tensor::full(vec![8], 1.0));
        let y = t.layernorm(x, g, 1e-5).unwrap();
        for row in t.value(y).data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layernorm_gradient() {
        let mut rng = Rng::new(6);
        let x = random_tensor(&mut rng, &[2, 8], 1.0);
        let g = random_tensor(&mut rng, &[8], 1.0);
        check(
            vec![x, g],
            |t, v| {
                let y = t.layernorm(v[0], v[1], 1e-5).unwrap();
                project(t, y, 13)
            },
            1e-6,
        );
    }

    #[test]
    fn layernorm_rejects_bad_args() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(vec![2, 1]));
        let g = t.leaf(Tensor::zeros(vec![1]));
        assert!(t.layernorm(x, g, 1e-5).is_err());
        let x = t.leaf(Tensor::zeros(vec![2, 4]));
        let g = t.leaf(Tensor::zeros(vec![4]));
        assert!(t.layernorm(x, g, 0.0).is_err());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_fwd(0.0_f64), 0.0);
        assert!((gelu_fwd(10.0_f64) - 10.0).abs() < 1e-6);
        // Φ(1) = 0.8413447460685429
        assert!((gelu_fwd(1.0_f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
    }

    #[test]
    fn gelu_gradient() {
        let x = Tensor::new(vec![1], vec![0.5]).unwrap();
        check(
            vec![x],
            |t, v| {
                let y = t.gelu(v[0]);
                t.sum(y)
            },
            1e-8,
        );
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = Rng::new(7);
        let mut t = Tape::<f64>::new();
        let x = random_tensor(&mut rng, &[1, 2, 8], 1.0);
        let xv = t.leaf(x.clone());
        let y = t.rope(xv, 10_000.0).unwrap();
        assert_eq!(t.value(y), &x);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = Rng::new(8);
        let mut t = Tape::<f64>::new();
        let x = random_tensor(&mut rng, &[5, 2, 8], 1.0);
        let xv = t.leaf(x.clone());
        let y = t.rope(xv, 10_000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(t.value(y).data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(vec![2, 1, 3]));
        assert!(t.rope(x, 10_000.0).is_err());
    }

    #[test]
    fn rope_gradient() {
        let mut rng = Rng::new(9);
        let x = random_tensor(&mut rng, &[4, 1, 8], 1.0);
        check(
            vec![x],
            |t, v| {
                let y = t.rope(v[0], 10_000.0).unwrap();
                project(t, y, 14)
            },
            1e-6,
        );
    }

    #[test]
    fn attention_single_token_returns_v() {
        let mut rng = Rng::new(10);
        let mut t = Tape::<f64>::new();
        let q = t.leaf(random_tensor(&mut rng, &[1, 2, 4], 1.0));
        let k = t.leaf(random_tensor(&mut rng, &[1, 2, 4], 1.0));
        let v = random_tensor(&mut rng, &[1, 2, 4], 1.0);
        let vv = t.leaf(v.clone());
        let o = t.causal_attention(q, k, vv).unwrap();
        assert_eq!(t.value(o), &v);
    }

    #[test]
    fn attention_equal_keys_average_prefix() {
        let mut rng = Rng::new(11);
        let mut t = Tape::<f64>::new();
        let q = t.leaf(random_tensor(&mut rng, &[4, 1, 2], 1.0));
        let k = t.leaf(Tensor::from_fn(vec![4, 1, 2], |i| [0.3, -0.7][i % 2]));
        let v = random_tensor(&mut rng, &[4, 1, 2], 1.0);
        let vv = t.leaf(v.clone());
        let o = t.causal_attention(q, k, vv).unwrap();
        let out = t.value(o).data();
        for i in 0..4 {
            for d in 0..2 {
                let mean = (0..=i).map(|j| v.data()[j * 2 + d]).sum::<f64>() / (i + 1) as f64;
                assert!((out[i * 2 + d] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = Rng::new(12);
        let q = random_tensor(&mut rng, &[3, 1, 4], 1.0);
        let k = random_tensor(&mut rng, &[3, 1, 4], 1.0);
        let v = random_tensor(&mut rng, &[3, 1, 4], 1.0);
        let run = |v: &Tensor<f64>| {
            let mut t = Tape::<f64>::new();
            let (a, b, c) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let o = t.causal_attention(a, b, c).unwrap();
            t.value(o).data().to_vec()
        };
        let before = run(&v);
        let mut v2 = v.clone();
        v2.data_mut()[8..].iter_mut().for_each(|x| *x += 1.0);
        let after = run(&v2);
        assert_eq!(before[..8], after[..8]);
    }

    #[test]
    fn attention_gradient() {
        let mut rng = Rng::new(13);
        let q = random_tensor(&mut rng, &[2, 3, 2, 4], 1.0);
        let k = random_tensor(&mut rng, &[2, 3, 2, 4], 1.0);
        let v = random_tensor(&mut rng, &[2, 3, 2, 4], 1.0);
        check(
            vec![q, k, v],
            |t, vars| {
                let o = t.causal_attention(vars[0], vars[1], vars[2]).unwrap();
                project(t, o, 15)
            },
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::zeros(vec![3, 2]));
        let (ce, z) = t.cross_entropy_with_zloss(l, &[0, 1, 1], 1e-4).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((t.value(ce).item().unwrap() - ln2).abs() < 1e-15);
        assert!((t.value(z).item().unwrap() - 1e-4 * ln2 * ln2).abs() < 1e-18);
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::new(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap());
        let (ce, _) = t.cross_entropy_with_zloss(l, &[1], 0.0).unwrap();
        assert!(t.value(ce).item().unwrap() < 1e-20);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut t = Tape::<f64>::new();
        let l = t.leaf(Tensor::zeros(vec![1, 3]));
        assert!(t.cross_entropy_with_zloss(l, &[3], 0.0).is_err());
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = Rng::new(14);
        let logits = random_tensor(&mut rng, &[2, 5], 1.0);
        check(
            vec![logits],
            |t, v| {
                let (ce, z) = t.cross_entropy_with_zloss(v[0], &[3, 0], 0.1).unwrap();
                t.add(ce, z).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn narrow_and_gather_gradients() {
        let mut rng = Rng::new(15);
        let table = random_tensor(&mut rng, &[4, 6], 1.0);
        check(
            vec![table],
            |t, v| {
                let rows = t.gather(v[0], &[2, 0, 2]).unwrap();
                let mid = t.narrow(rows, 1, 3).unwrap();
                project(t, mid, 16)
            },
            1e-8,
        );
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let w = Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap();
        let mut t = Tape::<f64>::new();
        let wv = t.leaf(w.clone());
        let s = t.sum(wv);
        assert_eq!(t.backward(s).unwrap().get(wv).data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let wv = t.leaf(w.clone());
        let sq = t.mul(wv, wv).unwrap();
        let s = t.sum(sq);
        let half = t.scale(s, 0.5);
        assert_eq!(t.backward(half).unwrap().get(wv), w);
    }

    #[test]
    fn backward_rejects_non_scalar_and_zero_fills_unused() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::full(vec![2], 1.0));
        let unused = t.leaf(Tensor::full(vec![3], 1.0));
        assert!(t.backward(a).is_err());
        let s = t.sum(a);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_bitwise_identical() {
        let mut rng = Rng::new(16);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(random_tensor(&mut rng, &[3, 4], 1.0));
        let w = t.leaf(random_tensor(&mut rng, &[5, 4], 1.0));
        let y = t.linear(x, w).unwrap();
        let y = t.gelu(y);
        let loss = project(&mut t, y, 17);
        let g1 = t.backward(loss).unwrap().get(w);
        let g2 = t.backward(loss).unwrap().get(w);
        let bits = |g: &Tensor<f64>| g.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&g1), bits(&g2));
    }
}
