//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Ops evaluate eagerly and record enough to replay themselves backward.
//! `backward` walks the recording once in reverse, accumulating cotangents
//! per node; nodes never reached keep a `None` accumulator, which reads
//! back as an exact zero gradient.

use crate::error::NumericsError;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, S),
    OffsetBy(NodeId, S),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Clamp(NodeId, S, S),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    /// `[m,k] · [k,n] -> [m,n]`
    MatMul(NodeId, NodeId),
    /// `[m,k] · [n,k]^T -> [m,n]`
    MatMulTB(NodeId, NodeId),
    /// `[m,k] · [k] -> [m]`
    MatVec(NodeId, NodeId),
    /// `[m,k]^T · [m] -> [k]`
    TMatVec(NodeId, NodeId),
    /// `[n,d] + [d]` broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// Plain or masked softmax; masked entries carry probability zero in the
    /// stored output, which is all backward needs.
    Softmax(NodeId),
    /// Row-wise masked softmax; one key mask shared by every row.
    RowSoftmax(NodeId),
    /// x, gain, bias; eps sits inside the sqrt. Rank 1 or per-row on rank 2.
    LayerNorm(NodeId, NodeId, NodeId, S),
    /// table `[v,d]`, gathered row ids.
    EmbedRows(NodeId, Vec<usize>),
    ConcatVec(Vec<NodeId>),
    SliceVec(NodeId, usize, usize),
    RowSlice(NodeId, usize),
    ColSlice(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
}

pub struct Tape<S> {
    vals: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    requires: Vec<bool>,
}

/// Per-node cotangent accumulators produced by `Tape::backward`.
///
/// During the sweep each processed op's own accumulator is drained, so after
/// `backward` returns, gradients are available for leaf nodes (parameters and
/// inputs); interior nodes read back as `None`.
pub struct Gradients<S> {
    g: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, id: NodeId) -> Option<&[S]> {
        self.g.get(id).and_then(|s| s.as_deref())
    }

    /// Gradient as a dense vector; `None` becomes exact zeros.
    pub fn dense(&self, id: NodeId, len: usize) -> Vec<S> {
        match self.of(id) {
            Some(g) => {
                assert_eq!(g.len(), len);
                g.to_vec()
            }
            None => vec![S::zero(); len],
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), requires: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.vals[id]
    }

    pub fn values_of(&self, id: NodeId) -> &[S] {
        self.vals[id].values()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.requires[id]
    }

    fn push(&mut self, t: Tensor<S>, op: Op<S>, requires: bool) -> NodeId {
        debug_assert!(t.all_finite(), "non-finite output from {op:?}");
        self.vals.push(t);
        self.ops.push(op);
        self.requires.push(requires);
        self.vals.len() - 1
    }

    fn req(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.requires[i])
    }

    // ── leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, true)
    }

    /// Differentiable input leaf; its gradient is readable after `backward`.
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, true)
    }

    /// Frozen leaf; backward never propagates into it.
    pub fn constant(&mut self, t: Tensor<S>) -> NodeId {
        self.leaf(t, false)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let t = self.vals[id].clone();
        self.constant(t)
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn zip2(&mut self, a: NodeId, b: NodeId, f: impl Fn(S, S) -> S, op: Op<S>) -> NodeId {
        assert_eq!(self.vals[a].shape(), self.vals[b].shape(), "elementwise shape mismatch");
        let vals: Vec<S> = self.vals[a]
            .values()
            .iter()
            .zip(self.vals[b].values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.vals[a].shape().to_vec(), vals);
        let r = self.req(&[a, b]);
        self.push(t, op, r)
    }

    fn map1(&mut self, a: NodeId, f: impl Fn(S) -> S, op: Op<S>) -> NodeId {
        let vals: Vec<S> = self.vals[a].values().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.vals[a].shape().to_vec(), vals);
        let r = self.requires[a];
        self.push(t, op, r)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.map1(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> NodeId {
        self.map1(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: S) -> NodeId {
        self.map1(a, |x| x + c, Op::OffsetBy(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map1(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.map1(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.map1(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map1(a, stable_sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.map1(a, gelu_fwd, Op::Gelu(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: S, hi: S) -> NodeId {
        assert!(lo < hi);
        self.map1(a, |x| if x < lo { lo } else if x > hi { hi } else { x }, Op::Clamp(a, lo, hi))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.vals[a].values().iter().fold(S::zero(), |acc, &x| acc + x);
        let r = self.requires[a];
        self.push(Tensor::scalar(s), Op::Sum(a), r)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.vals[a].len();
        assert!(n > 0, "mean of empty tensor");
        let s = self.vals[a].values().iter().fold(S::zero(), |acc, &x| acc + x);
        let r = self.requires[a];
        self.push(Tensor::scalar(s / lit(n as f64)), Op::Mean(a), r)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.vals[a].shape(), self.vals[b].shape(), "dot shape mismatch");
        let s = self.vals[a]
            .values()
            .iter()
            .zip(self.vals[b].values())
            .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        let r = self.req(&[a, b]);
        self.push(Tensor::scalar(s), Op::Dot(a, b), r)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.vals[a].rows(), self.vals[a].cols());
        let (k2, n) = (self.vals[b].rows(), self.vals[b].cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        mm_nn(self.vals[a].values(), self.vals[b].values(), m, k, n, &mut out);
        let r = self.req(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), r)
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = (self.vals[a].rows(), self.vals[a].cols());
        let (n, k2) = (self.vals[b].rows(), self.vals[b].cols());
        assert_eq!(k, k2, "matmul_tb inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        mm_nt(self.vals[a].values(), self.vals[b].values(), m, k, n, &mut out);
        let r = self.req(&[a, b]);
        self.push(Tensor::matrix(m, n, out), Op::MatMulTB(a, b), r)
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (m, k) = (self.vals[a].rows(), self.vals[a].cols());
        assert_eq!(self.vals[x].shape(), [k], "matvec shape mismatch");
        let av = self.vals[a].values();
        let xv = self.vals[x].values();
        let out: Vec<S> = (0..m)
            .map(|i| av[i * k..(i + 1) * k].iter().zip(xv).fold(S::zero(), |acc, (&p, &q)| acc + p * q))
            .collect();
        let r = self.req(&[a, x]);
        self.push(Tensor::vector(out), Op::MatVec(a, x), r)
    }

    pub fn tmatvec(&mut self, a: NodeId, x: NodeId) -> NodeId {
        let (m, k) = (self.vals[a].rows(), self.vals[a].cols());
        assert_eq!(self.vals[x].shape(), [m], "tmatvec shape mismatch");
        let av = self.vals[a].values();
        let xv = self.vals[x].values();
        let mut out = vec![S::zero(); k];
        for i in 0..m {
            let xi = xv[i];
            for (o, &aip) in out.iter_mut().zip(&av[i * k..(i + 1) * k]) {
                *o = *o + xi * aip;
            }
        }
        let r = self.req(&[a, x]);
        self.push(Tensor::vector(out), Op::TMatVec(a, x), r)
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, v: NodeId) -> NodeId {
        let (rows, cols) = (self.vals[m].rows(), self.vals[m].cols());
        assert_eq!(self.vals[v].shape(), [cols], "row broadcast shape mismatch");
        let mv = self.vals[m].values();
        let vv = self.vals[v].values();
        let out: Vec<S> = mv.iter().enumerate().map(|(idx, &x)| x + vv[idx % cols]).collect();
        let r = self.req(&[m, v]);
        self.push(Tensor::matrix(rows, cols, out), Op::AddRowBroadcast(m, v), r)
    }

    // ── softmax family ──────────────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        assert_eq!(self.vals[a].rank(), 1);
        let mut out = vec![S::zero(); self.vals[a].len()];
        softmax_into(self.vals[a].values(), None, &mut out)?;
        let r = self.requires[a];
        Ok(self.push(Tensor::vector(out), Op::Softmax(a), r))
    }

    pub fn softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, NumericsError> {
        assert_eq!(self.vals[a].rank(), 1);
        assert_eq!(self.vals[a].len(), mask.len(), "mask length mismatch");
        let mut out = vec![S::zero(); self.vals[a].len()];
        softmax_into(self.vals[a].values(), Some(mask), &mut out)?;
        let r = self.requires[a];
        Ok(self.push(Tensor::vector(out), Op::Softmax(a), r))
    }

    /// Masked softmax over each row of a score matrix; the mask marks valid
    /// key columns and applies to every row.
    pub fn row_softmax_masked(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId, NumericsError> {
        let (rows, cols) = (self.vals[a].rows(), self.vals[a].cols());
        assert_eq!(cols, mask.len(), "mask length mismatch");
        let mut out = vec![S::zero(); rows * cols];
        for i in 0..rows {
            softmax_into(self.vals[a].row(i), Some(mask), &mut out[i * cols..(i + 1) * cols])?;
        }
        let r = self.requires[a];
        Ok(self.push(Tensor::matrix(rows, cols, out), Op::RowSoftmax(a), r))
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Layer norm with learned gain and bias; eps sits inside the sqrt.
    /// Rank-1 input normalizes the whole vector, rank-2 normalizes each row.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: S,
    ) -> Result<NodeId, NumericsError> {
        let t = &self.vals[x];
        let (rows, cols) = match t.rank() {
            1 => (1, t.len()),
            2 => (t.rows(), t.cols()),
            r => panic!("layer_norm expects rank 1 or 2, got {r}"),
        };
        if cols == 0 {
            return Err(NumericsError::EmptyLayerNorm);
        }
        assert_eq!(self.vals[gain].shape(), [cols]);
        assert_eq!(self.vals[bias].shape(), [cols]);
        let mut out = vec![S::zero(); rows * cols];
        let gv = self.vals[gain].values().to_vec();
        let bv = self.vals[bias].values().to_vec();
        for i in 0..rows {
            let row = &self.vals[x].values()[i * cols..(i + 1) * cols];
            let (mu, rstd) = row_moments(row, eps);
            for j in 0..cols {
                out[i * cols + j] = gv[j] * ((row[j] - mu) * rstd) + bv[j];
            }
        }
        let shape = self.vals[x].shape().to_vec();
        let r = self.req(&[x, gain, bias]);
        Ok(self.push(Tensor::new(shape, out), Op::LayerNorm(x, gain, bias, eps), r))
    }

    // ── gather / reshape ────────────────────────────────────────────────

    pub fn embed_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (v, d) = (self.vals[table].rows(), self.vals[table].cols());
        let tv = self.vals[table].values();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let r = self.requires[table];
        self.push(Tensor::matrix(ids.len(), d, out), Op::EmbedRows(table, ids.to_vec()), r)
    }

    pub fn concat_vec(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.vals[p].rank(), 1, "concat_vec needs rank-1 parts");
            out.extend_from_slice(self.vals[p].values());
        }
        let r = self.req(parts);
        self.push(Tensor::vector(out), Op::ConcatVec(parts.to_vec()), r)
    }

    pub fn slice_vec(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        assert_eq!(self.vals[a].rank(), 1);
        assert!(start + len <= self.vals[a].len());
        let out = self.vals[a].values()[start..start + len].to_vec();
        let r = self.requires[a];
        self.push(Tensor::vector(out), Op::SliceVec(a, start, len), r)
    }

    pub fn row_slice(&mut self, a: NodeId, row: usize) -> NodeId {
        let out = self.vals[a].row(row).to_vec();
        let r = self.requires[a];
        self.push(Tensor::vector(out), Op::RowSlice(a, row), r)
    }

    pub fn col_slice(&mut self, a: NodeId, start: usize, width: usize) -> NodeId {
        let (rows, cols) = (self.vals[a].rows(), self.vals[a].cols());
        assert!(start + width <= cols);
        let av = self.vals[a].values();
        let mut out = Vec::with_capacity(rows * width);
        for i in 0..rows {
            out.extend_from_slice(&av[i * cols + start..i * cols + start + width]);
        }
        let r = self.requires[a];
        self.push(Tensor::matrix(rows, width, out), Op::ColSlice(a, start, width), r)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0]].rows();
        let total: usize = parts.iter().map(|&p| self.vals[p].cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                assert_eq!(self.vals[p].rows(), rows, "concat_cols row mismatch");
                out.extend_from_slice(self.vals[p].row(i));
            }
        }
        let r = self.req(parts);
        self.push(Tensor::matrix(rows, total, out), Op::ConcatCols(parts.to_vec()), r)
    }

    // ── backward ────────────────────────────────────────────────────────

    pub fn backward_scalar(&self, loss: NodeId) -> Gradients<S> {
        assert_eq!(self.vals[loss].len(), 1, "backward_scalar needs a scalar node");
        self.backward(&[(loss, vec![S::one()])])
    }

    /// Reverse sweep from explicit cotangent seeds. Each recorded op is
    /// visited at most once, in reverse order of recording.
    pub fn backward(&self, seeds: &[(NodeId, Vec<S>)]) -> Gradients<S> {
        let mut g: Vec<Option<Vec<S>>> = vec![None; self.vals.len()];
        for (id, seed) in seeds {
            assert_eq!(seed.len(), self.vals[*id].len(), "seed length mismatch at node {id}");
            add_to(&mut g[*id], seed);
        }
        for id in (0..self.vals.len()).rev() {
            if g[id].is_none() || matches!(self.ops[id], Op::Leaf) || !self.requires[id] {
                continue;
            }
            let gout = g[id].take().expect("checked above");
            self.replay(id, &gout, &mut g);
        }
        Gradients { g }
    }

    fn replay(&self, id: NodeId, gout: &[S], g: &mut [Option<Vec<S>>]) {
        let val = |n: NodeId| self.vals[n].values();
        match &self.ops[id] {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                self.accum(g, *a, |ga| add_slice(ga, gout));
                self.accum(g, *b, |gb| add_slice(gb, gout));
            }
            Op::Sub(a, b) => {
                self.accum(g, *a, |ga| add_slice(ga, gout));
                self.accum(g, *b, |gb| sub_slice(gb, gout));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accum(g, *a, |ga| mul_add(ga, gout, bv));
                self.accum(g, *b, |gb| mul_add(gb, gout, av));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] / bv[i];
                    }
                });
                self.accum(g, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] - gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Neg(a) => self.accum(g, *a, |ga| sub_slice(ga, gout)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] * c;
                    }
                });
            }
            Op::OffsetBy(a, _) => self.accum(g, *a, |ga| add_slice(ga, gout)),
            Op::Exp(a) => {
                let ov = self.vals[id].values();
                self.accum(g, *a, |ga| mul_add(ga, gout, ov));
            }
            Op::Ln(a) => {
                let av = val(*a);
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] / av[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let ov = self.vals[id].values();
                let half = lit::<S>(0.5);
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] * half / ov[i];
                    }
                });
            }
            Op::Sigmoid(a) => {
                let ov = self.vals[id].values();
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] * ov[i] * (S::one() - ov[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let av = val(*a);
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] * gelu_bwd(av[i]);
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                let (lo, hi) = (*lo, *hi);
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        if av[i] > lo && av[i] < hi {
                            ga[i] = ga[i] + gout[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = gout[0];
                self.accum(g, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v = *v + s;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.vals[*a].len();
                let s = gout[0] / lit(n as f64);
                self.accum(g, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v = *v + s;
                    }
                });
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let s = gout[0];
                self.accum(g, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + s * bv[i];
                    }
                });
                self.accum(g, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + s * av[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.vals[*a].rows(), self.vals[*a].cols());
                let n = self.vals[*b].cols();
                let (av, bv) = (val(*a), val(*b));
                // dA += G·B^T, dB += A^T·G
                self.accum(g, *a, |ga| mm_nt(gout, bv, m, n, k, ga));
                self.accum(g, *b, |gb| mm_tn(av, gout, m, k, n, gb));
            }
            Op::MatMulTB(a, b) => {
                let (m, k) = (self.vals[*a].rows(), self.vals[*a].cols());
                let n = self.vals[*b].rows();
                let (av, bv) = (val(*a), val(*b));
                // C = A·B^T: dA += G·B, dB += G^T·A
                self.accum(g, *a, |ga| mm_nn(gout, bv, m, n, k, ga));
                self.accum(g, *b, |gb| mm_tn(gout, av, m, n, k, gb));
            }
            Op::MatVec(a, x) => {
                let (m, k) = (self.vals[*a].rows(), self.vals[*a].cols());
                let (av, xv) = (val(*a), val(*x));
                self.accum(g, *a, |ga| {
                    for i in 0..m {
                        let gi = gout[i];
                        for j in 0..k {
                            ga[i * k + j] = ga[i * k + j] + gi * xv[j];
                        }
                    }
                });
                self.accum(g, *x, |gx| {
                    for i in 0..m {
                        let gi = gout[i];
                        for j in 0..k {
                            gx[j] = gx[j] + gi * av[i * k + j];
                        }
                    }
                });
            }
            Op::TMatVec(a, x) => {
                let (m, k) = (self.vals[*a].rows(), self.vals[*a].cols());
                let (av, xv) = (val(*a), val(*x));
                // y = A^T·x: dA += x⊗g, dx += A·g
                self.accum(g, *a, |ga| {
                    for i in 0..m {
                        let xi = xv[i];
                        for j in 0..k {
                            ga[i * k + j] = ga[i * k + j] + xi * gout[j];
                        }
                    }
                });
                self.accum(g, *x, |gx| {
                    for i in 0..m {
                        let mut acc = S::zero();
                        for j in 0..k {
                            acc = acc + av[i * k + j] * gout[j];
                        }
                        gx[i] = gx[i] + acc;
                    }
                });
            }
            Op::AddRowBroadcast(m_id, v_id) => {
                let cols = self.vals[*v_id].len();
                self.accum(g, *m_id, |gm| add_slice(gm, gout));
                self.accum(g, *v_id, |gv| {
                    for (idx, &go) in gout.iter().enumerate() {
                        gv[idx % cols] = gv[idx % cols] + go;
                    }
                });
            }
            Op::Softmax(a) => {
                let p = self.vals[id].values();
                self.accum(g, *a, |ga| softmax_bwd(p, gout, ga));
            }
            Op::RowSoftmax(a) => {
                let (rows, cols) = (self.vals[*a].rows(), self.vals[*a].cols());
                let p = self.vals[id].values();
                self.accum(g, *a, |ga| {
                    for i in 0..rows {
                        softmax_bwd(
                            &p[i * cols..(i + 1) * cols],
                            &gout[i * cols..(i + 1) * cols],
                            &mut ga[i * cols..(i + 1) * cols],
                        );
                    }
                });
            }
            Op::LayerNorm(x, gain, bias, eps) => {
                let t = &self.vals[*x];
                let (rows, cols) = if t.rank() == 1 { (1, t.len()) } else { (t.rows(), t.cols()) };
                let xv = val(*x);
                let gv = val(*gain);
                let inv_n = S::one() / lit::<S>(cols as f64);
                for i in 0..rows {
                    let row = &xv[i * cols..(i + 1) * cols];
                    let go = &gout[i * cols..(i + 1) * cols];
                    let (mu, rstd) = row_moments(row, *eps);
                    // xhat_j = (x_j - mu)·rstd, h_j = go_j·gain_j
                    let mut mean_h = S::zero();
                    let mut mean_hx = S::zero();
                    for j in 0..cols {
                        let xhat = (row[j] - mu) * rstd;
                        let h = go[j] * gv[j];
                        mean_h = mean_h + h;
                        mean_hx = mean_hx + h * xhat;
                    }
                    mean_h = mean_h * inv_n;
                    mean_hx = mean_hx * inv_n;
                    self.accum(g, *x, |gx| {
                        for j in 0..cols {
                            let xhat = (row[j] - mu) * rstd;
                            let h = go[j] * gv[j];
                            gx[i * cols + j] = gx[i * cols + j] + rstd * (h - mean_h - xhat * mean_hx);
                        }
                    });
                    self.accum(g, *gain, |gg| {
                        for j in 0..cols {
                            let xhat = (row[j] - mu) * rstd;
                            gg[j] = gg[j] + go[j] * xhat;
                        }
                    });
                    self.accum(g, *bias, |gb| {
                        for j in 0..cols {
                            gb[j] = gb[j] + go[j];
                        }
                    });
                }
            }
            Op::EmbedRows(table, ids) => {
                let d = self.vals[*table].cols();
                self.accum(g, *table, |gt| {
                    for (r, &id2) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id2 * d + j] = gt[id2 * d + j] + gout[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.vals[p].len();
                    self.accum(g, p, |gp| add_slice(gp, &gout[off..off + n]));
                    off += n;
                }
            }
            Op::SliceVec(a, start, len) => {
                let (start, len) = (*start, *len);
                self.accum(g, *a, |ga| add_slice(&mut ga[start..start + len], gout));
            }
            Op::RowSlice(a, row) => {
                let cols = self.vals[*a].cols();
                let row = *row;
                self.accum(g, *a, |ga| add_slice(&mut ga[row * cols..(row + 1) * cols], gout));
            }
            Op::ColSlice(a, start, width) => {
                let (rows, cols) = (self.vals[*a].rows(), self.vals[*a].cols());
                let (start, width) = (*start, *width);
                self.accum(g, *a, |ga| {
                    for i in 0..rows {
                        for j in 0..width {
                            ga[i * cols + start + j] = ga[i * cols + start + j] + gout[i * width + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = self.vals[id].rows();
                let total = self.vals[id].cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.vals[p].cols();
                    self.accum(g, p, |gp| {
                        for i in 0..rows {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + gout[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
        }
    }

    fn accum(&self, g: &mut [Option<Vec<S>>], id: NodeId, f: impl FnOnce(&mut [S])) {
        if !self.requires[id] {
            return;
        }
        let n = self.vals[id].len();
        let slot = g[id].get_or_insert_with(|| vec![S::zero(); n]);
        f(slot);
    }
}

// ── kernels ─────────────────────────────────────────────────────────────

/// out += A[m,k]·B[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

/// out += A[m,k]·B[n,k]^T
fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out += A[m,k]^T·B[m,n]  (out is [k,n])
fn mm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

fn add_slice<S: Scalar>(dst: &mut [S], src: &[S]) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] = dst[i] + src[i];
    }
}

fn sub_slice<S: Scalar>(dst: &mut [S], src: &[S]) {
    for i in 0..dst.len() {
        dst[i] = dst[i] - src[i];
    }
}

fn mul_add<S: Scalar>(dst: &mut [S], a: &[S], b: &[S]) {
    for i in 0..dst.len() {
        dst[i] = dst[i] + a[i] * b[i];
    }
}

fn add_to<S: Scalar>(slot: &mut Option<Vec<S>>, src: &[S]) {
    match slot {
        Some(v) => add_slice(v, src),
        None => *slot = Some(src.to_vec()),
    }
}

/// Max-subtracted softmax; masked-out entries get probability zero.
fn softmax_into<S: Scalar>(
    xs: &[S],
    mask: Option<&[bool]>,
    out: &mut [S],
) -> Result<(), NumericsError> {
    if xs.is_empty() {
        return Err(NumericsError::EmptySoftmax);
    }
    let active = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max: Option<S> = None;
    for (i, &x) in xs.iter().enumerate() {
        if active(i) && max.map_or(true, |m| x > m) {
            max = Some(x);
        }
    }
    let max = max.ok_or(NumericsError::AllKeysMasked)?;
    let mut denom = S::zero();
    for (i, &x) in xs.iter().enumerate() {
        if active(i) {
            let e = (x - max).exp();
            out[i] = e;
            denom = denom + e;
        } else {
            out[i] = S::zero();
        }
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
    Ok(())
}

/// dx += p ⊙ (g − ⟨g, p⟩)
fn softmax_bwd<S: Scalar>(p: &[S], gout: &[S], gx: &mut [S]) {
    let mut dotgp = S::zero();
    for i in 0..p.len() {
        dotgp = dotgp + gout[i] * p[i];
    }
    for i in 0..p.len() {
        gx[i] = gx[i] + p[i] * (gout[i] - dotgp);
    }
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = lit::<S>(row.len() as f64);
    let mut mu = S::zero();
    for &x in row {
        mu = mu + x;
    }
    mu = mu / n;
    let mut var = S::zero();
    for &x in row {
        let d = x - mu;
        var = var + d * d;
    }
    var = var / n;
    (mu, S::one() / (var + eps).sqrt())
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = lit::<S>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = lit::<S>(0.044_715);
    let half = lit::<S>(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = lit::<S>(0.797_884_560_802_865_4);
    let a = lit::<S>(0.044_715);
    let half = lit::<S>(0.5);
    let three = lit::<S>(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * a * x * x)
}
