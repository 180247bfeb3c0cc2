//! Define-by-run reverse-mode tape.
//!
//! Every differentiable operation appends a node holding its forward value
//! and enough saved state to compute its vector-Jacobian product. `backward`
//! replays the nodes in reverse creation order, which is a valid reverse
//! topological order because a node can only reference earlier nodes.

use super::kernels::{axpy, dot, matmul_nn, matmul_nt, matmul_tn};
use super::{NumericsError, Real, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product, recorded as a
/// single tape node.
pub trait CustomOp<F: Real> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, each shaped like that input.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_output: &Tensor<F>,
    ) -> Vec<Tensor<F>>;
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddRow(Var, Var),
    AddConst(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<F>,
    },
    Sum(Var),
    GatherRelative(Var),
    RotatePairs {
        x: Var,
        cos: Vec<F>,
        sin: Vec<F>,
        width: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<F>>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Record of executed operations. Confined to one thread of evaluation.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<F>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.value(a).shape(), self.value(b).shape()));
        }
        let data = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.value(a).dims2("transpose")?;
        let t = self.value(a).transposed();
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let t = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Adds `bias[c]` to every row of `x[r×c]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2("add_row")?;
        if self.value(bias).numel() != c {
            return Err(mismatch("add_row", self.value(x).shape(), self.value(bias).shape()));
        }
        let mut t = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in t.data_mut().chunks_mut(c) {
            for (o, &bi) in row.iter_mut().zip(&b) {
                *o = *o + bi;
            }
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    /// Adds a fixed (non-differentiable) tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        if self.value(x).shape() != c.shape() {
            return Err(mismatch("add_const", self.value(x).shape(), c.shape()));
        }
        let mut t = self.value(x).clone();
        t.add_assign(c);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::AddConst(x), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- normalization --------------------------------------------------

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis. With a mask (row-major, same element
    /// count as `x`), each row is renormalized over its unmasked entries and
    /// masked entries are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        if let Some(m) = mask {
            if m.len() != t.numel() {
                return Err(mismatch("masked_softmax", t.shape(), &[m.len()]));
            }
        }
        if !t.all_finite() {
            return Err(NumericsError::NonFinite { op: "softmax" });
        }
        let cols = t.cols().max(1);
        let mut out = vec![F::zero(); t.numel()];
        for (r, (src, dst)) in t.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
            let mut max = F::neg_infinity();
            for (j, &v) in src.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == F::neg_infinity() {
                return Err(NumericsError::EmptyMaskRow { row: r });
            }
            let mut total = F::zero();
            for (j, (&v, o)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (v - max).exp();
                    total = total + *o;
                }
            }
            for o in dst.iter_mut() {
                *o = *o / total;
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// Per-row layer normalization: `gain ⊙ (x − mean)/sqrt(var + eps) + bias`
    /// with the biased variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(mismatch("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let nf = F::c(d as f64);
        let eps = F::c(eps);
        let mut out = vec![F::zero(); t.numel()];
        let mut xhat = vec![F::zero(); t.numel()];
        let mut inv_std = Vec::with_capacity(t.rows());
        for (r, row) in t.data().chunks(d).enumerate() {
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / nf;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- indexing and layout --------------------------------------------

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2("gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + width > c {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                bound: c,
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, width], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Rank {
                op: "concat_cols",
                expected: 2,
                shape: Vec::new(),
            });
        };
        let (r, _) = self.value(first).dims2("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Maps relative-distance scores `x[T×(2T−1)]` onto a `T×T` grid:
    /// `out[i][j] = x[i][i − j + T − 1]`.
    pub fn gather_relative(&mut self, x: Var) -> Result<Var> {
        let (t, w) = self.value(x).dims2("gather_relative")?;
        if w != 2 * t - 1 {
            return Err(mismatch("gather_relative", self.value(x).shape(), &[t, 2 * t - 1]));
        }
        let src = self.value(x).data();
        let mut out = vec![F::zero(); t * t];
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = src[i * w + (i + t - 1 - j)];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![t, t], out)?, Op::GatherRelative(x), rg))
    }

    /// Rotates consecutive column pairs of each row. `cos`/`sin` are
    /// `rows × width/2` tables; pairs are taken within each `width`-wide block.
    pub fn rotate_pairs(&mut self, x: Var, cos: Vec<F>, sin: Vec<F>, width: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2("rotate_pairs")?;
        let half = width / 2;
        if width % 2 != 0 || c % width != 0 || cos.len() != r * half || sin.len() != r * half {
            return Err(mismatch("rotate_pairs", self.value(x).shape(), &[r, width]));
        }
        let out = rotate(self.value(x).data(), &cos, &sin, r, c, width, false);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::RotatePairs { x, cos, sin, width },
            rg,
        ))
    }

    // ---- losses -----------------------------------------------------------

    /// Summed cross-entropy over rows with a target; rows with `None` are
    /// ignored. Uses a max-shifted log-sum-exp.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != r {
            return Err(mismatch("cross_entropy", self.value(logits).shape(), &[targets.len()]));
        }
        let t = self.value(logits);
        if !t.all_finite() {
            return Err(NumericsError::NonFinite { op: "cross_entropy" });
        }
        let mut probs = vec![F::zero(); r * v];
        let mut loss = F::zero();
        for (i, target) in targets.iter().enumerate() {
            let Some(k) = *target else { continue };
            if k >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: k,
                    bound: v,
                });
            }
            let row = t.row(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[i * v + j] = e;
                total = total + e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p = *p / total;
            }
            loss = loss + (total.ln() + max - row[k]);
        }
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

    // ---- extension ----------------------------------------------------------

    pub fn custom(&mut self, inputs: &[Var], output: Tensor<F>, op: Box<dyn CustomOp<F>>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires
    /// a gradient. Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), F::one()));

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<F>>], to: Var, g: Tensor<F>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let da = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.send(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.send(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                if self.requires_grad(*a) {
                    let da = matmul_nn(g.data(), tb.data(), m, n, k);
                    self.send(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let db = matmul_tn(g.data(), ta.data(), m, n, k);
                    self.send(grads, *b, Tensor::new(vec![n, k], db)?);
                }
            }
            Op::Transpose(a) => self.send(grads, *a, g.transposed()),
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.send(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.send(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) | Op::AddConst(a) => self.send(grads, *a, g.clone()),
            Op::AddRow(x, bias) => {
                self.send(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let c = g.cols();
                    let mut db = vec![F::zero(); c];
                    for row in g.data().chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.send(grads, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Relu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gi, &o)| if o > F::zero() { gi } else { F::zero() })
                    .collect();
                self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Softmax(x) => {
                let cols = out.cols().max(1);
                let mut d = vec![F::zero(); out.numel()];
                for ((y, gr), dr) in out
                    .data()
                    .chunks(cols)
                    .zip(g.data().chunks(cols))
                    .zip(d.chunks_mut(cols))
                {
                    let inner = dot(y, gr);
                    for j in 0..cols {
                        dr[j] = y[j] * (gr[j] - inner);
                    }
                }
                self.send(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gn = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let nf = F::c(d as f64);
                    let mut dx = vec![F::zero(); out.numel()];
                    let mut dxhat = vec![F::zero(); d];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gn[j];
                        }
                        let s1: F = dxhat.iter().copied().sum();
                        let s2 = dot(&dxhat, xh);
                        for j in 0..d {
                            dx[r * d + j] = is / nf * (nf * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                    self.send(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
                }
                let mut dg = vec![F::zero(); d];
                let mut db = vec![F::zero(); d];
                for (gr, xh) in g.data().chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xh[j];
                        db[j] = db[j] + gr[j];
                    }
                }
                let gs = self.value(*gain).shape().to_vec();
                let bs = self.value(*bias).shape().to_vec();
                self.send(grads, *gain, Tensor::new(gs, dg)?);
                self.send(grads, *bias, Tensor::new(bs, db)?);
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![F::zero(); tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    axpy(F::one(), &g.data()[i * d..(i + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                self.send(grads, *table, Tensor::new(tt.shape().to_vec(), dt)?);
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (r, c) = (tx.rows(), tx.cols());
                let w = g.cols();
                let mut dx = vec![F::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                }
                self.send(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.send(grads, p, Tensor::new(vec![r, w], dp)?);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let upstream = g.item();
                let v = self.value(*logits).cols();
                let mut d = vec![F::zero(); probs.len()];
                for (i, target) in targets.iter().enumerate() {
                    let Some(k) = *target else { continue };
                    for j in 0..v {
                        d[i * v + j] = probs[i * v + j] * upstream;
                    }
                    d[i * v + k] = d[i * v + k] - upstream;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.send(grads, *logits, Tensor::new(shape, d)?);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.send(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::GatherRelative(x) => {
                let t = out.rows();
                let w = 2 * t - 1;
                let mut dx = vec![F::zero(); t * w];
                for i in 0..t {
                    for j in 0..t {
                        let k = i * w + (i + t - 1 - j);
                        dx[k] = dx[k] + g.data()[i * t + j];
                    }
                }
                self.send(grads, *x, Tensor::new(vec![t, w], dx)?);
            }
            Op::RotatePairs { x, cos, sin, width } => {
                let (r, c) = (out.rows(), out.cols());
                let dx = rotate(g.data(), cos, sin, r, c, *width, true);
                self.send(grads, *x, Tensor::new(vec![r, c], dx)?);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<F>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = op.backward(&ins, out, g);
                debug_assert_eq!(gs.len(), inputs.len(), "{}", op.name());
                for (v, gi) in inputs.iter().zip(gs) {
                    self.send(grads, *v, gi);
                }
            }
        }
        Ok(())
    }
}

fn rotate<F: Real>(
    x: &[F],
    cos: &[F],
    sin: &[F],
    rows: usize,
    cols: usize,
    width: usize,
    inverse: bool,
) -> Vec<F> {
    let half = width / 2;
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        for block in (0..cols).step_by(width) {
            for k in 0..half {
                let (c, s) = (cos[r * half + k], sin[r * half + k]);
                let s = if inverse { -s } else { s };
                let i0 = r * cols + block + 2 * k;
                let (a, b) = (x[i0], x[i0 + 1]);
                out[i0] = a * c - b * s;
                out[i0 + 1] = a * s + b * c;
            }
        }
    }
    out
}
