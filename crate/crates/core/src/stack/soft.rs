//! Differentiable stack attention.
//!
//! Position `i` (0 = [BOS]) owns a distribution `α_i` over positions
//! `0..=N` marking where the current stack top was pushed. `α_0` attends to
//! [BOS] (the empty stack) and each later `α_i` superposes the three
//! candidates
//!
//! ```text
//! push:  onehot(i)
//! pop:   α_{i−1}(0)·α_0 + Σ_{j=1}^{i−1} α_{i−1}(j)·α_{j−1}
//! no-op: α_{i−1}
//! ```
//!
//! weighted by the action distribution `a_i`.

use crate::error::{Error, Result};
use crate::numerics::kernels::{axpy, dot};
use crate::numerics::{CustomOp, Real, Tape, Tensor, Var};

use super::StackOp;

/// Tolerance on the simplex constraint when validating caller-supplied
/// action distributions.
pub const ACTION_TOLERANCE: f64 = 1e-6;

/// Distribution over (PUSH, POP, NO-OP).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionDistribution<F>([F; 3]);

impl<F: Real> ActionDistribution<F> {
    pub fn new(push: F, pop: F, noop: F) -> Result<Self> {
        Self::from_array([push, pop, noop], 0)
    }

    fn from_array(p: [F; 3], step: usize) -> Result<Self> {
        if p.iter().any(|x| !x.is_finite() || *x < F::zero()) {
            return Err(Error::InvalidAction {
                step,
                reason: format!("entries must be finite and nonnegative, got {p:?}"),
            });
        }
        let total = (p[0] + p[1] + p[2]).f64();
        if (total - 1.0).abs() > ACTION_TOLERANCE {
            return Err(Error::InvalidAction {
                step,
                reason: format!("entries sum to {total}"),
            });
        }
        Ok(Self(p))
    }

    pub fn one_hot(op: StackOp) -> Self {
        let mut p = [F::zero(); 3];
        p[op.index()] = F::one();
        Self(p)
    }

    pub fn uniform() -> Self {
        let third = F::one() / F::c(3.0);
        Self([third; 3])
    }

    pub fn get(&self, op: StackOp) -> F {
        self.0[op.index()]
    }

    pub fn as_array(&self) -> [F; 3] {
        self.0
    }

    /// Most probable action; ties resolve in PUSH, POP, NO-OP order.
    pub fn argmax(&self) -> StackOp {
        let mut best = StackOp::Push;
        for op in [StackOp::Pop, StackOp::NoOp] {
            if self.get(op) > self.get(best) {
                best = op;
            }
        }
        best
    }
}

/// One-hot vector of length `n + 1` at `i`, for `1 ≤ i ≤ n`.
pub fn soft_push<F: Real>(i: usize, n: usize) -> Result<Vec<F>> {
    if i == 0 || i > n {
        return Err(Error::PushIndex { index: i, n });
    }
    let mut v = vec![F::zero(); n + 1];
    v[i] = F::one();
    Ok(v)
}

/// Pop candidate at step `i = history.len()`, given `α_0..α_{i−1}`.
pub fn soft_pop<F: Real>(history: &[Vec<F>]) -> Vec<F> {
    let mut out = vec![F::zero(); history[0].len()];
    pop_into(history, &mut out);
    out
}

/// Writes the pop candidate into `out` (which must be zeroed) and returns
/// the number of vector operations performed.
fn pop_into<F: Real>(history: &[Vec<F>], out: &mut [F]) -> usize {
    let i = history.len();
    let prev = &history[i - 1];
    // α_{j−1} is supported on 0..j, so each term only touches that prefix.
    axpy(prev[0], &history[0][..1], &mut out[..1]);
    for j in 1..i {
        axpy(prev[j], &history[j - 1][..j], &mut out[..j]);
    }
    i
}

/// The sequence `α_0..α_k` for a sequence of `n` positions after [BOS].
#[derive(Clone, Debug, PartialEq)]
pub struct StackAttnState<F> {
    n: usize,
    alphas: Vec<Vec<F>>,
    pops: Vec<Vec<F>>,
    actions: Vec<[F; 3]>,
    vector_ops: usize,
}

impl<F: Real> StackAttnState<F> {
    pub fn new(n: usize) -> Self {
        let mut alpha0 = vec![F::zero(); n + 1];
        alpha0[0] = F::one();
        Self {
            n,
            alphas: vec![alpha0],
            pops: vec![vec![F::zero(); n + 1]],
            actions: vec![[F::zero(); 3]],
            vector_ops: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Index of the next step to be computed.
    pub fn next_index(&self) -> usize {
        self.alphas.len()
    }

    pub fn alphas(&self) -> &[Vec<F>] {
        &self.alphas
    }

    pub fn alpha(&self, i: usize) -> &[F] {
        &self.alphas[i]
    }

    /// Action distributions `a_1..a_k`.
    pub fn actions(&self) -> &[[F; 3]] {
        &self.actions[1..]
    }

    /// Vector operations (axpy over a stored α) spent so far.
    pub fn vector_ops(&self) -> usize {
        self.vector_ops
    }

    /// Appends `α_i` for `i = next_index()`.
    pub fn step(&mut self, a: &ActionDistribution<F>) -> Result<&[F]> {
        let i = self.next_index();
        if i > self.n {
            return Err(Error::PushIndex { index: i, n: self.n });
        }
        self.advance(a.as_array());
        Ok(&self.alphas[i])
    }

    /// Unvalidated step used by the differentiable path, where the actions
    /// come from a softmax.
    fn advance(&mut self, a: [F; 3]) {
        let i = self.alphas.len();
        let mut pop = vec![F::zero(); self.n + 1];
        self.vector_ops += pop_into(&self.alphas, &mut pop);
        let prev = &self.alphas[i - 1];
        let mut next = vec![F::zero(); self.n + 1];
        axpy(a[StackOp::NoOp.index()], &prev[..i], &mut next[..i]);
        axpy(a[StackOp::Pop.index()], &pop[..i], &mut next[..i]);
        next[i] = next[i] + a[StackOp::Push.index()];
        self.vector_ops += 2;
        self.alphas.push(next);
        self.pops.push(pop);
        self.actions.push(a);
    }

    /// First `(i, n)` with `n > i` and `α_i(n) ≠ 0`.
    pub fn causality_violation(&self) -> Option<(usize, usize)> {
        self.alphas.iter().enumerate().find_map(|(i, a)| {
            a.iter()
                .enumerate()
                .skip(i + 1)
                .find(|(_, v)| **v != F::zero())
                .map(|(n, _)| (i, n))
        })
    }

    /// Stored α as a `(k+1)×(N+1)` matrix, one α per row.
    pub fn to_matrix(&self) -> Tensor<F> {
        let data = self.alphas.iter().flatten().copied().collect();
        Tensor::new(vec![self.alphas.len(), self.n + 1], data).expect("rectangular state")
    }
}

/// Computes `α_i = a(PUSH)·push + a(POP)·pop + a(NO-OP)·α_{i−1}` and appends
/// it. `i` must be the state's next index.
pub fn soft_step<F: Real>(
    state: &mut StackAttnState<F>,
    a: &ActionDistribution<F>,
    i: usize,
) -> Result<Vec<F>> {
    if i == 0 || i != state.next_index() {
        return Err(Error::InvalidAction {
            step: i,
            reason: format!("expected step {}", state.next_index()),
        });
    }
    let a = ActionDistribution::from_array(a.as_array(), i)?;
    Ok(state.step(&a)?.to_vec())
}

/// Runs the recursion over `actions[T×3]` (row 0, for [BOS], is ignored)
/// and returns the `T×T` matrix of α, one α per row.
pub fn stack_attention<F: Real>(tape: &mut Tape<F>, actions: Var) -> Result<Var> {
    let (t, w) = tape.value(actions).dims2("stack_attention")?;
    if w != 3 || t == 0 {
        return Err(crate::numerics::NumericsError::ShapeMismatch {
            op: "stack_attention",
            left: vec![t, w],
            right: vec![t, 3],
        }
        .into());
    }
    let state = run_recursion(tape.value(actions));
    let out = state.to_matrix();
    Ok(tape.custom(&[actions], out, Box::new(StackAttentionOp { state })))
}

fn run_recursion<F: Real>(actions: &Tensor<F>) -> StackAttnState<F> {
    let n = actions.rows() - 1;
    let mut state = StackAttnState::new(n);
    for i in 1..=n {
        let r = actions.row(i);
        state.advance([r[0], r[1], r[2]]);
    }
    state
}

struct StackAttentionOp<F> {
    state: StackAttnState<F>,
}

impl<F: Real> CustomOp<F> for StackAttentionOp<F> {
    fn name(&self) -> &'static str {
        "stack_attention"
    }

    fn backward(&self, _inputs: &[&Tensor<F>], _output: &Tensor<F>, grad: &Tensor<F>) -> Vec<Tensor<F>> {
        let s = &self.state;
        let t = s.n + 1;
        let alphas = &s.alphas;
        // g[i] accumulates dL/dα_i; it is complete once every later step
        // has been visited.
        let mut g: Vec<Vec<F>> = (0..t).map(|i| grad.row(i).to_vec()).collect();
        let mut da = vec![F::zero(); t * 3];
        for i in (1..t).rev() {
            let gi = std::mem::take(&mut g[i]);
            let [_, pop_w, noop_w] = s.actions[i];
            da[i * 3 + StackOp::Push.index()] = gi[i];
            da[i * 3 + StackOp::Pop.index()] = dot(&gi, &s.pops[i]);
            da[i * 3 + StackOp::NoOp.index()] = dot(&gi, &alphas[i - 1]);

            axpy(noop_w, &gi, &mut g[i - 1]);
            if pop_w == F::zero() {
                continue;
            }
            let gp: Vec<F> = gi.iter().map(|&x| x * pop_w).collect();
            let prev = &alphas[i - 1];
            // Term α_{i−1}(0)·α_0.
            g[i - 1][0] = g[i - 1][0] + gp[0];
            axpy(prev[0], &gp, &mut g[0]);
            // Terms α_{i−1}(j)·α_{j−1}.
            for j in 1..i {
                let coeff = dot(&gp[..j], &alphas[j - 1][..j]);
                g[i - 1][j] = g[i - 1][j] + coeff;
                if prev[j] != F::zero() {
                    axpy(prev[j], &gp, &mut g[j - 1]);
                }
            }
        }
        vec![Tensor::new(vec![t, 3], da).expect("action grad shape")]
    }
}
