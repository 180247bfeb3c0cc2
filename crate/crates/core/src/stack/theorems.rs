//! Executable checks relating the soft recursion to the exact stack.
//!
//! * Hard-operation equivalence: with one-hot actions, `α_i` is the one-hot
//!   encoding of the exact stack's PEEK after `i` operations.
//! * Normalization: for any valid action distributions, every `α_i` sums
//!   to one.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use super::{peek_trace, ActionDistribution, StackAttnState, StackOp};
use crate::error::Result;

/// Tolerance for hard-operation equivalence at 64-bit.
pub const HARD_TOLERANCE: f64 = 1e-12;
/// Tolerance for normalization at 64-bit.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// The worked example: PUSH a, PUSH b, PUSH c, POP, NO-OP, POP.
pub const WORKED_EXAMPLE: [StackOp; 6] = [
    StackOp::Push,
    StackOp::Push,
    StackOp::Push,
    StackOp::Pop,
    StackOp::NoOp,
    StackOp::Pop,
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HardEquivalenceReport {
    pub holds: bool,
    /// PEEK of the exact stack for steps `0..=N`.
    pub peeks: Vec<usize>,
    pub max_deviation: f64,
    pub first_divergence: Option<usize>,
    #[serde(serialize_with = "ops_as_names")]
    pub ops: Vec<StackOp>,
}

fn ops_as_names<S: serde::Serializer>(ops: &[StackOp], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(ops.iter().map(|o| o.to_string()))
}

/// Runs the soft recursion with one-hot actions and the exact stack in
/// lockstep over `N = ops.len()` steps.
pub fn check_theorem1(ops: &[StackOp]) -> HardEquivalenceReport {
    let n = ops.len();
    let peeks = peek_trace(ops);
    let mut state = StackAttnState::<f64>::new(n);
    for &op in ops {
        state
            .step(&ActionDistribution::one_hot(op))
            .expect("step index within n");
    }
    let mut max_deviation = 0.0f64;
    let mut first_divergence = None;
    for (i, (alpha, &peek)) in state.alphas().iter().zip(&peeks).enumerate() {
        let dev = alpha
            .iter()
            .enumerate()
            .map(|(k, &v)| (v - if k == peek { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max);
        max_deviation = max_deviation.max(dev);
        if dev >= HARD_TOLERANCE && first_divergence.is_none() {
            first_divergence = Some(i);
        }
    }
    HardEquivalenceReport {
        holds: first_divergence.is_none(),
        peeks,
        max_deviation,
        first_divergence,
        ops: ops.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormalizationReport {
    pub holds: bool,
    pub max_deviation: f64,
    pub first_violation: Option<usize>,
    pub causal: bool,
}

/// Runs the recursion over validated action distributions and checks that
/// each `α_i` sums to one and is causal.
pub fn check_theorem2(actions: &[ActionDistribution<f64>]) -> Result<NormalizationReport> {
    let mut state = StackAttnState::<f64>::new(actions.len());
    for (k, a) in actions.iter().enumerate() {
        super::soft_step(&mut state, a, k + 1)?;
    }
    let mut max_deviation = 0.0f64;
    let mut first_violation = None;
    for (i, alpha) in state.alphas().iter().enumerate() {
        let dev = (alpha.iter().sum::<f64>() - 1.0).abs();
        max_deviation = max_deviation.max(dev);
        if dev > NORMALIZATION_TOLERANCE && first_violation.is_none() {
            first_violation = Some(i);
        }
    }
    let causal = state.causality_violation().is_none();
    Ok(NormalizationReport {
        holds: first_violation.is_none() && causal,
        max_deviation,
        first_violation,
        causal,
    })
}

/// α for a known operation sequence, computed from the exact stack alone.
pub fn precompute_alphas(ops: &[StackOp]) -> Vec<Vec<f64>> {
    let n = ops.len();
    peek_trace(ops)
        .into_iter()
        .map(|top| {
            let mut a = vec![0.0; n + 1];
            a[top] = 1.0;
            a
        })
        .collect()
}

pub fn random_ops<R: Rng>(rng: &mut R, n: usize) -> Vec<StackOp> {
    (0..n).map(|_| StackOp::ALL[rng.gen_range(0..3)]).collect()
}

/// Uniform Dirichlet(1, 1, 1) sample.
pub fn random_action<R: Rng>(rng: &mut R) -> ActionDistribution<f64> {
    let e: [f64; 3] = std::array::from_fn(|_| Exp1.sample(rng));
    let total: f64 = e.iter().sum();
    ActionDistribution::new(e[0] / total, e[1] / total, e[2] / total).expect("normalized sample")
}
