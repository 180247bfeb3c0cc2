//! Stack attention: an exact index stack, its differentiable relaxation, the
//! stack sublayer, and executable checks tying the two together.

mod hard;
mod soft;
pub mod theorems;

pub use hard::{hard_step, peek_trace, HardStack, StackOp};
pub use soft::{
    soft_pop, soft_push, soft_step, stack_attention, ActionDistribution, StackAttnState,
    ACTION_TOLERANCE,
};

use crate::error::Result;
use crate::numerics::{NumericsError, Real, Tape, Var};

/// Action head: `softmax(h·W_A + b_A)` with `W_A` stored as `D×3`.
#[derive(Clone, Copy, Debug)]
pub struct StackParams {
    pub w_a: Var,
    pub b_a: Var,
}

pub struct StackSublayerOutput {
    pub output: Var,
    /// `T×T`, row `i` is `α_i`.
    pub alphas: Var,
    /// `T×3` action distributions; row 0 is unused.
    pub actions: Var,
}

/// Action distributions for every row of `h[T×D]`.
pub fn action_distribution<F: Real>(tape: &mut Tape<F>, h: Var, params: &StackParams) -> Result<Var> {
    let logits = tape.matmul(h, params.w_a)?;
    let logits = tape.add_row(logits, params.b_a)?;
    Ok(tape.softmax(logits)?)
}

/// Row `i` of the result is `Σ_n α_i(n)·h_n`.
pub fn stack_readout<F: Real>(tape: &mut Tape<F>, h: Var, alphas: Var) -> Result<Var> {
    let rows = tape.value(h).rows();
    let (_, cols) = tape.value(alphas).dims2("stack_readout")?;
    if cols != rows {
        return Err(NumericsError::ShapeMismatch {
            op: "stack_readout",
            left: tape.value(alphas).shape().to_vec(),
            right: tape.value(h).shape().to_vec(),
        }
        .into());
    }
    Ok(tape.matmul(alphas, h)?)
}

/// `S(H) + H`, without layer normalization.
pub fn stack_sublayer<F: Real>(tape: &mut Tape<F>, h: Var, params: &StackParams) -> Result<StackSublayerOutput> {
    let actions = action_distribution(tape, h, params)?;
    let alphas = stack_attention(tape, actions)?;
    let read = stack_readout(tape, h, alphas)?;
    let output = tape.add(read, h)?;
    Ok(StackSublayerOutput {
        output,
        alphas,
        actions,
    })
}
