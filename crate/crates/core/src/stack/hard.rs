use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// One of the three stack actions. The discriminant is the column of the
/// action in an action distribution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackOp {
    Push = 0,
    Pop = 1,
    NoOp = 2,
}

impl StackOp {
    pub const ALL: [StackOp; 3] = [StackOp::Push, StackOp::Pop, StackOp::NoOp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for StackOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StackOp::Push => "PUSH",
            StackOp::Pop => "POP",
            StackOp::NoOp => "NO-OP",
        })
    }
}

impl FromStr for StackOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.to_ascii_uppercase().as_str() {
            "PUSH" => Ok(StackOp::Push),
            "POP" => Ok(StackOp::Pop),
            "NO-OP" | "NOOP" | "NO_OP" => Ok(StackOp::NoOp),
            _ => Err(Error::UnknownToken(s.to_string())),
        }
    }
}

/// Exact stack over position indices, bottom first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct HardStack {
    items: Vec<usize>,
}

impl HardStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, index: usize) {
        self.items.push(index);
    }

    /// No effect on an empty stack.
    pub fn pop(&mut self) {
        self.items.pop();
    }

    /// Top index, or 0 when empty.
    pub fn peek(&self) -> usize {
        self.items.last().copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.items
    }

    /// Applies `op` at step `i`; a push stores `i`.
    pub fn apply(&mut self, op: StackOp, i: usize) {
        match op {
            StackOp::Push => self.push(i),
            StackOp::Pop => self.pop(),
            StackOp::NoOp => {}
        }
    }
}

pub fn hard_step(stack: &HardStack, op: StackOp, i: usize) -> HardStack {
    let mut next = stack.clone();
    next.apply(op, i);
    next
}

/// PEEK after each prefix of `ops`, starting with the empty stack (step 0).
pub fn peek_trace(ops: &[StackOp]) -> Vec<usize> {
    let mut stack = HardStack::new();
    let mut trace = Vec::with_capacity(ops.len() + 1);
    trace.push(stack.peek());
    for (k, &op) in ops.iter().enumerate() {
        stack.apply(op, k + 1);
        trace.push(stack.peek());
    }
    trace
}
