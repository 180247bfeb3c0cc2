//! Modular arithmetic expressions: a length-exact random generator built on
//! syntax trees, and an independent recursive-descent evaluator.
//!
//! Grammar (left-associative, `·` binds tighter than `+`/`−`):
//!
//! ```text
//! expr   := term (("+" | "−") term)*
//! term   := factor ("·" factor)*
//! factor := digit | "z" | "−" factor | "(" expr ")"
//! ```

use rand::Rng;

use crate::error::{Error, Result};

pub const MODULUS: i64 = 5;
pub const PLUS: &str = "+";
pub const MINUS: &str = "−";
pub const TIMES: &str = "·";
pub const EQUIV: &str = "≡";
pub const VARIABLE: &str = "z";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Digit(i64),
    Var,
    Neg(Box<Node>),
    Paren(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
}

impl Node {
    fn eval(&self, z: i64) -> i64 {
        match self {
            Node::Digit(d) => *d,
            Node::Var => z,
            Node::Neg(a) => (-a.eval(z)).rem_euclid(MODULUS),
            Node::Paren(a) => a.eval(z),
            Node::Bin(op, a, b) => {
                let (a, b) = (a.eval(z), b.eval(z));
                match op {
                    BinOp::Add => (a + b).rem_euclid(MODULUS),
                    BinOp::Sub => (a - b).rem_euclid(MODULUS),
                    BinOp::Mul => (a * b).rem_euclid(MODULUS),
                }
            }
        }
    }

    fn write(&self, out: &mut Vec<String>) {
        match self {
            Node::Digit(d) => out.push(d.to_string()),
            Node::Var => out.push(VARIABLE.into()),
            Node::Neg(a) => {
                out.push(MINUS.into());
                a.write(out);
            }
            Node::Paren(a) => {
                out.push("(".into());
                a.write(out);
                out.push(")".into());
            }
            Node::Bin(op, a, b) => {
                a.write(out);
                out.push(
                    match op {
                        BinOp::Add => PLUS,
                        BinOp::Sub => MINUS,
                        BinOp::Mul => TIMES,
                    }
                    .into(),
                );
                b.write(out);
            }
        }
    }

    fn leaves_mut(&mut self) -> Vec<&mut Node> {
        match self {
            Node::Digit(_) | Node::Var => vec![self],
            Node::Neg(a) | Node::Paren(a) => a.leaves_mut(),
            Node::Bin(_, a, b) => {
                let mut v = a.leaves_mut();
                v.extend(b.leaves_mut());
                v
            }
        }
    }
}

/// Random expression sampler producing exactly `n` tokens.
struct Sampler<'a, R> {
    rng: &'a mut R,
    multiply: bool,
}

impl<R: Rng> Sampler<'_, R> {
    fn expr(&mut self, n: usize) -> Node {
        if n >= 3 && self.rng.gen_bool(0.6) {
            let k = self.rng.gen_range(1..=n - 2);
            let op = if self.rng.gen_bool(0.5) { BinOp::Add } else { BinOp::Sub };
            return Node::Bin(op, Box::new(self.expr(k)), Box::new(self.term(n - 1 - k)));
        }
        self.term(n)
    }

    fn term(&mut self, n: usize) -> Node {
        if self.multiply && n >= 3 && self.rng.gen_bool(0.5) {
            let k = self.rng.gen_range(1..=n - 2);
            return Node::Bin(BinOp::Mul, Box::new(self.term(k)), Box::new(self.factor(n - 1 - k)));
        }
        self.factor(n)
    }

    fn factor(&mut self, n: usize) -> Node {
        match n {
            1 => Node::Digit(self.rng.gen_range(0..MODULUS)),
            2 => Node::Neg(Box::new(self.factor(1))),
            _ if self.rng.gen_bool(0.75) => Node::Paren(Box::new(self.expr(n - 2))),
            _ => Node::Neg(Box::new(self.factor(n - 1))),
        }
    }
}

/// Arithmetic instance of exactly `len` tokens (the expression plus `≡`)
/// whose value is `target`.
pub fn sample_arithmetic<R: Rng>(len: usize, target: i64, rng: &mut R) -> Result<Vec<String>> {
    if len < 2 {
        return Err(Error::Task(format!("arithmetic needs at least 2 tokens, got {len}")));
    }
    loop {
        let node = Sampler { rng, multiply: true }.expr(len - 1);
        if node.eval(0) == target {
            let mut out = Vec::with_capacity(len);
            node.write(&mut out);
            out.push(EQUIV.into());
            return Ok(out);
        }
    }
}

/// Equation instance of exactly `len` tokens (`lhs ≡ c`) whose unique
/// solution is `z`.
pub fn sample_equation<R: Rng>(len: usize, z: i64, rng: &mut R) -> Result<Vec<String>> {
    if len < 3 {
        return Err(Error::Task(format!("equations need at least 3 tokens, got {len}")));
    }
    let mut node = Sampler { rng, multiply: false }.expr(len - 2);
    let mut leaves = node.leaves_mut();
    let pick = rng.gen_range(0..leaves.len());
    *leaves[pick] = Node::Var;
    let c = node.eval(z);
    let mut out = Vec::with_capacity(len);
    node.write(&mut out);
    out.push(EQUIV.into());
    out.push(c.to_string());
    Ok(out)
}

/// Linear form `coeff·z + constant` (mod 5).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Value {
    coeff: i64,
    constant: i64,
}

impl Value {
    fn constant(c: i64) -> Self {
        Self { coeff: 0, constant: c }
    }

    fn norm(self) -> Self {
        Self {
            coeff: self.coeff.rem_euclid(MODULUS),
            constant: self.constant.rem_euclid(MODULUS),
        }
    }
}

struct Parser<'a> {
    tokens: &'a [String],
    pos: usize,
    variables: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn peek(&self) -> Option<&str> {
        self.tokens.get(self.pos).map(String::as_str)
    }

    fn expect(&mut self, tok: &str) -> Result<()> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(format!("expected {tok:?}, found {:?}", self.peek())))
        }
    }

    fn expr(&mut self) -> Result<Value> {
        let mut acc = self.term()?;
        while let Some(op) = self.peek() {
            let sign = match op {
                PLUS => 1,
                MINUS => -1,
                _ => break,
            };
            self.pos += 1;
            let rhs = self.term()?;
            acc = Value {
                coeff: acc.coeff + sign * rhs.coeff,
                constant: acc.constant + sign * rhs.constant,
            }
            .norm();
        }
        Ok(acc)
    }

    fn term(&mut self) -> Result<Value> {
        let mut acc = self.factor()?;
        while self.peek() == Some(TIMES) {
            self.pos += 1;
            let rhs = self.factor()?;
            if acc.coeff != 0 && rhs.coeff != 0 {
                return Err(self.error("product of two terms in z is not linear"));
            }
            acc = Value {
                coeff: acc.coeff * rhs.constant + rhs.coeff * acc.constant,
                constant: acc.constant * rhs.constant,
            }
            .norm();
        }
        Ok(acc)
    }

    fn factor(&mut self) -> Result<Value> {
        let tok = self.peek().ok_or_else(|| self.error("unexpected end of input"))?;
        match tok {
            MINUS => {
                self.pos += 1;
                let v = self.factor()?;
                Ok(Value {
                    coeff: -v.coeff,
                    constant: -v.constant,
                }
                .norm())
            }
            "(" => {
                self.pos += 1;
                let v = self.expr()?;
                self.expect(")")?;
                Ok(v)
            }
            VARIABLE => {
                self.pos += 1;
                self.variables += 1;
                Ok(Value { coeff: 1, constant: 0 })
            }
            d => match d.parse::<i64>() {
                Ok(v) if (0..MODULUS).contains(&v) && d.len() == 1 => {
                    self.pos += 1;
                    Ok(Value::constant(v))
                }
                _ => Err(self.error(format!("unexpected token {d:?}"))),
            },
        }
    }
}

fn digit(tokens: &[String], pos: usize) -> Result<i64> {
    match tokens.get(pos).map(|s| s.parse::<i64>()) {
        Some(Ok(v)) if (0..MODULUS).contains(&v) && tokens[pos].len() == 1 => Ok(v),
        other => Err(Error::Parse {
            pos,
            msg: format!("expected a digit 0..4, found {:?}", other.map(|_| &tokens[pos])),
        }),
    }
}

/// Evaluates `expr ≡` modulo 5.
pub fn evaluate_arithmetic(tokens: &[String]) -> Result<i64> {
    let mut p = Parser {
        tokens,
        pos: 0,
        variables: 0,
    };
    let v = p.expr()?;
    if p.variables > 0 {
        return Err(Error::Parse {
            pos: 0,
            msg: "arithmetic expressions may not contain z".into(),
        });
    }
    p.expect(EQUIV)?;
    if p.pos != tokens.len() {
        return Err(p.error("trailing tokens after ≡"));
    }
    Ok(v.constant)
}

/// Solves `lhs ≡ c` for `z` by trying every residue.
pub fn solve_equation(tokens: &[String]) -> Result<i64> {
    let mut p = Parser {
        tokens,
        pos: 0,
        variables: 0,
    };
    let lhs = p.expr()?;
    p.expect(EQUIV)?;
    let c = digit(tokens, p.pos)?;
    if p.pos + 1 != tokens.len() {
        return Err(Error::Parse {
            pos: p.pos + 1,
            msg: "trailing tokens after the right-hand side".into(),
        });
    }
    if p.variables != 1 {
        return Err(Error::Parse {
            pos: 0,
            msg: format!("expected exactly one z, found {}", p.variables),
        });
    }
    let solutions: Vec<i64> = (0..MODULUS)
        .filter(|z| (lhs.coeff * z + lhs.constant).rem_euclid(MODULUS) == c)
        .collect();
    match solutions.as_slice() {
        [z] => Ok(*z),
        _ => Err(Error::Task(format!("equation has {} solutions", solutions.len()))),
    }
}
