//! The four transduction tasks: string reversal (RS), stack manipulation
//! (SM), modular arithmetic (MA) and solving a modular equation (SE).
//!
//! Every task has a generator, an independent oracle, and conversions into
//! masked or autoregressive training examples.

pub mod expr;

use std::fmt;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Vocabulary, BOS, EOS, MASK};

pub const PAD_SYMBOL: &str = "[PAD]";
pub const PUSH_A: &str = "[PUSH_a]";
pub const PUSH_B: &str = "[PUSH_b]";
pub const POP: &str = "[POP]";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Rs,
    Sm,
    Ma,
    Se,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Rs, Task::Sm, Task::Ma, Task::Se];

    pub fn name(self) -> &'static str {
        match self {
            Task::Rs => "RS",
            Task::Sm => "SM",
            Task::Ma => "MA",
            Task::Se => "SE",
        }
    }

    pub fn input_alphabet(self) -> &'static [&'static str] {
        match self {
            Task::Rs => &["a", "b"],
            Task::Sm => &["a", "b", PUSH_A, PUSH_B, POP],
            Task::Ma => &["0", "1", "2", "3", "4", "+", "−", "·", "(", ")", "≡"],
            Task::Se => &["0", "1", "2", "3", "4", "+", "−", "(", ")", "≡", "z"],
        }
    }

    pub fn output_alphabet(self) -> &'static [&'static str] {
        match self {
            Task::Rs => &["a", "b"],
            Task::Sm => &["a", "b", PAD_SYMBOL],
            Task::Ma | Task::Se => &["0", "1", "2", "3", "4"],
        }
    }

    /// `Σ = Σ_I ∪ Σ_O` in first-appearance order.
    pub fn alphabet(self) -> Vec<&'static str> {
        let mut out: Vec<&str> = self.input_alphabet().to_vec();
        for s in self.output_alphabet() {
            if !out.contains(s) {
                out.push(s);
            }
        }
        out
    }

    pub fn vocabulary(self) -> Vocabulary {
        Vocabulary::new(&self.alphabet()).expect("task alphabets are valid")
    }

    /// Smallest input length the generator supports.
    pub fn min_len(self) -> usize {
        match self {
            Task::Rs => 1,
            Task::Sm | Task::Ma => 2,
            Task::Se => 3,
        }
    }

    /// Output length for an input of length `n`.
    pub fn output_len(self, n: usize) -> usize {
        match self {
            Task::Rs => n,
            Task::Sm => n + 1,
            Task::Ma | Task::Se => 1,
        }
    }

    pub fn generate<R: Rng>(self, len: usize, rng: &mut R) -> Result<TaskInstance> {
        match self {
            Task::Rs => gen_rs(len, rng),
            Task::Sm => gen_sm(len, rng),
            Task::Ma => gen_ma(len, rng),
            Task::Se => gen_se(len, rng),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task {s:?} (rs|sm|ma|se)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: Task,
    pub x: Vec<String>,
    pub y: Vec<String>,
}

impl TaskInstance {
    /// Rebuilds `y` from the oracle, rejecting malformed `x`.
    pub fn from_input(task: Task, x: Vec<String>) -> Result<Self> {
        let y = oracle(task, &x)?;
        Ok(Self { task, x, y })
    }

    /// Checks `y` against the oracle.
    pub fn verify(&self) -> Result<()> {
        let want = oracle(self.task, &self.x)?;
        if want != self.y {
            return Err(Error::Task(format!(
                "{} instance {:?}: stored output {:?} but oracle gives {:?}",
                self.task,
                self.x.join(" "),
                self.y.join(" "),
                want.join(" ")
            )));
        }
        Ok(())
    }

    /// `x·f(x)` as a single word over `Σ`.
    pub fn word(&self) -> Vec<&str> {
        self.x.iter().chain(&self.y).map(String::as_str).collect()
    }
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn need(task: Task, len: usize) -> Result<()> {
    if len < task.min_len() {
        return Err(Error::Task(format!("{task} needs |x| ≥ {}, got {len}", task.min_len())));
    }
    Ok(())
}

pub fn gen_rs<R: Rng>(len: usize, rng: &mut R) -> Result<TaskInstance> {
    need(Task::Rs, len)?;
    let x: Vec<String> = (0..len).map(|_| if rng.gen_bool(0.5) { "a" } else { "b" }.to_string()).collect();
    let y = x.iter().rev().cloned().collect();
    Ok(TaskInstance { task: Task::Rs, x, y })
}

/// Initial stack of `k ∈ [1, len−1]` symbols (bottom to top) followed by
/// `len − k` operations; the output is the final stack top to bottom,
/// padded to `len + 1`.
pub fn gen_sm<R: Rng>(len: usize, rng: &mut R) -> Result<TaskInstance> {
    need(Task::Sm, len)?;
    let k = rng.gen_range(1..len);
    let mut stack: Vec<&str> = (0..k).map(|_| if rng.gen_bool(0.5) { "a" } else { "b" }).collect();
    let mut x = strings(&stack);
    for _ in k..len {
        let op = [PUSH_A, PUSH_B, POP][rng.gen_range(0..3)];
        match op {
            PUSH_A => stack.push("a"),
            PUSH_B => stack.push("b"),
            _ => {
                stack.pop();
            }
        }
        x.push(op.to_string());
    }
    let mut y: Vec<String> = stack.iter().rev().map(|s| s.to_string()).collect();
    y.resize(len + 1, PAD_SYMBOL.to_string());
    Ok(TaskInstance { task: Task::Sm, x, y })
}

/// The residue is drawn uniformly first, so the output is uniform over
/// `0..5` regardless of the expression shape distribution.
pub fn gen_ma<R: Rng>(len: usize, rng: &mut R) -> Result<TaskInstance> {
    need(Task::Ma, len)?;
    let target = rng.gen_range(0..expr::MODULUS);
    let x = expr::sample_arithmetic(len, target, rng)?;
    Ok(TaskInstance {
        task: Task::Ma,
        x,
        y: vec![target.to_string()],
    })
}

pub fn gen_se<R: Rng>(len: usize, rng: &mut R) -> Result<TaskInstance> {
    need(Task::Se, len)?;
    let z = rng.gen_range(0..expr::MODULUS);
    let x = expr::sample_equation(len, z, rng)?;
    Ok(TaskInstance {
        task: Task::Se,
        x,
        y: vec![z.to_string()],
    })
}

fn check_alphabet(task: Task, x: &[String]) -> Result<()> {
    if let Some(pos) = x.iter().position(|s| !task.input_alphabet().contains(&s.as_str())) {
        return Err(Error::Parse {
            pos,
            msg: format!("{:?} is not in the {task} input alphabet", x[pos]),
        });
    }
    Ok(())
}

fn simulate_stack(x: &[String]) -> Result<Vec<String>> {
    let mut stack: Vec<&str> = Vec::new();
    let mut in_ops = false;
    for (pos, s) in x.iter().enumerate() {
        match s.as_str() {
            "a" | "b" if !in_ops => stack.push(s),
            "a" | "b" => {
                return Err(Error::Parse {
                    pos,
                    msg: "stack symbols must precede operations".into(),
                })
            }
            PUSH_A => stack.push("a"),
            PUSH_B => stack.push("b"),
            _ => {
                stack.pop();
            }
        }
        if s.starts_with('[') {
            if pos == 0 {
                return Err(Error::Parse {
                    pos,
                    msg: "the initial stack must be non-empty".into(),
                });
            }
            in_ops = true;
        }
    }
    let mut y: Vec<String> = stack.iter().rev().map(|s| s.to_string()).collect();
    y.resize(x.len() + 1, PAD_SYMBOL.to_string());
    Ok(y)
}

/// Reference output for `x`, computed without any generator state.
pub fn oracle(task: Task, x: &[String]) -> Result<Vec<String>> {
    check_alphabet(task, x)?;
    if x.is_empty() {
        return Err(Error::Parse {
            pos: 0,
            msg: "empty input".into(),
        });
    }
    match task {
        Task::Rs => Ok(x.iter().rev().cloned().collect()),
        Task::Sm => simulate_stack(x),
        Task::Ma => Ok(vec![expr::evaluate_arithmetic(x)?.to_string()]),
        Task::Se => Ok(vec![expr::solve_equation(x)?.to_string()]),
    }
}

/// Maps ASCII spellings to the canonical symbols: `-`, `*`, `=` for `−`,
/// `·`, `≡`.
pub fn canonical_symbol(s: &str) -> &str {
    match s {
        "-" => expr::MINUS,
        "*" => expr::TIMES,
        "=" => expr::EQUIV,
        other => other,
    }
}

pub fn parse_symbols(s: &str) -> Vec<String> {
    s.split_whitespace().map(|t| canonical_symbol(t).to_string()).collect()
}

/// Per-token agreement, ignoring positions where the gold symbol is `[PAD]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
}

impl Score {
    /// `None` when every gold position is padding.
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

pub fn score<S: AsRef<str>, T: AsRef<str>>(pred: &[S], gold: &[T]) -> Result<Score> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            pred: pred.len(),
            gold: gold.len(),
        });
    }
    let mut s = Score::default();
    for (p, g) in pred.iter().zip(gold) {
        if g.as_ref() == PAD_SYMBOL {
            continue;
        }
        s.total += 1;
        s.correct += usize::from(p.as_ref() == g.as_ref());
    }
    Ok(s)
}

/// Mean per-instance accuracy over instances with at least one scored
/// position.
pub fn mean_accuracy(scores: &[Score]) -> f64 {
    let acc: Vec<f64> = scores.iter().filter_map(Score::accuracy).collect();
    if acc.is_empty() {
        0.0
    } else {
        acc.iter().sum::<f64>() / acc.len() as f64
    }
}

/// `[BOS]·x·[MASK]^{|y|}` with the gold id at each mask row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmExample {
    pub tokens: Vec<usize>,
    /// One entry per row of `tokens`.
    pub targets: Vec<Option<usize>>,
}

impl MlmExample {
    pub fn mask_rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.targets.iter().enumerate().filter(|(_, t)| t.is_some()).map(|(i, _)| i)
    }
}

pub fn make_mlm_input(inst: &TaskInstance, vocab: &Vocabulary) -> Result<MlmExample> {
    let x = vocab.encode(&inst.x)?;
    let y = vocab.encode(&inst.y)?;
    let mut tokens = Vec::with_capacity(1 + x.len() + y.len());
    tokens.push(BOS);
    tokens.extend(&x);
    tokens.extend(std::iter::repeat(MASK).take(y.len()));
    let mut targets = vec![None; 1 + x.len()];
    targets.extend(y.into_iter().map(Some));
    Ok(MlmExample { tokens, targets })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlmEpisode {
    /// `[BOS]·x`.
    pub prefix: Vec<usize>,
    pub continuation: Vec<usize>,
}

impl AlmEpisode {
    /// Teacher-forced sequence `[BOS]·x·y` and the next-token target for
    /// each row (the last row predicts `[EOS]`). Prefix rows are only
    /// supervised when `loss_on_prefix` is set.
    pub fn teacher_forced(&self, loss_on_prefix: bool) -> (Vec<usize>, Vec<Option<usize>>) {
        let tokens: Vec<usize> = self.prefix.iter().chain(&self.continuation).copied().collect();
        let first_output = self.prefix.len() - 1;
        let targets = (0..tokens.len())
            .map(|row| {
                if row < first_output && !loss_on_prefix {
                    None
                } else {
                    Some(tokens.get(row + 1).copied().unwrap_or(EOS))
                }
            })
            .collect();
        (tokens, targets)
    }
}

pub fn make_alm_episode(inst: &TaskInstance, vocab: &Vocabulary) -> Result<AlmEpisode> {
    let mut prefix = vec![BOS];
    prefix.extend(vocab.encode(&inst.x)?);
    Ok(AlmEpisode {
        prefix,
        continuation: vocab.encode(&inst.y)?,
    })
}

/// Independent stream for instance `index` of `split` under `seed`.
pub fn instance_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split.stream_tag() << 56) | index);
    rng
}

/// Instance `index` with `|x|` drawn uniformly from `lengths` (clamped to
/// the task minimum).
pub fn generate_instance(
    task: Task,
    lengths: &RangeInclusive<usize>,
    seed: u64,
    split: Split,
    index: u64,
) -> Result<TaskInstance> {
    let lo = (*lengths.start()).max(task.min_len());
    if lo > *lengths.end() {
        return Err(Error::Config(format!(
            "{task}: length range {}..{} has no valid length (minimum {})",
            lengths.start(),
            lengths.end(),
            task.min_len()
        )));
    }
    let mut rng = instance_rng(seed, split, index);
    let len = rng.gen_range(lo..=*lengths.end());
    task.generate(len, &mut rng)
}

pub fn generate_dataset(
    task: Task,
    lengths: &RangeInclusive<usize>,
    count: usize,
    seed: u64,
    split: Split,
) -> Result<Vec<TaskInstance>> {
    (0..count as u64)
        .map(|i| generate_instance(task, lengths, seed, split, i))
        .collect()
}

/// Parses `lo..hi` (inclusive) or a single length.
pub fn parse_length_range(s: &str) -> Result<RangeInclusive<usize>> {
    let bad = || Error::Config(format!("bad length range {s:?}, expected LO..HI"));
    let (lo, hi) = match s.split_once("..") {
        Some((a, b)) => (a, b.strip_prefix('=').unwrap_or(b)),
        None => (s, s),
    };
    let lo: usize = lo.trim().parse().map_err(|_| bad())?;
    let hi: usize = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || lo > hi {
        return Err(bad());
    }
    Ok(lo..=hi)
}

/// One instance per line: `task<TAB>x<TAB>y`, symbols space-separated.
pub fn write_dataset<W: Write>(mut out: W, instances: &[TaskInstance]) -> Result<()> {
    for inst in instances {
        writeln!(out, "{}\t{}\t{}", inst.task, inst.x.join(" "), inst.y.join(" "))?;
    }
    Ok(())
}

/// Reads the tab-separated format and re-verifies every line against the
/// oracle.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<TaskInstance>> {
    let mut out = Vec::new();
    for (no, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Task(format!("line {}: expected 3 tab-separated fields", no + 1)));
        }
        let inst = TaskInstance {
            task: fields[0].parse()?,
            x: parse_symbols(fields[1]),
            y: parse_symbols(fields[2]),
        };
        inst.verify()
            .map_err(|e| Error::Task(format!("line {}: {e}", no + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
