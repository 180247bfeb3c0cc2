use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::Task;

/// One evaluation during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean batch loss since the previous evaluation (`NaN` at step 0).
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub elapsed_secs: f64,
}

/// Equality ignores wall-clock time so that reruns compare equal.
impl PartialEq for EvalPoint {
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.test_accuracy.to_bits() == other.test_accuracy.to_bits()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: String,
    pub stack: bool,
    pub seed: u64,
    pub points: Vec<EvalPoint>,
    /// Loss of every optimizer step, in order.
    pub losses: Vec<f64>,
    pub diverged: Option<String>,
}

impl RunRecord {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.points.last().map(|p| p.test_accuracy)
    }

    /// Line-delimited JSON: one object per evaluation.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for p in &self.points {
            let line = serde_json::json!({
                "task": self.task,
                "stack": self.stack,
                "seed": self.seed,
                "step": p.step,
                "loss": if p.train_loss.is_finite() { Some(p.train_loss) } else { None },
                "accuracy": p.test_accuracy,
                "elapsed_secs": p.elapsed_secs,
            });
            writeln!(out, "{line}")?;
        }
        if let Some(d) = &self.diverged {
            writeln!(out, "{}", serde_json::json!({ "diverged": d }))?;
        }
        Ok(())
    }

    /// Reads the evaluation points back from [`RunRecord::write_jsonl`]
    /// output.
    pub fn read_points<R: BufRead>(input: R) -> Result<Vec<EvalPoint>> {
        let mut out = Vec::new();
        for line in input.lines() {
            let v: serde_json::Value =
                serde_json::from_str(&line?).map_err(|e| Error::Task(format!("bad record line: {e}")))?;
            if v.get("diverged").is_some() {
                continue;
            }
            let num = |k: &str| v.get(k).and_then(serde_json::Value::as_f64);
            out.push(EvalPoint {
                step: num("step").ok_or_else(|| Error::Task("record without step".into()))? as usize,
                train_loss: num("loss").unwrap_or(f64::NAN),
                test_accuracy: num("accuracy").ok_or_else(|| Error::Task("record without accuracy".into()))?,
                elapsed_secs: num("elapsed_secs").unwrap_or(0.0),
            });
        }
        Ok(out)
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedSummary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl SeedSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                runs: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, runs: n }
    }
}

/// Final-accuracy table with one row per task and one column per model
/// kind, cells as `mean ± std` in percent.
pub fn summary_table(records: &[RunRecord]) -> String {
    let mut out = String::from("task\tvanilla\tstack\n");
    for task in Task::ALL {
        let name = task.name();
        if !records.iter().any(|r| r.task == name) {
            continue;
        }
        let cell = |stack: bool| {
            let acc: Vec<f64> = records
                .iter()
                .filter(|r| r.task == name && r.stack == stack)
                .filter_map(RunRecord::final_accuracy)
                .collect();
            if acc.is_empty() {
                return "-".to_string();
            }
            let s = SeedSummary::of(&acc);
            format!("{:.1} ± {:.1} (n={})", 100.0 * s.mean, 100.0 * s.std, s.runs)
        };
        let _ = writeln!(out, "{name}\t{}\t{}", cell(false), cell(true));
    }
    out
}
