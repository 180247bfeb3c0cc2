use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::model::{on_off, parse_num, parse_switch, ModelConfig};
use crate::tasks::{parse_length_range, Task};

use super::AdamConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Size of the fixed held-out test set.
    pub eval_size: usize,
    pub train_len: RangeInclusive<usize>,
    pub test_len: RangeInclusive<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip: Option<f64>,
    pub loss_on_prefix: bool,
    /// Sample autoregressive outputs instead of taking the argmax.
    pub sample: bool,
}

impl TrainConfig {
    /// Batch 32 for 100k steps on RS/SM, batch 128 for 1M steps on MA/SE,
    /// lr 1e-4, train lengths up to 40 and test lengths 41..100.
    pub fn paper(task: Task) -> Self {
        let (batch, steps) = match task {
            Task::Rs | Task::Sm => (32, 100_000),
            Task::Ma | Task::Se => (128, 1_000_000),
        };
        Self {
            task,
            lr: 1e-4,
            batch,
            steps,
            seed: 0,
            eval_every: 5_000,
            eval_size: 1_000,
            train_len: task.min_len().max(1)..=40,
            test_len: 41..=100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: None,
            loss_on_prefix: false,
            sample: false,
        }
    }

    /// Small profile that trains in minutes on one core: train lengths up
    /// to 8, test lengths 9..16.
    pub fn desk(task: Task) -> Self {
        Self {
            lr: 1e-3,
            batch: 32,
            steps: 3_000,
            eval_every: 500,
            eval_size: 256,
            train_len: task.min_len()..=8,
            test_len: 9..=16,
            ..Self::paper(task)
        }
    }

    pub fn profile(name: &str, task: Task) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(task)),
            "paper" => Ok(Self::paper(task)),
            _ => Err(Error::Config(format!("unknown profile {name:?} (desk|paper)"))),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push("lr");
        }
        if self.batch == 0 {
            problems.push("batch");
        }
        if self.eval_every == 0 {
            problems.push("eval_every");
        }
        if self.eval_size == 0 {
            problems.push("eval_size");
        }
        if *self.train_len.start() < self.task.min_len() {
            problems.push("train_len");
        }
        if self.test_len.start() <= self.train_len.end() {
            problems.push("test_len");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            problems.push("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            problems.push("beta2");
        }
        if !(self.eps > 0.0) {
            problems.push("eps");
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            problems.push("clip");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid settings: {}", problems.join(", "))))
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let range = |r: &RangeInclusive<usize>| format!("{}..{}", r.start(), r.end());
        vec![
            ("task", self.task.to_string()),
            ("lr", self.lr.to_string()),
            ("batch", self.batch.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_size", self.eval_size.to_string()),
            ("train_len", range(&self.train_len)),
            ("test_len", range(&self.test_len)),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("clip", self.clip.map_or("off".into(), |c| c.to_string())),
            ("loss_on_prefix", on_off(self.loss_on_prefix).into()),
            ("sample", on_off(self.sample).into()),
        ]
    }

    /// Applies one `key=value` setting; returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => self.task = value.parse()?,
            "lr" => self.lr = parse_num(key, value)?,
            "batch" => self.batch = parse_num(key, value)?,
            "steps" => self.steps = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "eval_size" => self.eval_size = parse_num(key, value)?,
            "train_len" => self.train_len = parse_length_range(value)?,
            "test_len" => self.test_len = parse_length_range(value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "eps" => self.eps = parse_num(key, value)?,
            "clip" => {
                self.clip = match value.trim() {
                    "off" | "none" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "loss_on_prefix" => self.loss_on_prefix = parse_switch(key, value)?,
            "sample" => self.sample = parse_switch(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk(task: Task) -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(task),
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut out = self.train.to_pairs();
        out.extend(self.model.to_pairs());
        out
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        Ok(self.train.set(key, value)? || self.model.set(key, value)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Flat `key=value` text, one setting per line.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines; `#` starts a comment. Unknown keys are
    /// collected and reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut unknown = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {raw:?}", no + 1)))?;
            if !self.set(k.trim(), v.trim())? {
                unknown.push(k.trim().to_string());
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PeKind;

    #[test]
    fn paper_defaults() {
        let rs = TrainConfig::paper(Task::Rs);
        assert_eq!((rs.lr, rs.batch, rs.steps), (1e-4, 32, 100_000));
        let ma = TrainConfig::paper(Task::Ma);
        assert_eq!((ma.batch, ma.steps), (128, 1_000_000));
        assert_eq!(TrainConfig::desk(Task::Sm).train_len, 2..=8);
        for task in Task::ALL {
            TrainConfig::paper(task).validate().unwrap();
            TrainConfig::desk(task).validate().unwrap();
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::desk(Task::Se);
        cfg.model.pe = PeKind::Alibi;
        cfg.train.clip = Some(1.0);
        cfg.train.seed = 12;
        let mut back = RunConfig::desk(Task::Rs);
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_text_is_reported() {
        let mut cfg = RunConfig::desk(Task::Rs);
        let err = cfg.apply_text("lr=0.1\nfoo=1\n# comment\nbar = 2").unwrap_err().to_string();
        assert!(err.contains("foo") && err.contains("bar"), "{err}");
        assert!(cfg.apply_text("steps").is_err());
        assert!(cfg.apply_text("steps=many").is_err());
        cfg.apply_text("test_len=4..6").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("test_len"));
    }
}
