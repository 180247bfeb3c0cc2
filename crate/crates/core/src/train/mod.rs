//! Online training with Adam, evaluation on held-out longer inputs, and run
//! records.

mod adam;
mod config;
mod record;

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use adam::{Adam, AdamConfig};
pub use config::{RunConfig, TrainConfig};
pub use record::{summary_table, EvalPoint, RunRecord, SeedSummary};

use crate::error::{Error, Result};
use crate::model::{Mode, Model};
use crate::numerics::{Real, Tape, Tensor};
use crate::tasks::{
    generate_dataset, generate_instance, make_alm_episode, make_mlm_input, mean_accuracy, score, Score, Split,
    TaskInstance,
};

/// Model input with the output class supervised at each row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Example {
    pub fn target_count(&self) -> usize {
        self.targets.iter().flatten().count()
    }
}

pub fn training_example(model: &Model, inst: &TaskInstance, loss_on_prefix: bool) -> Result<Example> {
    let vocab = model.vocab();
    let (tokens, ids) = match model.config().mode {
        Mode::Mlm => {
            let ex = make_mlm_input(inst, vocab)?;
            (ex.tokens, ex.targets)
        }
        Mode::Alm => make_alm_episode(inst, vocab)?.teacher_forced(loss_on_prefix),
    };
    let targets = ids
        .into_iter()
        .map(|t| {
            t.map(|id| {
                model
                    .class_of(id)
                    .ok_or_else(|| Error::Task(format!("target {:?} is not an output class", vocab.symbol(id))))
            })
            .transpose()
        })
        .collect::<Result<_>>()?;
    Ok(Example { tokens, targets })
}

/// Summed cross-entropy of one example and its gradient for every parameter.
pub fn example_gradient(model: &Model, ex: &Example) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let trace = model.forward(&mut tape, &vars, &ex.tokens)?;
    let loss = tape.cross_entropy_sum(trace.logits, &ex.targets)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item() as f64;
    let grads = vars
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, grads))
}

/// Mean per-token loss and gradient over a batch. Examples may run on any
/// number of workers; the reduction always follows batch order.
pub fn batch_gradient(model: &Model, batch: &[Example]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let parts: Vec<Result<(f64, Vec<Tensor<f32>>)>> = batch.par_iter().map(|ex| example_gradient(model, ex)).collect();
    let count: usize = batch.iter().map(Example::target_count).sum();
    if count == 0 {
        return Err(Error::Task("batch has no supervised positions".into()));
    }
    let mut total = 0.0;
    let mut grads: Vec<Tensor<f32>> = model.params().tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for part in parts {
        let (loss, g) = part?;
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    let scale = 1.0 / count as f32;
    for g in &mut grads {
        g.scale_assign(scale);
    }
    Ok((total / count as f64, grads))
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
pub fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.scale_assign(s));
    }
    norm
}

/// Output decoding rule.
#[derive(Debug)]
pub enum Decode {
    Greedy,
    Sample(ChaCha8Rng),
}

fn pick<F: Real>(logits: &[F], allowed: &[usize], decode: &mut Decode) -> usize {
    match decode {
        Decode::Greedy => {
            let mut best = allowed[0];
            for &c in &allowed[1..] {
                if logits[c] > logits[best] {
                    best = c;
                }
            }
            best
        }
        Decode::Sample(rng) => {
            let max = allowed.iter().map(|&c| logits[c].f64()).fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = allowed.iter().map(|&c| (logits[c].f64() - max).exp()).collect();
            let mut u = rng.gen::<f64>() * weights.iter().sum::<f64>();
            for (&c, w) in allowed.iter().zip(&weights) {
                if u < *w {
                    return c;
                }
                u -= w;
            }
            *allowed.last().expect("non-empty output alphabet")
        }
    }
}

/// Output classes a task may emit.
pub fn output_classes(model: &Model, inst: &TaskInstance) -> Result<Vec<usize>> {
    inst.task
        .output_alphabet()
        .iter()
        .map(|s| {
            let id = model.vocab().id(s)?;
            model
                .class_of(id)
                .ok_or_else(|| Error::Task(format!("{s} has no output class")))
        })
        .collect()
}

/// Predicts exactly `|y|` output symbols: one forward pass at the mask
/// rows for masked models, or `|y|` decoding steps for autoregressive ones.
pub fn predict(model: &Model, inst: &TaskInstance, decode: &mut Decode) -> Result<Vec<String>> {
    let allowed = output_classes(model, inst)?;
    let ids = model.output_ids();
    let classes = match model.config().mode {
        Mode::Mlm => {
            let ex = make_mlm_input(inst, model.vocab())?;
            let mut tape = Tape::<f32>::new();
            let vars = model.bind(&mut tape);
            let trace = model.forward(&mut tape, &vars, &ex.tokens)?;
            let logits = tape.value(trace.logits);
            ex.mask_rows().map(|r| pick(logits.row(r), &allowed, decode)).collect::<Vec<_>>()
        }
        Mode::Alm => {
            let ep = make_alm_episode(inst, model.vocab())?;
            let mut tokens = ep.prefix;
            let mut out = Vec::with_capacity(ep.continuation.len());
            for _ in 0..ep.continuation.len() {
                let mut tape = Tape::<f32>::new();
                let vars = model.bind(&mut tape);
                let next = model.alm_logits(&mut tape, &vars, &tokens)?;
                let c = pick(tape.value(next).data(), &allowed, decode);
                out.push(c);
                tokens.push(ids[c]);
            }
            out
        }
    };
    Ok(classes
        .into_iter()
        .map(|c| model.vocab().symbol(ids[c]).unwrap_or("[?]").to_string())
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub scores: Vec<Score>,
}

/// Mean per-token accuracy. With `sample_seed`, autoregressive outputs are
/// sampled from a per-instance stream.
pub fn evaluate(model: &Model, data: &[TaskInstance], sample_seed: Option<u64>) -> Result<EvalReport> {
    let scores = data
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut decode = match sample_seed {
                Some(seed) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(i as u64);
                    Decode::Sample(rng)
                }
                None => Decode::Greedy,
            };
            let pred = predict(model, inst, &mut decode)?;
            score(&pred, &inst.y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        accuracy: mean_accuracy(&scores),
        scores,
    })
}

pub struct TrainOutcome {
    pub model: Model,
    pub record: RunRecord,
}

fn check_split(cfg: &TrainConfig, inst: &TaskInstance) -> Result<()> {
    let n = inst.x.len();
    if !cfg.train_len.contains(&n) || cfg.test_len.contains(&n) {
        return Err(Error::Task(format!(
            "training instance of length {n} outside the train range {:?} (test range {:?})",
            cfg.train_len, cfg.test_len
        )));
    }
    Ok(())
}

/// The fixed held-out set a run evaluates on.
pub fn test_set(cfg: &TrainConfig) -> Result<Vec<TaskInstance>> {
    generate_dataset(cfg.task, &cfg.test_len, cfg.eval_size, cfg.seed, Split::Test)
}

/// Trains a fresh model. A non-finite loss or gradient ends the run early
/// with `record.diverged` set.
pub fn train_loop(cfg: &RunConfig, mut on_eval: impl FnMut(&EvalPoint)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let mut model = Model::new(cfg.model, tc.task.vocabulary(), tc.seed)?;
    let test = test_set(tc)?;
    let sample_seed = tc.sample.then_some(tc.seed);
    let mut adam = Adam::new(tc.adam(), model.params().tensors());
    let start = Instant::now();
    let mut record = RunRecord {
        task: tc.task.to_string(),
        stack: cfg.model.stack,
        seed: tc.seed,
        points: Vec::new(),
        losses: Vec::with_capacity(tc.steps),
        diverged: None,
    };
    let mut eval_point = |model: &Model, step: usize, losses: &[f64]| -> Result<EvalPoint> {
        let recent = &losses[losses.len().saturating_sub(tc.eval_every)..];
        let p = EvalPoint {
            step,
            train_loss: if recent.is_empty() {
                f64::NAN
            } else {
                recent.iter().sum::<f64>() / recent.len() as f64
            },
            test_accuracy: evaluate(model, &test, sample_seed)?.accuracy,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        on_eval(&p);
        Ok(p)
    };
    record.points.push(eval_point(&model, 0, &[])?);

    for step in 0..tc.steps {
        let batch = (0..tc.batch)
            .map(|b| {
                let inst = generate_instance(tc.task, &tc.train_len, tc.seed, Split::Train, (step * tc.batch + b) as u64)?;
                check_split(tc, &inst)?;
                training_example(&model, &inst, tc.loss_on_prefix)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, mut grads) = match batch_gradient(&model, &batch) {
            Ok(r) => r,
            Err(Error::Numerics(e)) => {
                record.diverged = Some(format!("step {}: {e}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            record.diverged = Some(format!("step {}: loss is {loss}", step + 1));
            break;
        }
        if let Some(c) = tc.clip {
            clip_gradients(&mut grads, c);
        }
        match adam.step(model.params_mut().tensors_mut(), &grads) {
            Ok(()) => {}
            Err(Error::Diverged { detail, .. }) => {
                record.diverged = Some(format!("step {}: {detail}", step + 1));
                break;
            }
            Err(e) => return Err(e),
        }
        record.losses.push(loss);
        let done = step + 1;
        if done % tc.eval_every == 0 || done == tc.steps {
            record.points.push(eval_point(&model, done, &record.losses)?);
        }
    }
    Ok(TrainOutcome { model, record })
}
