//! Randomized verification sweeps shared by the command line and the test
//! suites.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{multi_head_self_attention, AttentionMask, AttentionParams, MultiHeadConfig, PositionBias};
use crate::error::{Error, Result};
use crate::model::{position, transformer_layer, FfnParams, LayerParams, NormParams, PeKind};
use crate::numerics::{check_gradients, GradReport, NumericsError, Tape, Tensor, Var};
use crate::stack::theorems::{check_theorem1, check_theorem2, random_action, random_ops, WORKED_EXAMPLE};
use crate::stack::{stack_attention, stack_sublayer, StackParams};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct TheoremSweep {
    pub theorem1_cases: usize,
    pub theorem1_max_deviation: f64,
    pub theorem2_cases: usize,
    pub theorem2_max_deviation: f64,
    /// First failing case, serialized for reporting.
    pub counterexample: Option<serde_json::Value>,
}

impl TheoremSweep {
    pub fn passed(&self) -> bool {
        self.counterexample.is_none()
    }
}

/// Hard-operation equivalence over the worked example plus `trials` random
/// sequences with `N ≤ max_hard`, and normalization over `trials` random
/// soft sequences with `N ≤ max_soft`.
pub fn verify_theorems(trials: usize, max_hard: usize, max_soft: usize, seed: u64) -> Result<TheoremSweep> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sweep = TheoremSweep {
        theorem1_cases: 0,
        theorem1_max_deviation: 0.0,
        theorem2_cases: 0,
        theorem2_max_deviation: 0.0,
        counterexample: None,
    };
    let hard = std::iter::once(WORKED_EXAMPLE.to_vec())
        .chain((0..trials).map(|_| {
            let n = rng.gen_range(0..=max_hard);
            random_ops(&mut rng, n)
        }))
        .collect::<Vec<_>>();
    for ops in hard {
        let report = check_theorem1(&ops);
        sweep.theorem1_cases += 1;
        sweep.theorem1_max_deviation = sweep.theorem1_max_deviation.max(report.max_deviation);
        if !report.holds && sweep.counterexample.is_none() {
            sweep.counterexample = Some(serde_json::json!({ "theorem": 1, "report": report }));
        }
    }
    for _ in 0..trials {
        let n = rng.gen_range(1..=max_soft);
        let actions: Vec<_> = (0..n).map(|_| random_action(&mut rng)).collect();
        let report = check_theorem2(&actions)?;
        sweep.theorem2_cases += 1;
        sweep.theorem2_max_deviation = sweep.theorem2_max_deviation.max(report.max_deviation);
        if !report.holds && sweep.counterexample.is_none() {
            let a: Vec<[f64; 3]> = actions.iter().map(|a| a.as_array()).collect();
            sweep.counterexample = Some(serde_json::json!({ "theorem": 2, "report": report, "actions": a }));
        }
    }
    Ok(sweep)
}

/// Random shape of one stack-augmented layer used in gradient sweeps.
#[derive(Clone, Debug, Serialize)]
pub struct LayerCase {
    pub positions: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pe: String,
    pub future_mask: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub detail: Option<serde_json::Value>,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

fn num(e: Error) -> NumericsError {
    match e {
        Error::Numerics(n) => n,
        other => panic!("unexpected error in gradient check: {other}"),
    }
}

fn layer_bias(tape: &mut Tape<f64>, case: &LayerCase, pe: PeKind, rel: Option<(Var, Var, Var)>) -> Result<PositionBias<f64>> {
    let t = case.positions;
    let d = case.d_model;
    Ok(match pe {
        PeKind::None | PeKind::Sincos => PositionBias::None,
        PeKind::Rotary => {
            let (cos, sin) = position::rotary_tables(t, d / case.heads);
            PositionBias::Rotary { cos, sin }
        }
        PeKind::Alibi => PositionBias::Additive(
            position::alibi_slopes(case.heads)
                .into_iter()
                .map(|s| Tensor::from_f64(&[t, t], &position::alibi_bias(t, s)))
                .collect::<std::result::Result<_, _>>()?,
        ),
        PeKind::Relative => {
            let (w_r, u, v) = rel.expect("relative parameters");
            let table = tape.constant(Tensor::from_f64(&[2 * t - 1, d], &position::relative_table(t, d))?);
            PositionBias::Relative {
                rel_keys: tape.matmul(table, w_r)?,
                u,
                v,
            }
        }
    })
}

/// Central differences against autodiff through one full transformer
/// layer with its stack sublayer, on a random configuration.
pub fn layer_gradcheck(rng: &mut ChaCha8Rng) -> Result<(LayerCase, GradReport)> {
    let heads = *[1usize, 2].choose(rng).expect("non-empty");
    let dh = *[2usize, 4].choose(rng).expect("non-empty");
    let pe = *PeKind::ALL.choose(rng).expect("non-empty");
    let case = LayerCase {
        positions: rng.gen_range(1..=6),
        d_model: heads * dh,
        heads,
        ffn_dim: rng.gen_range(2..=8),
        pe: pe.to_string(),
        future_mask: rng.gen_bool(0.5),
    };
    let (t, d, f) = (case.positions, case.d_model, case.ffn_dim);
    let mut inputs = vec![random_tensor(rng, &[t, d], 1.0)];
    for shape in [[d, d], [d, d], [d, d], [d, d]] {
        inputs.push(random_tensor(rng, &shape, 0.8));
    }
    inputs.push(random_tensor(rng, &[d], 0.5).map(|x| 1.0 + x));
    inputs.push(random_tensor(rng, &[d], 0.5));
    inputs.push(random_tensor(rng, &[d, f], 0.8));
    inputs.push(random_tensor(rng, &[f], 0.5));
    inputs.push(random_tensor(rng, &[f, d], 0.8));
    inputs.push(random_tensor(rng, &[d], 0.5));
    inputs.push(random_tensor(rng, &[d], 0.5).map(|x| 1.0 + x));
    inputs.push(random_tensor(rng, &[d], 0.5));
    inputs.push(random_tensor(rng, &[d, 3], 1.0));
    inputs.push(random_tensor(rng, &[3], 1.0));
    if pe == PeKind::Relative {
        inputs.push(random_tensor(rng, &[d, d], 0.8));
        inputs.push(random_tensor(rng, &[d], 0.5));
        inputs.push(random_tensor(rng, &[d], 0.5));
    }
    if pe == PeKind::Sincos {
        let table = Tensor::from_f64(&[t, d], &position::sincos_table(t, d))?;
        inputs[0].add_assign(&table);
    }
    let probe = random_tensor(rng, &[t, d], 1.0);
    let cfg = MultiHeadConfig::new(d, heads)?;
    let mask = case.future_mask.then(|| AttentionMask::future_with_bos(t));
    let report = check_gradients(&inputs, GRAD_STEP, |tape, v| {
        let p = LayerParams {
            attn: AttentionParams {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
            },
            ln1: NormParams { gain: v[5], bias: v[6] },
            ffn: FfnParams {
                w1: v[7],
                b1: v[8],
                w2: v[9],
                b2: v[10],
            },
            ln2: NormParams { gain: v[11], bias: v[12] },
            stack: Some(StackParams { w_a: v[13], b_a: v[14] }),
            relative: None,
        };
        let rel = (pe == PeKind::Relative).then(|| (v[15], v[16], v[17]));
        let bias = layer_bias(tape, &case, pe, rel).map_err(num)?;
        let out = transformer_layer(tape, v[0], &p, &cfg, mask.as_ref(), &bias).map_err(num)?;
        let w = tape.constant(probe.clone());
        let prod = tape.mul(out.output, w)?;
        Ok(tape.sum(prod))
    })?;
    Ok((case, report))
}

fn case(name: &str, report: GradReport, detail: Option<serde_json::Value>) -> GradCase {
    GradCase {
        name: name.to_string(),
        max_rel_err: report.max_rel_err,
        checked: report.checked,
        detail,
    }
}

/// Gradient checks for the building blocks and `trials` random full
/// layers.
pub fn gradcheck_suite(trials: usize, seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let a = random_tensor(&mut rng, &[3, 4], 1.0);
    let b = random_tensor(&mut rng, &[4, 2], 1.0);
    out.push(case(
        "matmul",
        check_gradients(&[a, b], GRAD_STEP, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            Ok(t.sum(m))
        })?,
        None,
    ));

    let x = random_tensor(&mut rng, &[3, 5], 2.0);
    let probe = random_tensor(&mut rng, &[3, 5], 1.0);
    out.push(case(
        "softmax",
        check_gradients(&[x.clone()], GRAD_STEP, |t, v| {
            let s = t.softmax(v[0])?;
            let w = t.constant(probe.clone());
            let p = t.mul(s, w)?;
            Ok(t.sum(p))
        })?,
        None,
    ));

    let g = random_tensor(&mut rng, &[5], 1.0);
    let bias = random_tensor(&mut rng, &[5], 1.0);
    out.push(case(
        "layer_norm",
        check_gradients(&[x.clone(), g, bias], GRAD_STEP, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let w = t.constant(probe.clone());
            let p = t.mul(y, w)?;
            Ok(t.sum(p))
        })?,
        None,
    ));

    out.push(case(
        "cross_entropy",
        check_gradients(&[x], GRAD_STEP, |t, v| t.cross_entropy_sum(v[0], &[Some(1), None, Some(4)]))?,
        None,
    ));

    let h = random_tensor(&mut rng, &[5, 4], 1.0);
    let ws: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[4, 4], 0.8)).collect();
    let probe = random_tensor(&mut rng, &[5, 4], 1.0);
    let mut inputs = vec![h.clone()];
    inputs.extend(ws);
    out.push(case(
        "multi_head_attention",
        check_gradients(&inputs, GRAD_STEP, |t, v| {
            let cfg = MultiHeadConfig { d_model: 4, heads: 2 };
            let params = AttentionParams {
                wq: v[1],
                wk: v[2],
                wv: v[3],
                wo: v[4],
            };
            let mask = AttentionMask::future_with_bos(5);
            let o = multi_head_self_attention(t, v[0], &params, &cfg, Some(&mask), &PositionBias::None).map_err(num)?;
            let w = t.constant(probe.clone());
            let p = t.mul(o.output, w)?;
            Ok(t.sum(p))
        })?,
        None,
    ));

    let logits = random_tensor(&mut rng, &[7, 3], 2.0);
    let probe7 = random_tensor(&mut rng, &[7, 7], 1.0);
    out.push(case(
        "stack_attention",
        check_gradients(&[logits], GRAD_STEP, |t, v| {
            let a = t.softmax(v[0])?;
            let alphas = stack_attention(t, a).map_err(num)?;
            let w = t.constant(probe7.clone());
            let p = t.mul(alphas, w)?;
            Ok(t.sum(p))
        })?,
        None,
    ));

    let w_a = random_tensor(&mut rng, &[4, 3], 1.0);
    let b_a = random_tensor(&mut rng, &[3], 1.0);
    out.push(case(
        "stack_sublayer",
        check_gradients(&[h, w_a, b_a], GRAD_STEP, |t, v| {
            let s = stack_sublayer(t, v[0], &StackParams { w_a: v[1], b_a: v[2] }).map_err(num)?;
            let w = t.constant(probe.clone());
            let p = t.mul(s.output, w)?;
            Ok(t.sum(p))
        })?,
        None,
    ));

    for k in 0..trials {
        let (c, report) = layer_gradcheck(&mut rng)?;
        out.push(case(
            &format!("transformer_layer[{k}]"),
            report,
            Some(serde_json::to_value(c).expect("serializable")),
        ));
    }
    Ok(out)
}
