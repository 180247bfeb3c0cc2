//! Scaled dot-product multi-head self-attention with boolean masks.
//!
//! Hidden states are stored one position per row, so a sequence of `T`
//! positions with width `D` is a `T×D` tensor.

use crate::error::{Error, Result};
use crate::numerics::{kernels, NumericsError, Real, Tape, Tensor, Var};

/// `T×T` boolean mask; entry `(i, n)` is true when position `i` may attend
/// to position `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Rejects masks with an all-false row.
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_mask",
                left: vec![size, size],
                right: vec![allowed.len()],
            }
            .into());
        }
        if let Some(row) = (0..size).find(|&i| !allowed[i * size..(i + 1) * size].iter().any(|&b| b)) {
            return Err(NumericsError::EmptyMaskRow { row }.into());
        }
        Ok(Self { size, allowed })
    }

    pub fn full(size: usize) -> Self {
        Self {
            size,
            allowed: vec![true; size * size],
        }
    }

    /// Strict future mask: `i` sees `n` iff `n < i`. Row 0 is empty, so this
    /// is an error for every size.
    pub fn strict_future(size: usize) -> Result<Self> {
        Self::new(size, (0..size * size).map(|k| k % size < k / size).collect())
    }

    /// Strict future mask where the [BOS] row (position 0) may see itself.
    pub fn future_with_bos(size: usize) -> Self {
        let mut allowed: Vec<bool> = (0..size * size).map(|k| k % size < k / size).collect();
        if size > 0 {
            allowed[0] = true;
        }
        Self { size, allowed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allows(&self, i: usize, n: usize) -> bool {
        self.allowed[i * self.size + n]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl MultiHeadConfig {
    pub fn new(d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model={d_model} is not divisible by heads={heads}"
            )));
        }
        Ok(Self { d_model, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `(q·k)/sqrt(len)`.
pub fn compatibility<F: Real>(q: &[F], k: &[F]) -> Result<F> {
    if q.len() != k.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "compatibility",
            left: vec![q.len()],
            right: vec![k.len()],
        }
        .into());
    }
    Ok(kernels::dot(q, k) / F::c(q.len() as f64).sqrt())
}

/// Row-wise softmax of `scores` restricted to the mask support.
pub fn masked_attention_weights<F: Real>(
    tape: &mut Tape<F>,
    scores: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    Ok(tape.masked_softmax(scores, mask.map(AttentionMask::as_slice))?)
}

/// Projection weights, each `D×D` and applied as `H·W`. Head `m` owns
/// columns `m·D′..(m+1)·D′` of the query/key/value projections and rows
/// `m·D′..(m+1)·D′` of the output projection.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Position information injected inside the attention block.
pub enum PositionBias<F: Real> {
    None,
    /// Per-position rotation of query/key pairs; tables are `T × D′/2`.
    Rotary { cos: Vec<F>, sin: Vec<F> },
    /// One `T×T` additive score bias per head.
    Additive(Vec<Tensor<F>>),
    /// Transformer-XL style relative scores. `rel_keys` is the projected
    /// sinusoid table `(2T−1)×D` indexed by `i − j + T − 1`; `u` and `v`
    /// are the global content and position biases, each `[D]`.
    Relative { rel_keys: Var, u: Var, v: Var },
}

pub struct AttentionOutput {
    pub output: Var,
    /// Per-head `T×T` attention weights.
    pub weights: Vec<Var>,
}

pub fn multi_head_self_attention<F: Real>(
    tape: &mut Tape<F>,
    h: Var,
    params: &AttentionParams,
    cfg: &MultiHeadConfig,
    mask: Option<&AttentionMask>,
    position: &PositionBias<F>,
) -> Result<AttentionOutput> {
    let (t, d) = tape.value(h).dims2("multi_head_self_attention")?;
    if d != cfg.d_model {
        return Err(NumericsError::ShapeMismatch {
            op: "multi_head_self_attention",
            left: vec![t, d],
            right: vec![t, cfg.d_model],
        }
        .into());
    }
    if let Some(m) = mask {
        if m.size() != t {
            return Err(NumericsError::ShapeMismatch {
                op: "attention_mask",
                left: vec![m.size(), m.size()],
                right: vec![t, t],
            }
            .into());
        }
    }
    let dh = cfg.head_dim();
    let inv_sqrt = F::one() / F::c(dh as f64).sqrt();

    let mut q = tape.matmul(h, params.wq)?;
    let mut k = tape.matmul(h, params.wk)?;
    let v = tape.matmul(h, params.wv)?;
    if let PositionBias::Rotary { cos, sin } = position {
        q = tape.rotate_pairs(q, cos.clone(), sin.clone(), dh)?;
        k = tape.rotate_pairs(k, cos.clone(), sin.clone(), dh)?;
    }
    let relative = match position {
        PositionBias::Relative { rel_keys, u, v } => {
            Some((tape.add_row(q, *u)?, tape.add_row(q, *v)?, *rel_keys))
        }
        _ => None,
    };

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for m in 0..cfg.heads {
        let off = m * dh;
        let kh = tape.slice_cols(k, off, dh)?;
        let vh = tape.slice_cols(v, off, dh)?;
        let raw = match &relative {
            Some((qu, qv, rel)) => {
                let quh = tape.slice_cols(*qu, off, dh)?;
                let qvh = tape.slice_cols(*qv, off, dh)?;
                let relh = tape.slice_cols(*rel, off, dh)?;
                let content = tape.matmul_nt(quh, kh)?;
                let by_dist = tape.matmul_nt(qvh, relh)?;
                let pos = tape.gather_relative(by_dist)?;
                tape.add(content, pos)?
            }
            None => {
                let qh = tape.slice_cols(q, off, dh)?;
                tape.matmul_nt(qh, kh)?
            }
        };
        let mut scores = tape.scale(raw, inv_sqrt);
        if let PositionBias::Additive(bias) = position {
            scores = tape.add_const(scores, &bias[m])?;
        }
        let w = masked_attention_weights(tape, scores, mask)?;
        heads.push(tape.matmul(w, vh)?);
        weights.push(w);
    }
    let joined = tape.concat_cols(&heads)?;
    let output = tape.matmul(joined, params.wo)?;
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    struct Setup {
        tape: Tape<f64>,
        params: AttentionParams,
        cfg: MultiHeadConfig,
    }

    fn setup(d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Setup {
        let mut tape = Tape::new();
        let params = AttentionParams {
            wq: tape.constant(random(&[d, d], rng)),
            wk: tape.constant(random(&[d, d], rng)),
            wv: tape.constant(random(&[d, d], rng)),
            wo: tape.constant(random(&[d, d], rng)),
        };
        Setup {
            tape,
            params,
            cfg: MultiHeadConfig::new(d, heads).unwrap(),
        }
    }

    #[test]
    fn compatibility_examples() {
        assert_eq!(compatibility(&[0.0; 4], &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(
            compatibility(&[1.0, 0.0, 0.0, 0.0], &[2.0, 0.0, 0.0, 0.0]).unwrap(),
            1.0
        );
        let q = [0.3, -1.2, 2.0];
        let k = [1.5, 0.25, -0.75];
        assert_eq!(compatibility(&q, &k).unwrap(), compatibility(&k, &q).unwrap());
        assert!(compatibility(&q, &k[..2]).is_err());
    }

    #[test]
    fn head_config_requires_divisibility() {
        assert_eq!(MultiHeadConfig::new(64, 8).unwrap().head_dim(), 8);
        assert!(MultiHeadConfig::new(30, 4).is_err());
    }

    #[test]
    fn masked_weights_examples() {
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(Tensor::zeros(&[3, 3]));
        let mask = AttentionMask::new(
            3,
            vec![true, true, false, true, true, false, true, true, false],
        )
        .unwrap();
        let w = masked_attention_weights(&mut tape, e, Some(&mask)).unwrap();
        assert_eq!(tape.value(w).row(0), &[0.5, 0.5, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = tape.constant(random(&[4, 4], &mut rng));
        let full = masked_attention_weights(&mut tape, e, Some(&AttentionMask::full(4))).unwrap();
        let plain = tape.softmax(e).unwrap();
        assert_eq!(tape.value(full), tape.value(plain));

        let e = tape.constant(Tensor::zeros(&[5, 5]));
        let fm = AttentionMask::future_with_bos(5);
        let w = masked_attention_weights(&mut tape, e, Some(&fm)).unwrap();
        let row = tape.value(w).row(3);
        for (got, want) in row.iter().zip([1. / 3., 1. / 3., 1. / 3., 0., 0.]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn strict_future_mask_has_empty_first_row() {
        assert!(matches!(
            AttentionMask::strict_future(4),
            Err(Error::Numerics(NumericsError::EmptyMaskRow { row: 0 }))
        ));
        let m = AttentionMask::future_with_bos(4);
        for i in 1..4 {
            for n in 0..4 {
                assert_eq!(m.allows(i, n), n < i);
            }
        }
        assert!(m.allows(0, 0));
    }

    #[test]
    fn multiplicative_mask_agrees_with_additive_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::<f64>::new();
        let n = 6;
        let scores = random(&[n, n], &mut rng);
        let mask = AttentionMask::future_with_bos(n);
        let e = tape.constant(scores.clone());
        let w = masked_attention_weights(&mut tape, e, Some(&mask)).unwrap();
        let mut additive = scores;
        for i in 0..n {
            for j in 0..n {
                if !mask.allows(i, j) {
                    additive.data_mut()[i * n + j] = -1e30;
                }
            }
        }
        let a = tape.constant(additive);
        let wa = tape.softmax(a).unwrap();
        assert!(tape.value(w).max_abs_diff(tape.value(wa)) < 1e-6);
    }

    #[test]
    fn single_position_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let Setup {
            mut tape,
            params,
            cfg,
        } = setup(4, 2, &mut rng);
        let h = tape.constant(random(&[1, 4], &mut rng));
        let out = multi_head_self_attention(&mut tape, h, &params, &cfg, None, &PositionBias::None)
            .unwrap();
        let hv = tape.matmul(h, params.wv).unwrap();
        let want = tape.matmul(hv, params.wo).unwrap();
        assert!(tape.value(out.output).max_abs_diff(tape.value(want)) < 1e-12);
    }

    #[test]
    fn unmasked_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let Setup {
            mut tape,
            params,
            cfg,
        } = setup(8, 2, &mut rng);
        let hm = random(&[5, 8], &mut rng);
        let perm = [3, 0, 4, 1, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| hm.row(p).to_vec()).collect();
        let hp = Tensor::from_rows(&rows).unwrap();
        let h = tape.constant(hm);
        let hp = tape.constant(hp);
        let a = multi_head_self_attention(&mut tape, h, &params, &cfg, None, &PositionBias::None)
            .unwrap();
        let b = multi_head_self_attention(&mut tape, hp, &params, &cfg, None, &PositionBias::None)
            .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            let (x, y) = (tape.value(b.output).row(i), tape.value(a.output).row(p));
            for (u, w) in x.iter().zip(y) {
                assert!((u - w).abs() < 1e-12);
            }
        }
    }

    /// Two positions, one head, D = 2, evaluated directly from the formulas.
    #[test]
    fn two_position_hand_case() {
        let mut tape = Tape::<f64>::new();
        let eye = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let wv = Tensor::from_f64(&[2, 2], &[2., 0., 0., 1.]).unwrap();
        let params = AttentionParams {
            wq: tape.constant(eye.clone()),
            wk: tape.constant(eye.clone()),
            wv: tape.constant(wv),
            wo: tape.constant(eye),
        };
        let cfg = MultiHeadConfig::new(2, 1).unwrap();
        let h = tape.constant(Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap());
        let out = multi_head_self_attention(&mut tape, h, &params, &cfg, None, &PositionBias::None)
            .unwrap();
        // e = I / sqrt(2); row 0 weights [s, 1-s] with s = e^{1/√2}/(e^{1/√2}+1).
        let s = (0.5f64.sqrt()).exp() / ((0.5f64.sqrt()).exp() + 1.0);
        let want = [2.0 * s, 1.0 - s, 2.0 * (1.0 - s), s];
        for (got, w) in tape.value(out.output).data().iter().zip(want) {
            assert!((got - w).abs() < 1e-14);
        }
    }

    #[test]
    fn future_masked_attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let Setup {
            mut tape,
            params,
            cfg,
        } = setup(8, 4, &mut rng);
        let n = 6;
        let mask = AttentionMask::future_with_bos(n);
        let base = random(&[n, 8], &mut rng);
        let mut changed = base.clone();
        for j in 0..8 {
            changed.data_mut()[4 * 8 + j] += 1.0;
            changed.data_mut()[5 * 8 + j] -= 2.0;
        }
        let a = tape.constant(base);
        let b = tape.constant(changed);
        let oa = multi_head_self_attention(&mut tape, a, &params, &cfg, Some(&mask), &PositionBias::None)
            .unwrap();
        let ob = multi_head_self_attention(&mut tape, b, &params, &cfg, Some(&mask), &PositionBias::None)
            .unwrap();
        // The query at i comes from h_i itself, so rows strictly before the
        // first perturbed position are the ones that must not move.
        for i in 0..4 {
            assert_eq!(tape.value(oa.output).row(i), tape.value(ob.output).row(i), "row {i}");
        }
    }

    #[test]
    fn attention_rows_are_distributions_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut tape = Tape::<f32>::new();
        let d = 8;
        let mk = |rng: &mut ChaCha8Rng, tape: &mut Tape<f32>| tape.constant(random(&[d, d], rng).cast());
        let params = AttentionParams {
            wq: mk(&mut rng, &mut tape),
            wk: mk(&mut rng, &mut tape),
            wv: mk(&mut rng, &mut tape),
            wo: mk(&mut rng, &mut tape),
        };
        let cfg = MultiHeadConfig::new(d, 2).unwrap();
        let h = tape.constant(random(&[7, d], &mut rng).cast());
        let out = multi_head_self_attention(&mut tape, h, &params, &cfg, None, &PositionBias::None)
            .unwrap();
        for w in out.weights {
            for r in 0..7 {
                let s: f32 = tape.value(w).row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(tape.value(w).row(r).iter().all(|&p| p >= 0.0));
            }
        }
    }
}
