use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_hand_cases() {
    let mut tape = Tape::<f64>::new();
    let id = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let p = tape.matmul(id, m).unwrap();
    assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let p = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(p).data(), &[11.]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert_eq!(
        err,
        NumericsError::ShapeMismatch {
            op: "matmul",
            left: vec![2, 3],
            right: vec![2, 3]
        }
    );
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
    let report = check_gradients(&inputs, 1e-5, |tape, v| {
        let p = tape.matmul(v[0], v[1])?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
    assert_eq!(report.checked, 20);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0., 0., 0.]));
    let s = tape.softmax(x).unwrap();
    for &p in tape.value(s).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(t(&[3], &[1000., 0., 0.]));
    let s = tape.softmax(x).unwrap();
    let v = tape.value(s).data();
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12 && v[2] < 1e-12);

    let x = tape.constant(t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
    let s = tape.softmax(x).unwrap();
    let v = tape.value(s).data();
    for (got, want) in v.iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
        assert!((got - want).abs() < 1e-15);
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[f64::NAN, 0.]));
    assert_eq!(
        tape.softmax(x).unwrap_err(),
        NumericsError::NonFinite { op: "softmax" }
    );
}

#[test]
fn masked_softmax_rejects_empty_row() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    let err = tape
        .masked_softmax(x, Some(&[true, false, false, false]))
        .unwrap_err();
    assert_eq!(err, NumericsError::EmptyMaskRow { row: 1 });
}

proptest! {
    #[test]
    fn softmax_rows_are_shift_invariant_distributions(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut tape = Tape::<f64>::new();
        let n = row.len();
        let x = tape.constant(t(&[1, n], &row));
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let y = tape.constant(t(&[1, n], &shifted));
        let sx = tape.softmax(x).unwrap();
        let sy = tape.softmax(y).unwrap();
        let total: f64 = tape.value(sx).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(tape.value(sx).data().iter().all(|&p| p >= 0.0));
        prop_assert!(tape.value(sx).max_abs_diff(tape.value(sy)) < 1e-10);
    }
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let g = tape.constant(Tensor::full(&[4], 1.0));
    let b = tape.constant(Tensor::zeros(&[4]));
    let x = tape.constant(Tensor::full(&[1, 4], 3.5));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let g2 = tape.constant(Tensor::full(&[2], 1.0));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[1, 2], &[1., -1.]));
    let y = tape.layer_norm(x, g2, b2, 1e-5).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-4 && (v[1] + 1.0).abs() < 1e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = tape.constant(random(&[5, 4], &mut rng));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    for r in 0..5 {
        let mean: f64 = tape.value(y).row(r).iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-10);
    }
}

#[test]
fn backward_simple_losses() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[5], &[1., -2., 3., 0.5, 7.]));
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[1.; 5]);

    let mut tape = Tape::<f64>::new();
    let vals = [1., -2., 3., 0.5, 7.];
    let w = tape.param(t(&[5], &vals));
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    tape.backward(s).unwrap();
    let want: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
    assert_eq!(tape.grad(w).unwrap().data(), want.as_slice());
}

#[test]
fn backward_accumulates_until_reset() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t(&[2], &[1., 2.]));
    let s = tape.sum(w);
    tape.backward(s).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(w).unwrap().data(), &[2., 2.]);
    tape.zero_grad();
    assert!(tape.grad(w).is_none());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(Tensor::zeros(&[3]));
    assert_eq!(
        tape.backward(w).unwrap_err(),
        NumericsError::NonScalarLoss { shape: vec![3] }
    );
}

#[test]
fn constants_receive_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(t(&[2], &[1., 2.]));
    let w = tape.param(t(&[2], &[3., 4.]));
    let p = tape.mul(c, w).unwrap();
    let s = tape.sum(p);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(w).unwrap().data(), &[1., 2.]);
}

/// Every primitive against central differences on random inputs.
#[test]
fn primitive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    type Case = (
        &'static str,
        Vec<Vec<usize>>,
        f64,
        Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, NumericsError>>,
    );
    let proj = random(&[3, 4], &mut rng);
    let cases: Vec<Case> = vec![
        ("matmul_nt", vec![vec![3, 5], vec![4, 5]], 1e-6, Box::new(|tp, v| {
            let p = tp.matmul_nt(v[0], v[1])?;
            Ok(tp.sum(p))
        })),
        ("transpose", vec![vec![3, 4]], 1e-6, {
            let proj = proj.clone();
            Box::new(move |tp, v| {
                let tr = tp.transpose(v[0])?;
                let tt = tp.transpose(tr)?;
                let c = tp.constant(proj.clone());
                let p = tp.mul(tt, c)?;
                Ok(tp.sum(p))
            })
        }),
        ("add_sub_mul_scale", vec![vec![3, 4], vec![3, 4]], 1e-6, Box::new(|tp, v| {
            let a = tp.add(v[0], v[1])?;
            let b = tp.sub(a, v[1])?;
            let c = tp.mul(b, v[1])?;
            let d = tp.scale(c, 0.7);
            let e = tp.add_scalar(d, 2.0);
            let f = tp.mul(e, e)?;
            Ok(tp.sum(f))
        })),
        ("add_row", vec![vec![3, 4], vec![4]], 1e-6, Box::new(|tp, v| {
            let a = tp.add_row(v[0], v[1])?;
            let sq = tp.mul(a, a)?;
            Ok(tp.sum(sq))
        })),
        ("relu", vec![vec![3, 4]], 1e-6, Box::new(|tp, v| {
            let r = tp.relu(v[0]);
            let sq = tp.mul(r, v[0])?;
            Ok(tp.sum(sq))
        })),
        ("softmax", vec![vec![3, 4], vec![3, 4]], 1e-4, Box::new(|tp, v| {
            let s = tp.softmax(v[0])?;
            let p = tp.mul(s, v[1])?;
            Ok(tp.sum(p))
        })),
        ("masked_softmax", vec![vec![3, 3], vec![3, 3]], 1e-4, Box::new(|tp, v| {
            let mask = [true, false, false, true, true, false, true, true, true];
            let s = tp.masked_softmax(v[0], Some(&mask))?;
            let p = tp.mul(s, v[1])?;
            Ok(tp.sum(p))
        })),
        ("layer_norm", vec![vec![3, 4], vec![4], vec![4], vec![3, 4]], 1e-4, Box::new(|tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let p = tp.mul(y, v[3])?;
            Ok(tp.sum(p))
        })),
        ("gather_rows", vec![vec![4, 3], vec![5, 3]], 1e-6, Box::new(|tp, v| {
            let g = tp.gather_rows(v[0], &[0, 2, 2, 3, 0])?;
            let p = tp.mul(g, v[1])?;
            Ok(tp.sum(p))
        })),
        ("slice_concat", vec![vec![3, 6], vec![3, 6]], 1e-6, Box::new(|tp, v| {
            let a = tp.slice_cols(v[0], 0, 2)?;
            let b = tp.slice_cols(v[0], 2, 4)?;
            let c = tp.concat_cols(&[b, a])?;
            let p = tp.mul(c, v[1])?;
            Ok(tp.sum(p))
        })),
        ("cross_entropy", vec![vec![4, 5]], 1e-4, Box::new(|tp, v| {
            tp.cross_entropy_sum(v[0], &[Some(1), None, Some(4), Some(0)])
        })),
        ("gather_relative", vec![vec![3, 5], vec![3, 3]], 1e-6, Box::new(|tp, v| {
            let g = tp.gather_relative(v[0])?;
            let p = tp.mul(g, v[1])?;
            Ok(tp.sum(p))
        })),
        ("rotate_pairs", vec![vec![2, 4], vec![2, 4]], 1e-6, Box::new(|tp, v| {
            let cos = vec![0.6, 1.0, 0.8, -0.28];
            let sin = vec![0.8, 0.0, 0.6, 0.96];
            let r = tp.rotate_pairs(v[0], cos, sin, 4)?;
            let p = tp.mul(r, v[1])?;
            Ok(tp.sum(p))
        })),
    ];
    for (name, shapes, tol, f) in cases {
        let inputs: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = check_gradients(&inputs, 1e-5, &f).unwrap();
        assert!(report.max_rel_err < tol, "{name}: {report:?}");
    }
}

#[test]
fn rotation_preserves_norm() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 4], &[1., 2., 3., 4.]));
    let th: f64 = 0.3;
    let r = tape
        .rotate_pairs(x, vec![th.cos(), (2.0 * th).cos()], vec![th.sin(), (2.0 * th).sin()], 4)
        .unwrap();
    let n: f64 = tape.value(r).data().iter().map(|v| v * v).sum();
    assert!((n - 30.0).abs() < 1e-12);
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::<f32>::new();
        let a = tape.param(random(&[4, 6], &mut rng).cast());
        let b = tape.param(random(&[6, 3], &mut rng).cast());
        let p = tape.matmul(a, b).unwrap();
        let s = tape.softmax(p).unwrap();
        let l = tape.cross_entropy_sum(s, &[Some(0), Some(1), Some(2), None]).unwrap();
        tape.backward(l).unwrap();
        (tape.value(s).clone(), tape.grad(a).unwrap().clone())
    };
    assert_eq!(run(), run());
}
