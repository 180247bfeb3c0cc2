use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{check_gradients, Tape};

fn vocab() -> Vocabulary {
    Vocabulary::new(&["a", "b"]).unwrap()
}

fn tiny(pe: PeKind, stack: bool, mode: Mode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        ffn_dim: 12,
        pe,
        stack,
        mode,
    }
}

fn random_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    std::iter::once(BOS).chain((0..n).map(|_| rng.gen_range(4..6))).collect()
}

fn run(model: &Model, tokens: &[usize]) -> (Tape<f64>, ForwardTrace) {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let trace = model.forward(&mut tape, &vars, tokens).unwrap();
    (tape, trace)
}

#[test]
fn config_validation() {
    assert!(ModelConfig::paper().validate().is_ok());
    assert!(ModelConfig::desk().validate().is_ok());
    let mut c = ModelConfig::desk();
    c.heads = 5;
    assert!(c.validate().is_err());
    c.heads = 16;
    c.pe = PeKind::Rotary;
    c.validate().unwrap();
    c.heads = 32;
    assert!(c.validate().is_err());
}

#[test]
fn config_pairs_round_trip() {
    let c = tiny(PeKind::Alibi, false, Mode::Alm);
    let mut back = ModelConfig::paper();
    for (k, v) in c.to_pairs() {
        assert!(back.set(k, &v).unwrap());
    }
    assert_eq!(back, c);
    assert!(!back.set("lr", "1").unwrap());
    assert!(back.set("stack", "maybe").is_err());
}

#[test]
fn embed_without_pe_is_a_gather() {
    let model = Model::new(tiny(PeKind::None, true, Mode::Mlm), vocab(), 1).unwrap();
    let (tape, trace) = run(&model, &[0, 4, 5, 2]);
    let table = model.params().get("embed").unwrap();
    let h = tape.value(trace.embedding);
    for (row, id) in [0usize, 4, 5, 2].into_iter().enumerate() {
        let want: Vec<f64> = table.row(id).iter().map(|&x| x as f64).collect();
        assert_eq!(h.row(row), want.as_slice());
    }
}

#[test]
fn sincos_breaks_permutation_symmetry() {
    let model = Model::new(tiny(PeKind::Sincos, false, Mode::Mlm), vocab(), 1).unwrap();
    let (ta, a) = run(&model, &[0, 4, 5, 5]);
    let (tb, b) = run(&model, &[0, 5, 4, 5]);
    // Token `a` moves from position 1 to 2; without PE the rows would match.
    let moved: f64 = ta.value(a.embedding).row(1).iter().zip(tb.value(b.embedding).row(2)).map(|(x, y)| (x - y).abs()).sum();
    assert!(moved > 0.1);
    let table = model.params().get("embed").unwrap();
    let h = ta.value(a.embedding);
    let want = table.row(4)[1] as f64 + 1f64.cos();
    assert!((h.at(1, 1) - want).abs() < 1e-12);
}

#[test]
fn no_pe_model_is_permutation_equivariant() {
    let model = Model::new(tiny(PeKind::None, false, Mode::Mlm), vocab(), 3).unwrap();
    let tokens = [0, 4, 5, 5, 2, 4];
    let perm = [0, 3, 1, 5, 2, 4];
    let permuted: Vec<usize> = perm.iter().map(|&p| tokens[p]).collect();
    let (ta, a) = run(&model, &tokens);
    let (tb, b) = run(&model, &permuted);
    for (row, &src) in perm.iter().enumerate() {
        for (x, y) in ta.value(a.logits).row(src).iter().zip(tb.value(b.logits).row(row)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_head_gives_uniform_predictions() {
    let mut model = Model::new(tiny(PeKind::None, true, Mode::Mlm), vocab(), 1).unwrap();
    let w = model.params_mut().get_mut("out.w").unwrap();
    w.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let mut tape = Tape::<f32>::new();
    let vars = model.bind(&mut tape);
    let logits = model.mlm_logits(&mut tape, &vars, &[0, 4, 2, 2]).unwrap();
    assert_eq!(tape.value(logits).shape(), &[3, 3]);
    let probs = tape.softmax(logits).unwrap();
    for p in tape.value(probs).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn output_rows_are_distributions() {
    for pe in PeKind::ALL {
        let model = Model::new(tiny(pe, true, Mode::Alm), vocab(), 9).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = model.bind(&mut tape);
        let trace = model.forward(&mut tape, &vars, &[0, 4, 5, 4, 4]).unwrap();
        let probs = tape.softmax(trace.logits).unwrap();
        let p = tape.value(probs);
        for i in 0..p.rows() {
            assert!((p.row(i).iter().sum::<f32>() - 1.0).abs() < 1e-5, "{pe}");
        }
    }
}

#[test]
fn head_entry_points_check_their_inputs() {
    let mlm = Model::new(tiny(PeKind::None, true, Mode::Mlm), vocab(), 1).unwrap();
    let alm = Model::new(tiny(PeKind::None, true, Mode::Alm), vocab(), 1).unwrap();
    let mut tape = Tape::<f32>::new();
    let vars = mlm.bind(&mut tape);
    assert!(matches!(mlm.mlm_logits(&mut tape, &vars, &[0, 4, 5]), Err(Error::Task(_))));
    assert!(mlm.forward(&mut tape, &vars, &[4, 5]).is_err());
    assert!(mlm.forward(&mut tape, &vars, &[0, 99]).is_err());
    assert!(mlm.alm_logits(&mut tape, &vars, &[0, 4]).is_err());
    let mut tape = Tape::<f32>::new();
    let vars = alm.bind(&mut tape);
    assert!(alm.alm_logits(&mut tape, &vars, &[]).is_err());
    let next = alm.alm_logits(&mut tape, &vars, &[0, 4, 5]).unwrap();
    assert_eq!(tape.value(next).shape(), &[1, 3]);
}

#[test]
fn forced_noop_stack_adds_bos_row() {
    let mut cfg = tiny(PeKind::None, true, Mode::Mlm);
    cfg.layers = 1;
    let mut model = Model::new(cfg, vocab(), 5).unwrap();
    model.params_mut().get_mut("layer0.stack.w_a").unwrap().data_mut().fill(0.0);
    let b = model.params_mut().get_mut("layer0.stack.b_a").unwrap();
    b.data_mut().copy_from_slice(&[-40.0, -40.0, 40.0]);
    let (tape, trace) = run(&model, &[0, 4, 5, 2, 2]);
    let layer = &trace.layers[0];
    let hf = tape.value(layer.ffn_output);
    let out = tape.value(layer.output);
    for i in 0..5 {
        for j in 0..8 {
            assert!((out.at(i, j) - (hf.at(i, j) + hf.at(0, j))).abs() < 1e-12);
        }
    }
}

#[test]
fn stack_off_layer_matches_stack_model_without_readout() {
    let mut cfg = tiny(PeKind::Rotary, true, Mode::Alm);
    cfg.layers = 1;
    let with = Model::new(cfg, vocab(), 5).unwrap();
    cfg.stack = false;
    let without = Model::new(cfg, vocab(), 5).unwrap();
    let (ta, a) = run(&with, &[0, 4, 5, 4]);
    let (tb, b) = run(&without, &[0, 4, 5, 4]);
    assert_eq!(ta.value(a.layers[0].ffn_output), tb.value(b.layers[0].output));
}

#[test]
fn alm_prefixes_share_early_logits_and_alphas() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for pe in PeKind::ALL {
        let model = Model::new(tiny(pe, true, Mode::Alm), vocab(), 2).unwrap();
        let a = random_tokens(&mut rng, 7);
        let mut b = a.clone();
        for t in &mut b[5..] {
            *t = 9 - *t;
        }
        let (ta, fa) = run(&model, &a);
        let (tb, fb) = run(&model, &b);
        for i in 0..5 {
            assert_eq!(ta.value(fa.logits).row(i), tb.value(fb.logits).row(i), "{pe} row {i}");
            for l in 0..2 {
                let (xa, xb) = (fa.layers[l].alphas.unwrap(), fb.layers[l].alphas.unwrap());
                assert_eq!(ta.value(xa).row(i), tb.value(xb).row(i));
            }
        }
        assert_ne!(ta.value(fa.logits).row(5), tb.value(fb.logits).row(5));
    }
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for pe in PeKind::ALL {
        let cfg = ModelConfig {
            layers: 1,
            d_model: 4,
            heads: 2,
            ffn_dim: 6,
            pe,
            stack: true,
            mode: Mode::Alm,
        };
        let model = Model::new(cfg, vocab(), 17).unwrap();
        let inputs: Vec<Tensor<f64>> = model.params().tensors().iter().map(|t| t.cast()).collect();
        let tokens = [0, 4, 5, 5, 4];
        let targets = [Some(1), Some(0), None, Some(2), Some(1)];
        let report = check_gradients(&inputs, 1e-5, |tape, vars| {
            let trace = model.forward(tape, vars, &tokens).map_err(|e| match e {
                Error::Numerics(n) => n,
                other => panic!("{other}"),
            })?;
            tape.cross_entropy_sum(trace.logits, &targets)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{pe}: {report:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(
        tiny(PeKind::Relative, true, Mode::Alm),
        Vocabulary::new(&["a", "b", "[PAD]"]).unwrap(),
        4,
    )
    .unwrap();
    let meta = vec![("seed".to_string(), "4".to_string())];
    save_checkpoint(&model, &path, &meta).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.meta, meta);
    assert_eq!(back.model.config(), model.config());
    assert_eq!(back.model.vocab(), model.vocab());
    for (a, b) in back.model.params().tensors().iter().zip(model.params().tensors()) {
        let bits_a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }
}

#[test]
fn checkpoint_rejects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = Model::new(tiny(PeKind::None, false, Mode::Mlm), vocab(), 4).unwrap();
    save_checkpoint(&model, &path, &[]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    std::fs::write(&path, text.replace("param embed 6x8", "param embed 8x6")).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));

    std::fs::write(&path, text.replace("config layers=2", "config layers=3")).unwrap();
    assert!(load_checkpoint(&path).is_err());

    std::fs::write(&path, &text).unwrap();
    let bin = path.with_extension("bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let a = Model::new(ModelConfig::desk(), vocab(), 8).unwrap();
    let b = Model::new(ModelConfig::desk(), vocab(), 8).unwrap();
    let c = Model::new(ModelConfig::desk(), vocab(), 9).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    let w = a.params().get("layer0.attn.wq").unwrap();
    let bound = 1.0 / 32f32.sqrt();
    assert!(w.data().iter().all(|x| x.abs() <= bound));
    assert!(a.params().get("layer1.ffn.b2").unwrap().data().iter().all(|&x| x == 0.0));
}
