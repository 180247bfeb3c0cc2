use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn s(text: &str) -> Vec<String> {
    parse_symbols(text)
}

#[test]
fn alphabets() {
    assert_eq!(Task::Rs.alphabet(), ["a", "b"]);
    assert_eq!(Task::Sm.alphabet(), ["a", "b", PUSH_A, PUSH_B, POP, PAD_SYMBOL]);
    assert_eq!(Task::Ma.input_alphabet().len(), 11);
    assert_eq!(Task::Se.input_alphabet().len(), 11);
    assert!(Task::Se.input_alphabet().contains(&"z"));
    assert!(!Task::Se.input_alphabet().contains(&"·"));
    let v = Task::Sm.vocabulary();
    assert_eq!(v.id(PAD_SYMBOL).unwrap(), crate::model::PAD);
    assert_eq!("se".parse::<Task>().unwrap(), Task::Se);
    assert!("dyck".parse::<Task>().is_err());
}

#[test]
fn oracle_examples() {
    assert_eq!(oracle(Task::Rs, &s("a b b")).unwrap(), s("b b a"));
    assert_eq!(oracle(Task::Rs, &s("a a a a")).unwrap(), s("a a a a"));
    assert_eq!(oracle(Task::Rs, &s("a b a b")).unwrap(), s("b a b a"));
    assert_eq!(
        oracle(Task::Sm, &s("b a b [POP] [PUSH_a] [PUSH_b]")).unwrap(),
        s("b a a b [PAD] [PAD] [PAD]")
    );
    assert_eq!(oracle(Task::Sm, &s("a [POP]")).unwrap(), s("[PAD] [PAD] [PAD]"));
    assert_eq!(oracle(Task::Sm, &s("a b [PUSH_a]")).unwrap(), s("a b a [PAD]"));
    assert_eq!(oracle(Task::Ma, &s("( 1 + 2 ) * 3 =")).unwrap(), s("4"));
    assert_eq!(oracle(Task::Ma, &s("0 ≡")).unwrap(), s("0"));
    assert_eq!(oracle(Task::Ma, &s("2 - 4 ≡")).unwrap(), s("3"));
    assert_eq!(oracle(Task::Se, &s("( 1 + z ) + 2 ≡ 2")).unwrap(), s("4"));
    assert_eq!(oracle(Task::Se, &s("z ≡ 3")).unwrap(), s("3"));
    assert_eq!(oracle(Task::Se, &s("4 − z ≡ 0")).unwrap(), s("4"));
    assert_eq!(oracle(Task::Se, &s("z ≡ 0")).unwrap(), s("0"));
}

#[test]
fn oracle_rejects_malformed_input() {
    assert!(matches!(oracle(Task::Rs, &s("a c")), Err(Error::Parse { pos: 1, .. })));
    assert!(matches!(oracle(Task::Sm, &s("[POP] a")), Err(Error::Parse { pos: 0, .. })));
    assert!(matches!(oracle(Task::Sm, &s("a [POP] b")), Err(Error::Parse { pos: 2, .. })));
    assert!(oracle(Task::Ma, &s("1 + z ≡")).is_err());
    assert!(oracle(Task::Se, &s("1 · z ≡ 2")).is_err());
    assert!(oracle(Task::Rs, &[]).is_err());
}

#[test]
fn generators_respect_lengths_and_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for task in Task::ALL {
        for len in task.min_len()..30 {
            let inst = task.generate(len, &mut rng).unwrap();
            assert_eq!(inst.x.len(), len, "{task}");
            assert_eq!(inst.y.len(), task.output_len(len));
            inst.verify().unwrap();
            let out = task.output_alphabet();
            assert!(inst.y.iter().all(|y| out.contains(&y.as_str())));
            assert!(inst.word().iter().all(|w| task.alphabet().contains(w)));
        }
        assert!(task.generate(task.min_len() - 1, &mut rng).is_err());
    }
}

#[test]
fn sm_split_has_symbols_then_operations() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let inst = gen_sm(6, &mut rng).unwrap();
        let k = inst.x.iter().take_while(|t| !t.starts_with('[')).count();
        assert!((1..6).contains(&k));
        assert!(inst.x[k..].iter().all(|t| t.starts_with('[')));
    }
}

#[test]
fn ma_and_se_targets_are_close_to_uniform() {
    for task in [Task::Ma, Task::Se] {
        let data = generate_dataset(task, &(3..=20), 5000, 1, Split::Train).unwrap();
        let mut counts = [0usize; 5];
        for inst in &data {
            counts[inst.y[0].parse::<usize>().unwrap()] += 1;
        }
        for c in counts {
            assert!((800..1200).contains(&c), "{task}: {counts:?}");
        }
    }
}

#[test]
fn scoring() {
    assert_eq!(score(&s("b b a"), &s("b b a")).unwrap().accuracy(), Some(1.0));
    let gold = s("b a a b [PAD] [PAD] [PAD]");
    assert_eq!(score(&s("b a a b a b a"), &gold).unwrap().accuracy(), Some(1.0));
    let sc = score(&s("b b b"), &s("b b a")).unwrap();
    assert_eq!((sc.correct, sc.total), (2, 3));
    assert!(matches!(score(&s("a"), &s("a b")), Err(Error::LengthMismatch { pred: 1, gold: 2 })));
    let all_pad = score(&s("a a"), &s("[PAD] [PAD]")).unwrap();
    assert_eq!(all_pad.accuracy(), None);
    assert_eq!(mean_accuracy(&[sc, all_pad, Score { correct: 1, total: 1 }]), (2.0 / 3.0 + 1.0) / 2.0);
}

#[test]
fn mlm_inputs() {
    let v = Task::Rs.vocabulary();
    let inst = TaskInstance::from_input(Task::Rs, s("a b b")).unwrap();
    let ex = make_mlm_input(&inst, &v).unwrap();
    let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
    assert_eq!(ex.tokens, vec![BOS, a, b, b, MASK, MASK, MASK]);
    assert_eq!(ex.targets, vec![None, None, None, None, Some(b), Some(b), Some(a)]);
    assert_eq!(ex.mask_rows().collect::<Vec<_>>(), vec![4, 5, 6]);

    let ma = TaskInstance::from_input(Task::Ma, s("1 + 2 ≡")).unwrap();
    let ex = make_mlm_input(&ma, &Task::Ma.vocabulary()).unwrap();
    assert_eq!(ex.tokens.iter().filter(|&&t| t == MASK).count(), 1);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sm = gen_sm(6, &mut rng).unwrap();
    let ex = make_mlm_input(&sm, &Task::Sm.vocabulary()).unwrap();
    assert_eq!(ex.tokens.iter().filter(|&&t| t == MASK).count(), 7);
}

#[test]
fn alm_episodes() {
    let v = Task::Rs.vocabulary();
    let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
    let inst = TaskInstance::from_input(Task::Rs, s("a b b")).unwrap();
    let ep = make_alm_episode(&inst, &v).unwrap();
    assert_eq!(ep.prefix, vec![BOS, a, b, b]);
    assert_eq!(ep.continuation, vec![b, b, a]);
    let (tokens, targets) = ep.teacher_forced(false);
    assert_eq!(tokens, vec![BOS, a, b, b, b, b, a]);
    assert_eq!(targets, vec![None, None, None, Some(b), Some(b), Some(a), Some(EOS)]);
    let (_, with_prefix) = ep.teacher_forced(true);
    assert_eq!(&with_prefix[..3], &[Some(a), Some(b), Some(b)]);
}

#[test]
fn generation_is_deterministic_per_index() {
    let a = generate_instance(Task::Ma, &(2..=30), 9, Split::Train, 17).unwrap();
    let b = generate_instance(Task::Ma, &(2..=30), 9, Split::Train, 17).unwrap();
    let c = generate_instance(Task::Ma, &(2..=30), 9, Split::Test, 17).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let data = generate_dataset(Task::Rs, &(1..=8), 50, 9, Split::Train).unwrap();
    assert_eq!(data[17], generate_instance(Task::Rs, &(1..=8), 9, Split::Train, 17).unwrap());
    assert!(generate_instance(Task::Se, &(1..=2), 0, Split::Train, 0).is_err());
}

#[test]
fn length_ranges() {
    assert_eq!(parse_length_range("1..8").unwrap(), 1..=8);
    assert_eq!(parse_length_range("9..=16").unwrap(), 9..=16);
    assert_eq!(parse_length_range("5").unwrap(), 5..=5);
    for bad in ["8..1", "0..3", "x", "1..", ""] {
        assert!(parse_length_range(bad).is_err(), "{bad}");
    }
}

#[test]
fn dataset_round_trip() {
    let mut data = Vec::new();
    for task in Task::ALL {
        data.extend(generate_dataset(task, &(1..=10), 20, 4, Split::Test).unwrap());
    }
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 3));
    assert_eq!(read_dataset(buf.as_slice()).unwrap(), data);

    let corrupted = "RS\ta b b\ta b b\n";
    assert!(read_dataset(corrupted.as_bytes()).is_err());
    let ascii = "MA\t( 1 + 2 ) * 3 =\t4\n";
    assert_eq!(read_dataset(ascii.as_bytes()).unwrap()[0].x.last().unwrap(), "≡");
}
