use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{encode_corpus, Vocabulary};
use crate::fixtures::{lexical_pairs, random_sample, toy_config, SYNTHETIC_WORDS};

fn single(name: &str, values: Vec<f64>) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(name, Tensor::row(values));
    p
}

fn grads_of(pairs: &[(&str, Vec<f64>)]) -> Gradients {
    pairs
        .iter()
        .map(|(n, v)| (n.to_string(), Tensor::row(v.clone())))
        .collect()
}

#[test]
fn first_adam_step_moves_by_lr() {
    let mut p = single("w", vec![0.5]);
    let mut s = AdamState::new(&p, 0.001);
    adam_step(&mut p, &grads_of(&[("w", vec![0.1])]), &mut s).unwrap();
    let expected = 0.5 - 0.001 * (0.1 / (0.1 + 1e-8));
    assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-9);
    assert!((p.get("w").unwrap().data()[0] - 0.499).abs() < 1e-9);
}

#[test]
fn zero_gradient_leaves_parameters() {
    let mut p = single("w", vec![0.5, -2.0]);
    let before = p.clone();
    let mut s = AdamState::new(&p, 0.001);
    adam_step(&mut p, &grads_of(&[("w", vec![0.0, 0.0])]), &mut s).unwrap();
    assert_eq!(p, before);
    assert_eq!(s.step, 1);
}

#[test]
fn equal_gradients_give_equal_updates() {
    let mut p = ParamStore::new();
    p.insert("a", Tensor::row(vec![1.0]));
    p.insert("b", Tensor::row(vec![1.0]));
    let mut s = AdamState::new(&p, 0.01);
    for _ in 0..3 {
        adam_step(&mut p, &grads_of(&[("a", vec![0.3]), ("b", vec![0.3])]), &mut s).unwrap();
    }
    assert_eq!(p.get("a").unwrap(), p.get("b").unwrap());
}

#[test]
fn missing_gradient_is_a_contract_error() {
    let mut p = single("w", vec![0.5]);
    let mut s = AdamState::new(&p, 0.001);
    let err = adam_step(&mut p, &grads_of(&[("other", vec![1.0])]), &mut s).unwrap_err();
    assert!(matches!(err, DuaError::Contract(_)), "{err}");
}

#[test]
fn adam_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.gen_range(1..6);
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut p = single("x", init.clone());
        let mut s = AdamState::new(&p, 0.01);
        let (mut rp, mut rm, mut rv) = (init, vec![0.0; n], vec![0.0; n]);
        for step in 1..=5 {
            let g: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            adam_step(&mut p, &grads_of(&[("x", g.clone())]), &mut s).unwrap();
            for i in 0..n {
                rm[i] = 0.9 * rm[i] + 0.1 * g[i];
                rv[i] = 0.999 * rv[i] + 0.001 * g[i] * g[i];
                let mh = rm[i] / (1.0 - 0.9f64.powi(step));
                let vh = rv[i] / (1.0 - 0.999f64.powi(step));
                rp[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in p.get("x").unwrap().data().iter().zip(&rp) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn pad_embedding_row_is_frozen() {
    let mut p = ParamStore::new();
    p.insert(EMBEDDING, Tensor::from_rows(&[vec![0.0, 0.0], vec![0.3, 0.4]]).unwrap());
    let mut s = AdamState::new(&p, 0.1);
    let g: Gradients = [(EMBEDDING.to_string(), Tensor::filled(&[2, 2], 1.0))].into_iter().collect();
    adam_step(&mut p, &g, &mut s).unwrap();
    let e = p.get(EMBEDDING).unwrap();
    assert_eq!(e.row_slice(0), &[0.0, 0.0]);
    assert!(e.get(1, 0) < 0.3);
    assert_eq!(s.m[EMBEDDING].row_slice(0), &[0.0, 0.0]);
}

#[test]
fn plan_keys_round_trip() {
    let mut plan = TrainPlan::default();
    for (k, v) in [("batch_size", "7"), ("clip_norm", "none"), ("validation_metric", "map")] {
        assert!(plan.set(k, v).unwrap());
    }
    assert!(!plan.set("emb_dim", "3").unwrap());
    assert!(plan.set("epochs", "x").is_err());
    let mut back = TrainPlan::default();
    for (k, v) in plan.entries() {
        assert!(back.set(k, &v).unwrap());
    }
    assert_eq!(back, plan);
    assert_eq!(TrainPlan::default().entries().len(), TrainPlan::KEYS.len());
}

struct Toy {
    config: DuaConfig,
    vocab: Vocabulary,
    train: Vec<EncodedSample>,
    valid: Vec<EncodedSample>,
}

fn toy(pairs: usize) -> Toy {
    let raw = lexical_pairs(pairs, SYNTHETIC_WORDS, 1);
    let valid_raw = lexical_pairs(4, SYNTHETIC_WORDS, 2);
    let vocab = Vocabulary::build(&raw, 1);
    let config = toy_config(vocab.len(), 3, 6, 4);
    Toy {
        train: encode_corpus(&raw, &vocab, &config).unwrap(),
        valid: encode_corpus(&valid_raw, &vocab, &config).unwrap(),
        config,
        vocab,
    }
}

fn small_plan(epochs: usize, batch: usize) -> TrainPlan {
    TrainPlan {
        batch_size: batch,
        epochs,
        learning_rate: 0.01,
        valid_group_size: 2,
        ..TrainPlan::default()
    }
}

#[test]
fn one_epoch_logs_every_batch() {
    let t = toy(5);
    let mut seen = 0;
    let out = train(&small_plan(1, 3), &t.config, &t.vocab, &t.train, &t.valid, |_| seen += 1).unwrap();
    let batches = out.log.iter().filter(|r| matches!(r, LogRecord::Batch { .. })).count();
    assert_eq!(batches, 10usize.div_ceil(3));
    assert_eq!(seen, out.log.len());
    assert_eq!(out.epoch_losses().len(), 1);
    assert!(out.log_text().lines().all(|l| l.starts_with("batch ") || l.starts_with("epoch ")));
}

#[test]
fn training_is_deterministic() {
    let t = toy(5);
    let run = || train(&small_plan(2, 4), &t.config, &t.vocab, &t.train, &t.valid, |_| {}).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.best.to_bytes(), b.best.to_bytes());
    assert_eq!(a.log, b.log);
}

#[test]
fn best_epoch_is_selected() {
    let t = toy(5);
    let out = train(&small_plan(3, 4), &t.config, &t.vocab, &t.train, &t.valid, |_| {}).unwrap();
    let scores: Vec<f64> = out
        .log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch { validation, .. } => Some(validation.r_at_1),
            _ => None,
        })
        .collect();
    let best = scores.iter().cloned().fold(f64::MIN, f64::max);
    let first_best = scores.iter().position(|&s| s == best).unwrap() + 1;
    assert_eq!(out.best.meta.epoch, first_best);
    assert_eq!(out.best.meta.validation_score, best);
}

#[test]
fn ungroupable_validation_is_rejected() {
    let t = toy(3);
    let err = train(&small_plan(1, 4), &t.config, &t.vocab, &t.train, &t.valid[..3], |_| {}).unwrap_err();
    assert!(matches!(err, DuaError::Contract(_)));
}

#[test]
fn nan_parameters_abort_with_diagnostics() {
    let t = toy(3);
    let mut params = init_params(&t.config).unwrap();
    params.get_mut(crate::model::OUTPUT).unwrap().data_mut()[0] = f64::NAN;
    let err = train_from(&small_plan(1, 2), &t.config, &t.vocab, params, &t.train, &t.valid, |_| {}).unwrap_err();
    match err {
        DuaError::Diverged { epoch, batch, cause } => {
            assert_eq!((epoch, batch), (1, 0));
            assert!(!cause.is_empty());
        }
        other => panic!("unexpected {other}"),
    }
}

fn checkpoint() -> Checkpoint {
    let t = toy(3);
    let out = train(&small_plan(1, 4), &t.config, &t.vocab, &t.train, &t.valid, |_| {}).unwrap();
    out.best
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ckpt = checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dua");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = random_sample(&ckpt.config, 2, &mut rng);
    assert_eq!(
        back.model().score(&sample).unwrap().to_bits(),
        ckpt.model().score(&sample).unwrap().to_bits()
    );
    let no_adam = Checkpoint { adam: None, ..ckpt };
    assert_eq!(Checkpoint::from_bytes(&no_adam.to_bytes()).unwrap(), no_adam);
}

#[test]
fn corrupt_checkpoints_name_the_offset() {
    let bytes = checkpoint().to_bytes();
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, DuaError::Format { .. }), "cut {cut}: {err}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(DuaError::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(DuaError::Format { offset: 4, .. })));
    let mut long = bytes;
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(DuaError::Format { .. })));
}
