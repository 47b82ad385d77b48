use super::*;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

fn cfg() -> TrainConfig {
    TrainConfig::default()
}

#[test]
fn lr_schedule_examples() {
    let c = cfg();
    assert_eq!(lr_at(0, &c), 0.0);
    assert!((lr_at(50, &c) - 5e-5).abs() < 1e-18);
    assert_eq!(lr_at(100, &c), 1e-4);
    assert_eq!(lr_at(1_000_000, &c), 1e-4);
    let flat = TrainConfig { warmup_steps: 0, ..c };
    assert_eq!(lr_at(0, &flat), 1e-4);
}

fn scalar_store(x: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(vec![1], vec![x]).unwrap());
    s
}

fn value(s: &ParamStore<f64>) -> f64 {
    s.iter().next().unwrap().1.data()[0]
}

fn adam(wd: f64) -> AdamW {
    AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: wd,
    }
}

#[test]
fn zero_gradient_without_decay_is_identity() {
    let mut s = scalar_store(0.75);
    let mut st = AdamState::new(&s);
    for _ in 0..5 {
        optimizer_step(&mut s, &[Some(vec![0.0])], &mut st, &adam(0.0), 1e-3).unwrap();
        optimizer_step(&mut s, &[None], &mut st, &adam(0.0), 1e-3).unwrap();
    }
    assert_eq!(value(&s), 0.75);
}

#[test]
fn constant_gradient_moves_by_lr_times_sign() {
    for g in [3.0, -0.02, 250.0] {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s);
        let lr = 1e-3;
        let mut prev = 1.0;
        for _ in 0..30 {
            optimizer_step(&mut s, &[Some(vec![g])], &mut st, &adam(0.0), lr).unwrap();
            let step = value(&s) - prev;
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((step - expected).abs() < 1e-12, "g={g}: {step} vs {expected}");
            prev = value(&s);
        }
    }
}

#[test]
fn matches_scalar_trace_for_varying_gradients() {
    let grads = [0.5, -1.0, 2.0, 0.1, -0.3, 0.0, 4.0];
    let (lr, b1, b2, eps, wd): (f64, f64, f64, f64, f64) = (0.01, 0.9, 0.999, 1e-8, 0.1);
    let mut s = scalar_store(2.0);
    let mut st = AdamState::new(&s);
    for (t, _) in grads.iter().enumerate() {
        optimizer_step(&mut s, &[Some(vec![grads[t]])], &mut st, &adam(wd), lr).unwrap();
    }
    // Closed-form moments as weighted sums over the gradient history.
    let mut p = 2.0;
    for t in 1..=grads.len() {
        let m: f64 = (1..=t)
            .map(|i| (1.0 - b1) * b1.powi((t - i) as i32) * grads[i - 1])
            .sum();
        let v: f64 = (1..=t)
            .map(|i| (1.0 - b2) * b2.powi((t - i) as i32) * grads[i - 1].powi(2))
            .sum();
        let mhat = m / (1.0 - b1.powi(t as i32));
        let vhat = v / (1.0 - b2.powi(t as i32));
        p = p * (1.0 - lr * wd) - lr * mhat / (vhat.sqrt() + eps);
    }
    assert!((value(&s) - p).abs() < 1e-12, "{} vs {p}", value(&s));
}

#[test]
fn decoupled_weight_decay() {
    let mut s = scalar_store(3.0);
    let mut st = AdamState::new(&s);
    let lr = 0.5;
    let mut expected = 3.0;
    for _ in 0..4 {
        optimizer_step(&mut s, &[Some(vec![0.0])], &mut st, &adam(0.01), lr).unwrap();
        expected *= 1.0 - lr * 0.01;
        assert!((value(&s) - expected).abs() < 1e-15);
    }
}

#[test]
fn non_finite_gradient_aborts_untouched() {
    let mut s = scalar_store(1.0);
    s.add("q", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let mut st = AdamState::new(&s);
    let before = (s.clone(), st.clone());
    let err = optimizer_step(
        &mut s,
        &[Some(vec![1.0]), Some(vec![0.0, f64::NAN])],
        &mut st,
        &adam(0.01),
        0.1,
    );
    match err {
        Err(GurError::Numeric(msg)) => assert!(msg.contains('q') && msg.contains("index 1"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert_eq!((s, st), before);
}

#[test]
fn clipping_caps_global_norm() {
    let mut g: Vec<Option<Vec<f64>>> = vec![Some(vec![3.0]), None, Some(vec![0.0, 4.0])];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
    let mut small = vec![Some(vec![0.1f64])];
    clip_global_norm(&mut small, 1.0);
    assert_eq!(small[0].as_ref().unwrap()[0], 0.1);
}

fn toy_data() -> TrainData {
    let names = ["tom", "jerry", "spike", "tyke", "butch", "nibbles"];
    let mut pairs = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let a = format!("{n} is chasing the cat.");
        let b = format!("{n} is chasing a mouse.");
        pairs.push(SentencePair::new(&a, &b, format!("{n} is chasing"), &format!("d{i}")));
    }
    TrainData::from_pairs(pairs, &BucketSpec::default())
}

fn toy_setup(mode: Mode, steps: u64) -> TrainSetup {
    TrainSetup {
        train: TrainConfig {
            learning_rate: 3e-3,
            warmup_steps: 5,
            steps,
            short_batch_size: 4,
            mode,
            seed: 9,
            ..TrainConfig::default()
        },
        loss: LossWeights::default(),
        masking: MaskingConfig::default(),
        buckets: BucketSpec::default(),
    }
}

fn toy_model(data: &TrainData) -> Gur<f32> {
    let cfg = ModelConfig {
        model_dim: 16,
        num_heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        ff_dim: 32,
        vector_dim: 8,
        max_seq: 40,
        ..ModelConfig::default()
    };
    Gur::new(cfg, data.vocab(), 1).unwrap()
}

#[test]
fn training_logs_follow_schedule_and_decrease() {
    let data = toy_data();
    let setup = toy_setup(Mode::Full, 60);
    let mut model = toy_model(&data);
    let mut seen = 0;
    let summary = train(&mut model, &data, &setup, |_| {
        seen += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, 60);
    assert_eq!(summary.skipped_steps, 0);
    for r in &summary.records {
        assert_eq!(r.lr, lr_at(r.step, &setup.train));
        assert!(r.lm_loss.unwrap().is_finite() && r.cl_loss.unwrap().is_finite());
        let expect = r.lm_loss.unwrap() + r.cl_loss.unwrap();
        assert!((r.total_loss - expect).abs() < 1e-5);
    }
    let head: f64 = summary.records[..5].iter().map(|r| r.total_loss).sum();
    let tail: f64 = summary.records[55..].iter().map(|r| r.total_loss).sum();
    assert!(tail < head, "{tail} !< {head}");
    assert!(model.params().all_finite());
}

#[test]
fn modes_log_absent_terms() {
    let data = toy_data();
    for (mode, lm, cl) in [(Mode::ClOnly, false, true), (Mode::LmOnly, true, false)] {
        let mut model = toy_model(&data);
        let s = train(&mut model, &data, &toy_setup(mode, 3), |_| Ok(())).unwrap();
        for r in &s.records {
            assert_eq!(r.lm_loss.is_some(), lm);
            assert_eq!(r.cl_loss.is_some(), cl);
        }
    }
}

#[test]
fn same_seed_same_log() {
    let data = toy_data();
    let run = || {
        let mut m = toy_model(&data);
        let s = train(&mut m, &data, &toy_setup(Mode::Full, 8), |_| Ok(())).unwrap();
        let strip: Vec<_> = s
            .records
            .into_iter()
            .map(|r| TrainLogRecord { wall_ms: 0, ..r })
            .collect();
        (strip, m.params().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn cursor_cycles_with_fresh_order() {
    let mut c = Cursor::new(Bucket::Short, 10, 3);
    let first: Vec<usize> = (0..3).flat_map(|_| c.next_batch(3)).collect();
    let mut sorted = first.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), 9);
    let next = c.next_batch(3);
    assert_eq!(c.epoch, 1);
    assert_eq!(next.len(), 3);
}

#[test]
fn rejects_bad_setups() {
    let data = toy_data();
    let mut model = toy_model(&data);
    let bad = TrainSetup {
        train: TrainConfig {
            learning_rate: 0.0,
            ..cfg()
        },
        ..toy_setup(Mode::Full, 1)
    };
    assert!(train(&mut model, &data, &bad, |_| Ok(())).is_err());
    let too_long = TrainSetup {
        buckets: BucketSpec {
            short_seq_len: 64,
            ..BucketSpec::default()
        },
        ..toy_setup(Mode::Full, 1)
    };
    assert!(matches!(
        train(&mut model, &data, &too_long, |_| Ok(())),
        Err(GurError::Config(_))
    ));
    assert!(train(&mut model, &TrainData::default(), &toy_setup(Mode::Full, 1), |_| Ok(())).is_err());
}

#[test]
fn lm_eval_is_token_weighted() {
    let data = toy_data();
    let model = toy_model(&data);
    let sentences: Vec<String> = data.short.iter().map(|p| p.s1.clone()).collect();
    let set = make_lm_eval_set(model.vocab(), &sentences, &MaskingConfig::default(), 32, 4).unwrap();
    assert_eq!(
        set,
        make_lm_eval_set(model.vocab(), &sentences, &MaskingConfig::default(), 32, 4).unwrap()
    );
    let whole = lm_loss(&model, &set).unwrap();
    let chunked = eval_lm_loss(&model, &set).unwrap();
    assert!((whole - chunked).abs() < 1e-5);
}
