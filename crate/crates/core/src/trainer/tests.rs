use super::*;
use crate::numerics::layers::gradcheck::{check_params, nudge};
use crate::rewards::signal_from_matrix;
use crate::sampling::SummaryMask;

fn tiny_spec(decoder: DecoderKind) -> ModelSpec {
    ModelSpec {
        width: 4,
        fusion_heads: 2,
        decoder,
        lstm_hidden: 3,
        transformer_heads: 2,
        ffn_hidden: 6,
        dropout: 0.0,
    }
}

fn unit_rows(n: usize, f: usize, rng: &mut SeedRng) -> Matrix {
    let mut m = Matrix::from_fn(n, f, |_, _| rng.uniform_range(-1.0, 1.0));
    for r in 0..n {
        let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        m.row_mut(r).iter_mut().for_each(|v| *v /= norm);
    }
    m
}

fn toy_video(id: &str, n: usize, seed: u64, scores: Vec<f64>) -> TrainVideo {
    let mut rng = SeedRng::new(seed);
    let streams = vec![unit_rows(n, 4, &mut rng), unit_rows(n, 4, &mut rng)];
    let mut ssim = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let s = rng.uniform_range(0.2, 0.9);
            ssim[(i, j)] = s;
            ssim[(j, i)] = s;
        }
    }
    TrainVideo::new(id, streams, scores, signal_from_matrix(ssim, 10)).unwrap()
}

fn flatten(m: &Model) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit(&mut |_, b| v.extend_from_slice(b.as_slice()));
    v
}

#[test]
fn reg_loss_cases() {
    let half = FrameProbabilities::new(vec![0.5; 8]).unwrap();
    assert_eq!(reg_loss(&half, 0.5), 0.0);
    let ones = FrameProbabilities::clamped(vec![1.0; 8]);
    assert!((reg_loss(&ones, 0.5) - 0.25).abs() < 1e-6);
    let mut rng = SeedRng::new(1);
    for _ in 0..20 {
        let v: Vec<f64> = (0..13).map(|_| rng.uniform_range(0.01, 0.99)).collect();
        let mut mean = 0.0;
        for x in &v {
            mean += x;
        }
        mean /= 13.0;
        let p = FrameProbabilities::new(v).unwrap();
        assert!((reg_loss(&p, 0.3) - (mean - 0.3) * (mean - 0.3)).abs() < 1e-14);
        let (abs, grad) = reg_loss_with(&p, 0.3, RegForm::Absolute);
        assert!((abs - (mean - 0.3).abs()).abs() < 1e-14);
        assert!(grad.iter().all(|g| (g.abs() - 1.0 / 13.0).abs() < 1e-15));
    }
}

#[test]
fn config_validation() {
    TrainConfig::default().validate().unwrap();
    for bad in [
        TrainConfig { beta: -1.0, ..TrainConfig::default() },
        TrainConfig { epsilon: 1.0, ..TrainConfig::default() },
        TrainConfig { episodes: 0, ..TrainConfig::default() },
        TrainConfig { sampler: TrainSampler::Sab { window: 0 }, ..TrainConfig::default() },
        TrainConfig {
            reward_weights: RewardWeights { clsf: 0.9, ..RewardWeights::default() },
            ..TrainConfig::default()
        },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

/// With every reward equal to the baseline only the penalty drives the
/// gradient, and that gradient must match finite differences of `β L_reg`.
#[test]
fn zero_advantage_leaves_only_the_penalty() {
    let n = 30;
    let video = toy_video("flat", n, 2, vec![1.0; n]);
    let mut rng = SeedRng::new(3);
    let model = Model::init(&tiny_spec(DecoderKind::Lstm), &mut rng).unwrap();
    let config = TrainConfig {
        reward_weights: RewardWeights { clsf: 1.0, ssim: 0.0, rep: 0.0, div: 0.0 },
        ..TrainConfig::default()
    };
    let (grads, stats) = policy_gradient_step(&video, &model, &config, 1.0, &mut rng).unwrap();
    assert!(stats.rewards.iter().all(|&r| r == 1.0));

    let penalty = |m: &Model| {
        let out = m.forward(&video.stream_refs(), Mode::Infer, &mut SeedRng::new(0)).unwrap();
        config.beta * reg_loss(&out.probs, config.epsilon)
    };
    check_params(&model, &grads, 1e-5, penalty);
    assert!(grads.global_norm() > 0.0);
}

/// `J(θ) = Σ_a p_θ(a) R(a)` over all masks, rewards frozen at θ0.
fn exact_objective(model: &Model, video: &TrainVideo, rewards: &[f64]) -> f64 {
    let out = model.forward(&video.stream_refs(), Mode::Infer, &mut SeedRng::new(0)).unwrap();
    let n = video.frame_count();
    (0..1u64 << n)
        .map(|bits| {
            let mask = SummaryMask::from_bits(n, bits);
            let p: f64 = mask
                .as_slice()
                .iter()
                .zip(out.probs.as_slice())
                .map(|(&a, &q)| if a { q } else { 1.0 - q })
                .product();
            p * rewards[bits as usize]
        })
        .sum()
}

struct Enumerated {
    video: TrainVideo,
    model: Model,
    exact: Vec<f64>,
    value: f64,
}

/// Six frames, a flat classifier and parameters shrunk by half, so the
/// coordinates above the comparison floor carry a strong signal.
fn enumerated_instance() -> Enumerated {
    let n = 6;
    let video = toy_video("six", n, 4, vec![0.0; n]);
    let mut model = Model::init(&tiny_spec(DecoderKind::Lstm), &mut SeedRng::new(5)).unwrap();
    // stretch the head so probabilities spread out
    model.scale_all(0.5);
    let out = model.forward(&video.stream_refs(), Mode::Infer, &mut SeedRng::new(0)).unwrap();
    let ctx = RewardContext::new(
        &out.fused,
        &video.scores,
        &video.ssim,
        SsimOrientation::Dissimilarity,
        RewardWeights::default(),
        DEFAULT_DIVERSITY_LAMBDA,
    )
    .unwrap();
    let rewards: Vec<f64> = (0..1u64 << n)
        .map(|b| ctx.evaluate(&SummaryMask::from_bits(n, b)).total)
        .collect();
    let value = exact_objective(&model, &video, &rewards);
    let h = 1e-5;
    let mut exact = Vec::new();
    let mut block = 0;
    let mut sizes = Vec::new();
    model.visit(&mut |_, m| sizes.push(m.len()));
    for size in sizes {
        for idx in 0..size {
            let mut plus = model.clone();
            let mut minus = model.clone();
            nudge(&mut plus, block, idx, h);
            nudge(&mut minus, block, idx, -h);
            exact.push(
                (exact_objective(&plus, &video, &rewards) - exact_objective(&minus, &video, &rewards))
                    / (2.0 * h),
            );
        }
        block += 1;
    }
    Enumerated {
        video,
        model,
        exact,
        value,
    }
}

fn estimate(inst: &Enumerated, episodes: usize, baseline: f64, seed: u64) -> Vec<f64> {
    let config = TrainConfig {
        beta: 0.0,
        episodes,
        ..TrainConfig::default()
    };
    let mut rng = SeedRng::new(seed);
    let (grads, _) = policy_gradient_step(&inst.video, &inst.model, &config, baseline, &mut rng).unwrap();
    // the step returns the gradient of −J
    flatten(&grads).iter().map(|g| -g).collect()
}

#[test]
fn monte_carlo_gradient_matches_enumeration() {
    let inst = enumerated_instance();
    let mc = estimate(&inst, 50_000, inst.value, 6);
    let mut checked = 0;
    for (i, (&e, &m)) in inst.exact.iter().zip(&mc).enumerate() {
        if e.abs() > 1e-3 {
            checked += 1;
            assert!((m - e).abs() <= 0.05 * e.abs(), "coordinate {i}: estimate {m:e}, exact {e:e}");
        }
    }
    assert!(checked >= 8, "only {checked} coordinates above the floor");
}

#[test]
fn baseline_does_not_shift_the_expectation() {
    let inst = enumerated_instance();
    let batches = 40;
    for baseline in [0.0, inst.value, 0.9] {
        let runs: Vec<Vec<f64>> = (0..batches)
            .map(|s| estimate(&inst, 2_500, baseline, 100 + s))
            .collect();
        for (i, &e) in inst.exact.iter().enumerate() {
            let xs: Vec<f64> = runs.iter().map(|r| r[i]).collect();
            let mean = xs.iter().sum::<f64>() / batches as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
            let se = (var / batches as f64).sqrt();
            assert!(
                (mean - e).abs() <= 5.0 * se + 1e-9,
                "baseline {baseline}, coordinate {i}: mean {mean:e}, exact {e:e}, se {se:e}"
            );
        }
    }
}

fn small_dataset() -> Vec<TrainVideo> {
    vec![
        toy_video("a", 8, 10, vec![0.0, 0.0, 1.0, 1.0, 0.9, 0.0, 0.1, 0.0]),
        toy_video("b", 8, 11, vec![1.0, 0.9, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0]),
    ]
}

fn quick_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_keep_initialisation() {
    let data = small_dataset();
    let config = quick_config(0, 7);
    let mut state = TrainState::init(tiny_spec(DecoderKind::Lstm), &config, data.len()).unwrap();
    let initial = state.clone();
    let dir = tempfile::tempdir().unwrap();
    let report = train(&data, &config, &mut state, Some(dir.path())).unwrap();
    assert!(report.epochs.is_empty());
    assert_eq!(state, initial);
    let loaded = load_checkpoint(dir.path().join(CHECKPOINT_FILE), Some(&state.spec)).unwrap();
    assert_eq!(loaded, initial);
}

#[test]
fn same_seed_same_bytes() {
    let data = small_dataset();
    let config = quick_config(3, 8);
    let run = || {
        let mut s = TrainState::init(tiny_spec(DecoderKind::Lstm), &config, data.len()).unwrap();
        let report = train(&data, &config, &mut s, None).unwrap();
        (encode_checkpoint(&s), report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(ra.epochs.len(), 3);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = small_dataset();
    for decoder in [DecoderKind::Lstm, DecoderKind::Transformer] {
        let mut spec = tiny_spec(decoder);
        spec.dropout = 0.25;
        let full_cfg = quick_config(4, 9);
        let mut full = TrainState::init(spec.clone(), &full_cfg, data.len()).unwrap();
        train(&data, &full_cfg, &mut full, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let half_cfg = quick_config(2, 9);
        let mut half = TrainState::init(spec.clone(), &half_cfg, data.len()).unwrap();
        train(&data, &half_cfg, &mut half, Some(dir.path())).unwrap();
        let mut resumed = load_checkpoint(dir.path().join(CHECKPOINT_FILE), Some(&spec)).unwrap();
        assert_eq!(resumed.epochs_done, 2);
        train(&data, &full_cfg, &mut resumed, None).unwrap();
        assert_eq!(encode_checkpoint(&resumed), encode_checkpoint(&full));
    }
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let data = small_dataset();
    let config = quick_config(1, 12);
    let spec = tiny_spec(DecoderKind::Lstm);
    let mut state = TrainState::init(spec.clone(), &config, data.len()).unwrap();
    train(&data, &config, &mut state, None).unwrap();
    let bytes = encode_checkpoint(&state);
    let back = decode_checkpoint(&bytes, Some(&spec)).unwrap();
    assert_eq!(back, state);
    assert_eq!(encode_checkpoint(&back), bytes);

    let wider = ModelSpec { width: 8, ..spec.clone() };
    assert!(matches!(decode_checkpoint(&bytes, Some(&wider)), Err(Error::Checkpoint(_))));
    let mut garbled = bytes.clone();
    garbled[0] = b'X';
    assert!(decode_checkpoint(&garbled, None).is_err());
    assert!(decode_checkpoint(&bytes[..bytes.len() - 3], None).is_err());
    let mut wrong_version = bytes.clone();
    wrong_version[4] = 9;
    assert!(decode_checkpoint(&wrong_version, None).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra, None).is_err());
}

#[test]
fn spec_text_round_trip() {
    let spec = ModelSpec::new(512, DecoderKind::Transformer);
    assert_eq!(ModelSpec::parse_canonical(&spec.canonical()).unwrap(), spec);
    assert_ne!(spec.hash(), ModelSpec::new(256, DecoderKind::Transformer).hash());
    assert!(ModelSpec::parse_canonical("width=3").is_err());
}

#[test]
fn misaligned_inputs_name_the_video() {
    let mut rng = SeedRng::new(13);
    let streams = vec![unit_rows(5, 4, &mut rng)];
    let sig = signal_from_matrix(Matrix::identity(5), 10);
    let err = TrainVideo::new("clip-7", streams.clone(), vec![0.0; 4], sig.clone()).unwrap_err();
    assert!(err.to_string().contains("clip-7"));

    let data = vec![TrainVideo::new("wide", vec![unit_rows(5, 8, &mut rng)], vec![0.0; 5], sig).unwrap()];
    let config = quick_config(1, 0);
    let mut state = TrainState::init(tiny_spec(DecoderKind::Lstm), &config, 1).unwrap();
    let err = train(&data, &config, &mut state, None).unwrap_err();
    assert!(err.to_string().contains("wide"));
}

#[test]
fn segment_sampler_and_transformer_steps_are_finite() {
    let data = small_dataset();
    let config = TrainConfig {
        sampler: TrainSampler::Sab { window: 3 },
        ..quick_config(2, 14)
    };
    for decoder in [DecoderKind::Lstm, DecoderKind::Transformer] {
        let mut state = TrainState::init(tiny_spec(decoder), &config, data.len()).unwrap();
        let report = train(&data, &config, &mut state, None).unwrap();
        assert!(report.epochs.iter().all(|e| e.mean_loss.is_finite()));
        assert!(state.model.all_finite());
    }
}

#[test]
fn clipping_caps_the_norm() {
    let mut rng = SeedRng::new(15);
    let mut model = Model::init(&tiny_spec(DecoderKind::Lstm), &mut rng).unwrap();
    let mut grads = model.clone();
    grads.scale_all(100.0);
    let before = grads.global_norm();
    let mut opt = Optimizer::new(&model, AdamConfig::default());
    let norm = apply_update(&mut model, &mut grads, &mut opt, 5.0).unwrap();
    assert_eq!(norm, before);
    assert!((grads.global_norm() - 5.0).abs() < 1e-9);
    assert_eq!(opt.step(), 1);
}

