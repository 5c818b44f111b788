use gvae::training::{sample_rate_index, train, TrainConfig, TrainError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(steps: usize) -> TrainConfig {
    TrainConfig {
        lagrange: vec![0.05, 0.01, 0.002],
        epochs: 1,
        steps_per_epoch: steps,
        learning_rate: 1e-3,
        halve_lr_at_epoch: None,
        batch_size: 4,
        patch_size: 16,
        channels: 8,
        hidden: 8,
        hyper_channels: 4,
        eval_patches: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn rate_indices_are_uniform() {
    let n = 6;
    let draws = 60_000;
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        counts[sample_rate_index(&mut rng, n)] += 1;
    }
    let expected = draws as f64 / n as f64;
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    // 99.9th percentile of chi-square with 5 degrees of freedom.
    assert!(chi2 < 20.515, "chi-square {chi2:.2} for counts {counts:?}");
}

#[test]
fn fixed_rate_training_reduces_held_out_loss() {
    let cfg = TrainConfig {
        lagrange: vec![0.01],
        baseline: true,
        channels: 16,
        hidden: 16,
        ..quick(300)
    };
    let t = train(&cfg, None).unwrap();
    let (before, after) = (t.log.eval_loss(0).unwrap(), t.log.eval_loss(1).unwrap());
    assert!(after < 0.8 * before, "held-out loss {before:.3} -> {after:.3}");
}

#[test]
fn gain_vectors_separate_during_multi_rate_training() {
    let cfg = TrainConfig {
        gain_lr_scale: 10.0,
        ..quick(150)
    };
    let t = train(&cfg, None).unwrap();
    let pair = t.model.gain_pair().unwrap().unwrap();
    let cols: Vec<Vec<f64>> = (0..pair.vectors()).map(|s| pair.column(s).unwrap().0).collect();
    for i in 0..cols.len() {
        for j in i + 1..cols.len() {
            let dist = cols[i]
                .iter()
                .zip(&cols[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(dist > 1e-3, "gain columns {i} and {j} only {dist:e} apart");
        }
    }
}

#[test]
fn training_is_reproducible() {
    let a = train(&quick(20), None).unwrap();
    let b = train(&quick(20), None).unwrap();
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(a.log, b.log);
}

#[test]
fn divergence_hands_back_the_last_good_parameters() {
    let poisoned = TrainConfig {
        inject_nan_at_step: Some(7),
        ..quick(20)
    };
    let Err(TrainError::Diverged { step, model, log }) = train(&poisoned, None) else {
        panic!("expected divergence");
    };
    assert_eq!(step, 7);
    assert_eq!(log.steps.len(), 7);
    // Oracle: an honest run stopped after the same seven steps.
    let clean = train(&quick(7), None).unwrap();
    assert_eq!(model.checksum(), clean.model.checksum());
}

#[test]
fn config_files_roundtrip_and_reject_typos() {
    let cfg = quick(10);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    let typo = format!("learning_rte = 0.1\n{}", cfg.to_toml());
    assert!(TrainConfig::from_toml(&typo).is_err());
    let bad = TrainConfig {
        lagrange: vec![0.01, 0.05],
        ..quick(10)
    };
    assert!(bad.validate().is_err());
}

#[test]
fn documented_config_keys_parse() {
    let text = r#"
lagrange = [0.05, 0.03, 0.007, 0.003, 0.001, 0.0003]
epochs = 12
steps_per_epoch = 200
batch_size = 8
patch_size = 32
learning_rate = 1e-4
halve_lr_at_epoch = 6
gain_lr_scale = 1.0
variant = "hcvr"
channels = 32
hidden = 32
hyper_channels = 16
baseline = false
gain_mode = { mode = "soft", penalty = 0.001 }
"#;
    let cfg = TrainConfig::from_toml(text).unwrap();
    assert_eq!(cfg.variant, gvae::model::Variant::Hcvr);
    assert_eq!(cfg.gain_mode, gvae::gain::GainMode::Soft { penalty: 0.001 });
    assert_eq!(cfg.halve_lr_at_epoch, Some(6));
    cfg.validate().unwrap();
    assert_eq!(TrainConfig::from_toml("").unwrap().halve_lr_at_epoch, None);
}

#[test]
fn a_single_gain_vector_trains_and_codes() {
    use gvae::gain::RateSelector;
    use gvae::quant::{Quantizer, QuantizerMode};
    let cfg = TrainConfig {
        lagrange: vec![0.01],
        ..quick(5)
    };
    let model = train(&cfg, None).unwrap().model;
    assert_eq!(model.vectors(), 1);
    let img = &gvae::training::procedural_corpus(1, 24, 1)[0];
    let sel = RateSelector::from_q(0.0, 1, false).unwrap();
    let enc = model.encode_image(img, sel, Quantizer::new(QuantizerMode::Round, 0)).unwrap();
    let dec = model.decode(&enc.bitstream).unwrap();
    assert_eq!((dec.image.width(), dec.image.height()), (24, 24));
}
