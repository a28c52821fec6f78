use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ultras::model::{self, ModelConfig, Params};
use ultras::probe::{self, HeadKind, LayerWeights, ProbeConfig};

fn tiny(n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers,
        n_heads: 2,
        mlp_ratio: 2,
        k_s: 4,
        k_t: 4,
        r_s: 2,
        r_t: 2,
        n_max: 3,
        patch_dim: 4,
        dropout_rate: 0.0,
        init_std: 0.3,
        input_mean: 0.0,
        input_std: 1.0,
    }
}

/// Gaussian blobs, one per class, `n` per class, as single-layer features.
fn blobs(n: usize, spread: f64, seed: u64) -> (Vec<Vec<Vec<f64>>>, Vec<u32>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let centres = [
        [4.0, 0.0, 0.0],
        [0.0, 4.0, 0.0],
        [0.0, 0.0, 4.0],
        [-4.0, -4.0, 0.0],
    ];
    let mut x = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        for (c, centre) in centres.iter().enumerate() {
            let v: Vec<f64> = centre
                .iter()
                .map(|m| m + spread * r.sample::<f64, _>(StandardNormal))
                .collect();
            x.push(vec![v.clone(), v.iter().map(|a| 2.0 * a + 1.0).collect()]);
            y.push(c as u32);
        }
    }
    (x, y)
}

#[test]
fn aggregate_matches_direct_weighted_sum() {
    let cfg = tiny(3);
    let p = Params::<f64>::init(&cfg, 1).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let tokens: Vec<f64> = (0..2 * cfg.r_s * cfg.d_model)
        .map(|_| r.sample(StandardNormal))
        .collect();
    let out = model::encode(&p, tokens).unwrap();
    let w = LayerWeights {
        raw: vec![0.3, -1.2, 2.0],
    };
    let got = probe::aggregate(&out, &w).unwrap();
    let z: f64 = w.raw.iter().map(|a| a.exp()).sum();
    let n_tok = out.n_tokens as f64;
    for d in 0..cfg.d_model {
        let want: f64 = out
            .per_layer
            .iter()
            .zip(&w.raw)
            .map(|(h, a)| a.exp() / z * h.iter().skip(d).step_by(cfg.d_model).sum::<f64>() / n_tok)
            .sum();
        assert!((got[d] - want).abs() < 1e-12);
    }
    let shifted = LayerWeights {
        raw: w.raw.iter().map(|a| a + 17.0).collect(),
    };
    let again = probe::aggregate(&out, &shifted).unwrap();
    assert!(got.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(probe::aggregate(&out, &LayerWeights::uniform(2)).is_err());

    let one = tiny(1);
    let p1 = Params::<f64>::init(&one, 3).unwrap();
    let out1 = model::encode(&p1, vec![0.5; cfg.r_s * cfg.d_model]).unwrap();
    assert_eq!(
        probe::aggregate(&out1, &LayerWeights::uniform(1)).unwrap(),
        probe::pooled_layers(&out1)[0]
    );
}

#[test]
fn separable_blobs_are_learned_by_both_heads() {
    let (x, y) = blobs(20, 0.5, 4);
    let folds = probe::stratified_folds(&y, 4, 1).unwrap();
    for head in [HeadKind::Linear, HeadKind::Mlp] {
        let cfg = ProbeConfig {
            head,
            epochs: 30,
            ..ProbeConfig::default()
        };
        let report = probe::evaluate_kfold(&x, &y, &folds, &cfg).unwrap();
        assert_eq!(report.mean_accuracy, 1.0, "{head:?}");
        let mean = report.fold_accuracies.iter().sum::<f64>() / report.fold_accuracies.len() as f64;
        assert!((mean - report.mean_accuracy).abs() < 1e-12);
    }
}

#[test]
fn zero_epochs_is_chance_level() {
    let (x, y) = blobs(25, 0.5, 5);
    let folds = probe::stratified_folds(&y, 5, 0).unwrap();
    for head in [HeadKind::Linear, HeadKind::Mlp] {
        let cfg = ProbeConfig {
            head,
            epochs: 0,
            ..ProbeConfig::default()
        };
        let acc = probe::evaluate_kfold(&x, &y, &folds, &cfg)
            .unwrap()
            .mean_accuracy;
        let sigma = (0.25 * 0.75 / x.len() as f64).sqrt();
        assert!((acc - 0.25).abs() <= 3.0 * sigma, "{head:?} {acc}");
    }
}

#[test]
fn duplicated_folds_score_equally() {
    let (half, y_half) = blobs(10, 3.0, 6);
    let x: Vec<_> = half.iter().chain(&half).cloned().collect();
    let y: Vec<u32> = y_half.iter().chain(&y_half).copied().collect();
    let folds: Vec<usize> = (0..x.len()).map(|i| i / half.len()).collect();
    let cfg = ProbeConfig {
        epochs: 20,
        ..ProbeConfig::default()
    };
    let r = probe::kfold_with(&x, &y, &folds, |tx, ty, sx, _| {
        let owned: Vec<_> = tx.iter().map(|v| (*v).clone()).collect();
        let m = probe::fit_probe(&owned, ty, &cfg, 0)?;
        sx.iter().map(|v| m.predict(v)).collect()
    })
    .unwrap();
    assert_eq!(r.fold_accuracies[0], r.fold_accuracies[1]);
}

#[test]
fn frozen_encoder_is_untouched_by_probing() {
    let cfg = tiny(2);
    let p = Params::<f32>::init(&cfg, 7).unwrap();
    let hash = p.encoder_hash();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let clips: Vec<Vec<f32>> = (0..20)
        .map(|_| {
            (0..2 * cfg.r_s * cfg.patch_dim)
                .map(|_| r.gen_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let labels: Vec<u32> = (0..20).map(|i| i % 4).collect();
    let folds = probe::stratified_folds(&labels, 5, 0).unwrap();
    let pc = ProbeConfig {
        epochs: 2,
        ..ProbeConfig::default()
    };
    let (m, report) = probe::train_probe(&p, &clips, &labels, &folds, &pc).unwrap();
    assert_eq!(p.encoder_hash(), hash);
    assert_eq!(m.weights.raw.len(), 2);
    assert!((0.0..=1.0).contains(&report.mean_accuracy));
    let bad: Vec<u32> = labels.iter().map(|l| l + 4).collect();
    assert!(probe::train_probe(&p, &clips, &bad, &folds, &pc).is_err());
}

proptest! {
    #[test]
    fn effective_weights_form_a_distribution(raw in prop::collection::vec(-30.0f64..30.0, 1..13), shift in -50.0f64..50.0) {
        let w = LayerWeights { raw: raw.clone() }.effective();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|&a| a >= 0.0));
        let s = LayerWeights { raw: raw.iter().map(|a| a + shift).collect() }.effective();
        prop_assert!(w.iter().zip(&s).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn folds_are_fixed_by_seed(n_per in 5usize..20, k in 2usize..6, seed in any::<u64>()) {
        let labels: Vec<u32> = (0..n_per * 3).map(|i| (i % 3) as u32).collect();
        let a = probe::stratified_folds(&labels, k.min(n_per), seed).unwrap();
        prop_assert_eq!(&a, &probe::stratified_folds(&labels, k.min(n_per), seed).unwrap());
        for c in 0..3u32 {
            for f in 0..k.min(n_per) {
                let n = (0..labels.len()).filter(|&i| labels[i] == c && a[i] == f).count();
                prop_assert!(n >= n_per / k.min(n_per) && n <= n_per.div_ceil(k.min(n_per)));
            }
        }
    }
}
