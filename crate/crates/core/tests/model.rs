use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ultras::masking::MaskPlan;
use ultras::model::{self, Example, Group, ModelConfig, Params};
use ultras::quantizer::TargetSet;

fn small(n_layers: usize) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers,
        n_heads: 2,
        mlp_ratio: 2,
        k_s: 5,
        k_t: 4,
        r_s: 2,
        r_t: 4,
        n_max: 4,
        patch_dim: 4,
        dropout_rate: 0.0,
        init_std: 0.5,
        input_mean: 0.0,
        input_std: 1.0,
    }
}

fn normal(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn example(cfg: &ModelConfig, n_seg: usize, seed: u64) -> Example<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Example {
        patches: normal(&mut r, n_seg * cfg.r_s * cfg.patch_dim),
        n_segments: n_seg,
        targets: TargetSet {
            n_segments: n_seg,
            r_s: cfg.r_s,
            r_t: cfg.r_t,
            spectral: (0..n_seg * cfg.r_s)
                .map(|_| r.gen_range(0..cfg.k_s as u32))
                .collect(),
            temporal: (0..n_seg * cfg.r_t)
                .map(|_| r.gen_range(0..cfg.k_t as u32))
                .collect(),
        },
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = small(3);
    let p = Params::<f64>::init(&cfg, 1).unwrap();
    let n = 3 * cfg.r_s;
    let tokens = normal(&mut ChaCha8Rng::seed_from_u64(2), n * cfg.d_model);
    let maps = model::attention_maps(&p, tokens).unwrap();
    assert_eq!(maps.len(), 3);
    for layer in &maps {
        assert_eq!(layer.len(), cfg.n_heads * n * n);
        for row in layer.chunks_exact(n) {
            assert!(row.iter().all(|&a| a >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn swapping_segments_swaps_outputs() {
    let cfg = small(2);
    let p = Params::<f64>::init(&cfg, 3).unwrap();
    let d = cfg.d_model;
    let n_seg = 4;
    let tokens = normal(&mut ChaCha8Rng::seed_from_u64(4), n_seg * cfg.r_s * d);
    let seg = |t: &[f64], s: usize| t[s * cfg.r_s * d..(s + 1) * cfg.r_s * d].to_vec();
    let order = [2, 1, 0, 3];
    let swapped: Vec<f64> = order.iter().flat_map(|&s| seg(&tokens, s)).collect();
    let a = model::encode(&p, tokens).unwrap();
    let b = model::encode(&p, swapped).unwrap();
    for (la, lb) in a.per_layer.iter().zip(&b.per_layer) {
        let expected: Vec<f64> = order.iter().flat_map(|&s| seg(la, s)).collect();
        assert!(close(lb, &expected, 1e-12));
    }
    for (i, &s) in order.iter().enumerate() {
        assert!(close(
            &b.pooled[i * d..(i + 1) * d],
            &a.pooled[s * d..(s + 1) * d],
            1e-12
        ));
    }
}

#[test]
fn masked_content_does_not_reach_outputs() {
    let cfg = small(2);
    let p = Params::<f64>::init(&cfg, 5).unwrap();
    let ex = example(&cfg, 3, 6);
    let masked: BTreeSet<usize> = [1, 2, 5].into_iter().collect();
    let mut other = ex.patches.clone();
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for &g in &masked {
        for v in &mut other[g * cfg.patch_dim..(g + 1) * cfg.patch_dim] {
            *v = r.sample::<f64, _>(StandardNormal) * 100.0;
        }
    }
    let ta = model::embed(&p, &ex.patches, &masked).unwrap();
    let tb = model::embed(&p, &other, &masked).unwrap();
    assert_eq!(ta, tb);
    let unmasked = model::embed(&p, &other, &BTreeSet::new()).unwrap();
    assert_ne!(ta, unmasked);
}

#[test]
fn temporal_heads_are_isolated() {
    let cfg = small(1);
    let mut p = Params::<f64>::init(&cfg, 8).unwrap();
    let tokens = normal(&mut ChaCha8Rng::seed_from_u64(9), 2 * cfg.r_s * cfg.d_model);
    let out = model::encode(&p, tokens).unwrap();
    let before = model::temporal_logits(&out, &p);
    p.tensor_mut("head.temporal3.fc2.weight").unwrap()[0] += 0.5;
    let after = model::temporal_logits(&out, &p);
    for s in 0..2 {
        for j in 0..cfg.r_t {
            let at = (s * cfg.r_t + j) * cfg.k_t;
            let same = before[at..at + cfg.k_t] == after[at..at + cfg.k_t];
            assert_eq!(same, j != 3, "segment {s} head {j}");
        }
    }
}

#[test]
fn zeroed_spectral_head_gives_zero_logits() {
    let cfg = small(1);
    let mut p = Params::<f64>::init(&cfg, 10).unwrap();
    for t in ["head.spectral.fc2.weight", "head.spectral.fc2.bias"] {
        p.tensor_mut(t).unwrap().iter_mut().for_each(|x| *x = 0.0);
    }
    let tokens = normal(
        &mut ChaCha8Rng::seed_from_u64(11),
        2 * cfg.r_s * cfg.d_model,
    );
    let out = model::encode(&p, tokens).unwrap();
    assert!(model::spectral_logits(&out, &p).iter().all(|&x| x == 0.0));
}

#[test]
fn identical_segment_tokens_pool_to_that_token() {
    let cfg = small(0);
    let p = Params::<f64>::init(&cfg, 12).unwrap();
    let d = cfg.d_model;
    let row = normal(&mut ChaCha8Rng::seed_from_u64(13), d);
    let tokens: Vec<f64> = (0..cfg.r_s).flat_map(|_| row.clone()).collect();
    let out = model::encode(&p, tokens).unwrap();
    assert!(close(&out.pooled, &row, 1e-15));
}

#[test]
fn unused_branch_has_exactly_zero_gradient() {
    let cfg = small(1);
    let p = Params::<f64>::init(&cfg, 14).unwrap();
    let ex = example(&cfg, 3, 15);
    let plan = MaskPlan::segments(3, [0, 2]).unwrap();
    let zero = |g: &Params<f64>, group: Group| {
        g.layout
            .group_ranges(group)
            .all(|r| g.data[r].iter().all(|&x| x == 0.0))
    };
    let (_, g0) = model::loss_and_gradients::<f64, ChaCha8Rng>(&p, &ex, &plan, 0.0, None).unwrap();
    assert!(zero(&g0, Group::TemporalHead));
    assert!(!zero(&g0, Group::SpectralHead));
    let (_, g1) = model::loss_and_gradients::<f64, ChaCha8Rng>(&p, &ex, &plan, 1.0, None).unwrap();
    assert!(zero(&g1, Group::SpectralHead));
    assert!(!zero(&g1, Group::TemporalHead));
    let patch = MaskPlan::patches(6, [1, 4]).unwrap();
    let (_, gp) = model::loss_and_gradients::<f64, ChaCha8Rng>(&p, &ex, &patch, 0.0, None).unwrap();
    assert!(zero(&gp, Group::TemporalHead));
}

/// The directional derivative of the batch-mean loss, by central differences,
/// matches the mean of per-clip analytic gradients projected on the direction.
#[test]
fn batch_gradient_is_mean_of_clip_gradients() {
    let cfg = small(1);
    let p = Params::<f64>::init(&cfg, 16).unwrap();
    let batch: Vec<(Example<f64>, MaskPlan)> = (0..3)
        .map(|i| {
            (
                example(&cfg, 2, 20 + i),
                MaskPlan::segments(2, [i as usize % 2]).unwrap(),
            )
        })
        .collect();
    let mean_loss = |q: &Params<f64>| {
        batch
            .iter()
            .map(|(ex, plan)| {
                model::loss_and_gradients::<f64, ChaCha8Rng>(q, ex, plan, 0.75, None)
                    .unwrap()
                    .0
                    .total
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let mut mean_grad = vec![0.0; p.data.len()];
    for (ex, plan) in &batch {
        let (_, g) =
            model::loss_and_gradients::<f64, ChaCha8Rng>(&p, ex, plan, 0.75, None).unwrap();
        for (m, x) in mean_grad.iter_mut().zip(&g.data) {
            *m += x / batch.len() as f64;
        }
    }
    let dir = normal(&mut ChaCha8Rng::seed_from_u64(30), p.data.len());
    let h = 1e-5;
    let shifted = |s: f64| {
        let mut q = p.clone();
        q.data.iter_mut().zip(&dir).for_each(|(x, v)| *x += s * v);
        q
    };
    let fd = (mean_loss(&shifted(h)) - mean_loss(&shifted(-h))) / (2.0 * h);
    let analytic: f64 = mean_grad.iter().zip(&dir).map(|(g, v)| g * v).sum();
    assert!(
        (fd - analytic).abs() <= 1e-6 * analytic.abs().max(1.0),
        "{fd} vs {analytic}"
    );
}

#[test]
fn forward_and_gradients_are_bitwise_repeatable() {
    let cfg = small(2);
    let p = Params::<f32>::init(&cfg, 17).unwrap();
    let ex64 = example(&cfg, 3, 18);
    let ex = Example {
        patches: ex64.patches.iter().map(|&x| x as f32).collect(),
        n_segments: 3,
        targets: ex64.targets,
    };
    let plan = MaskPlan::segments(3, [1]).unwrap();
    let (la, ga) =
        model::loss_and_gradients::<f32, ChaCha8Rng>(&p, &ex, &plan, 0.75, None).unwrap();
    let (lb, gb) =
        model::loss_and_gradients::<f32, ChaCha8Rng>(&p, &ex, &plan, 0.75, None).unwrap();
    assert_eq!(la, lb);
    assert!(ga
        .data
        .iter()
        .zip(&gb.data)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn paper_scale_encoder_has_about_89m_parameters() {
    let cfg = ModelConfig::paper_scale();
    let count = cfg.parameter_count();
    let encoder = count.encoder as f64;
    assert!((encoder / 89e6 - 1.0).abs() <= 0.05, "encoder {encoder}");
    let enumerated: usize = cfg.layout().tensors.iter().map(|t| t.len()).sum();
    assert_eq!(enumerated, count.total());
    assert_eq!(enumerated, cfg.layout().total);
    let mut bare = cfg.clone();
    bare.n_layers = 0;
    let c0 = bare.parameter_count();
    assert_eq!(c0.total(), c0.embedding + c0.heads);
    assert_eq!(c0.embedding, count.embedding);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logit_shapes_follow_geometry(
        n_seg in 1usize..4,
        r_s in 1usize..4,
        r_t in 1usize..4,
        k_s in 2usize..7,
        k_t in 2usize..7,
        seed in 0u64..1000,
    ) {
        let cfg = ModelConfig { r_s, r_t, k_s, k_t, n_max: 4, ..small(1) };
        let p = Params::<f64>::init(&cfg, seed).unwrap();
        let tokens = normal(&mut ChaCha8Rng::seed_from_u64(seed), n_seg * r_s * cfg.d_model);
        let out = model::encode(&p, tokens).unwrap();
        prop_assert_eq!(out.n_segments(), n_seg);
        prop_assert_eq!(model::spectral_logits(&out, &p).len(), n_seg * r_s * k_s);
        prop_assert_eq!(model::temporal_logits(&out, &p).len(), n_seg * r_t * k_t);
        prop_assert_eq!(out.pooled.len(), n_seg * cfg.d_model);
    }
}
