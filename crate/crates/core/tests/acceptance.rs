//! Acceptance suite. Runs every criterion in order and prints one line each;
//! exits non-zero if any fails. Pass a substring to run a subset.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ultras::config::RunConfig;
use ultras::data::{self, CorpusManifest, ManifestEntry, SynthClass};
use ultras::frontend::{self, FrontendConfig};
use ultras::gradcheck;
use ultras::gridding::{self, GridConfig};
use ultras::masking::{self, MaskConfig};
use ultras::model::{self, Group, ModelConfig, Params};
use ultras::probe;
use ultras::quantizer::{self, CodebookSource, KMeansParams, TargetSet};
use ultras::rng;
use ultras::trainer::{self, Checkpoint, Phase, RunOptions, ScheduleConfig};

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> std::result::Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_s,
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()),
    )
}

fn geometry() -> Check {
    let fc = FrontendConfig::default();
    let grid = GridConfig::default();
    let spec = data::SynthSpec::default();
    let pcm = spec
        .render(SynthClass::Chirp, 0)
        .map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let clip = frontend::clip_from_pcm(&pcm, &fc).map_err(|e| e.to_string())?;
    let mel = frontend::compute_logmel(&clip, &fc).map_err(|e| e.to_string())?;
    let seg = gridding::segment(&mel, &grid).map_err(|e| e.to_string())?;
    let patches = gridding::patchify_spectral(&seg, &grid).map_err(|e| e.to_string())?;
    let frames = gridding::frame_temporal(&seg, &grid).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    ensure(
        (mel.n_mels, mel.n_frames) == (128, 800),
        format!("spectrogram {}x{}", mel.n_mels, mel.n_frames),
    )?;
    ensure(seg.len() == 50, format!("{} segments", seg.len()))?;
    ensure(patches.len() == 400, format!("{} patches", patches.len()))?;
    ensure(
        patches
            .iter()
            .all(|p| (p.values.rows, p.values.cols) == (16, 16)),
        "patch shape",
    )?;
    ensure(frames.len() == 400, format!("{} frames", frames.len()))?;
    ensure(
        frames
            .iter()
            .all(|f| (f.values.rows, f.values.cols) == (128, 2)),
        "frame shape",
    )?;
    within(elapsed, 1.0)?;
    Ok(format!(
        "128x800, 50 segments, 400 patches, 400 frames in {:.0} ms",
        elapsed.as_secs_f64() * 1e3
    ))
}

fn mask_statistics() -> Check {
    let (n, draws) = (50usize, 100_000usize);
    let cfg = MaskConfig::default();
    let t0 = Instant::now();
    let mut r = rng::stream(20, &[rng::purpose::MASK]);
    let mut counts = vec![0usize; n];
    for _ in 0..draws {
        let plan = masking::sample_segment_mask(n, &cfg, &mut r).map_err(|e| e.to_string())?;
        for &i in &plan.masked {
            counts[i] += 1;
        }
    }
    let elapsed = t0.elapsed();
    // q_1 = p, q_n = p + (1 - p) q_{n-1} p'
    let (p, pp) = (0.6, 0.2);
    let mut q = vec![p];
    for i in 1..n {
        q.push(p + (1.0 - p) * q[i - 1] * pp);
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let e = counts[i] as f64 / draws as f64;
        let sigma = (q[i] * (1.0 - q[i]) / draws as f64).sqrt();
        worst = worst.max((e - q[i]).abs() / sigma);
    }
    let fraction = counts.iter().sum::<usize>() as f64 / (n * draws) as f64;
    let fixed = p / (1.0 - (1.0 - p) * pp);
    ensure(worst <= 3.0, format!("max |z| {worst:.2}"))?;
    ensure(
        (fraction - 0.6522).abs() <= 0.005,
        format!("fraction {fraction:.5}"),
    )?;
    ensure((fixed - 0.65217391).abs() < 1e-8, "fixed point")?;
    within(elapsed, 10.0)?;
    Ok(format!(
        "max |z| {worst:.2}, fraction {fraction:.5} vs {fixed:.5}"
    ))
}

fn gradient_check() -> Check {
    let cfg = gradcheck::tiny_config();
    ensure(
        (
            cfg.d_model,
            cfg.n_layers,
            cfg.n_heads,
            cfg.r_s,
            cfg.r_t,
            cfg.k_s,
            cfg.k_t,
        ) == (8, 1, 2, 2, 2, 5, 5),
        "tiny config shape",
    )?;
    let t0 = Instant::now();
    let r = gradcheck::check_gradients(&cfg, 2, 0.75, 1e-5, 3).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    ensure(
        r.max_rel_error < 1e-4,
        format!(
            "max rel error {:.3e} at {}",
            r.max_rel_error, r.worst_tensor
        ),
    )?;
    within(elapsed, 60.0)?;
    Ok(format!(
        "{} parameters, max rel error {:.2e}",
        r.n_params, r.max_rel_error
    ))
}

fn loss_floors() -> Check {
    let mut cfg = ModelConfig::desk_scale();
    cfg.k_s = 100;
    cfg.k_t = 500;
    let params = Params::<f64>::init(&cfg, 4).map_err(|e| e.to_string())?;
    let mask = MaskConfig::default();
    let lambda = 0.75;
    let (mut s, mut t) = (0.0, 0.0);
    let clips = 4;
    let mut identity_err: f64 = 0.0;
    for c in 0..clips {
        let mut r = ChaCha8Rng::seed_from_u64(c);
        let n_seg = cfg.n_max;
        let patches: Vec<f64> = (0..n_seg * cfg.r_s * cfg.patch_dim)
            .map(|_| r.sample(StandardNormal))
            .collect();
        let targets = TargetSet {
            n_segments: n_seg,
            r_s: cfg.r_s,
            r_t: cfg.r_t,
            spectral: (0..n_seg * cfg.r_s)
                .map(|_| r.gen_range(0..cfg.k_s as u32))
                .collect(),
            temporal: (0..n_seg * cfg.r_t)
                .map(|_| r.gen_range(0..cfg.k_t as u32))
                .collect(),
        };
        let ex = model::Example {
            patches,
            n_segments: n_seg,
            targets,
        };
        let plan = masking::sample_segment_mask(n_seg, &mask, &mut r).map_err(|e| e.to_string())?;
        let (loss, _) =
            model::loss_and_gradients::<f64, ChaCha8Rng>(&params, &ex, &plan, lambda, None)
                .map_err(|e| e.to_string())?;
        identity_err = identity_err
            .max((loss.total - (lambda * loss.temporal + (1.0 - lambda) * loss.spectral)).abs());
        s += loss.spectral / clips as f64;
        t += loss.temporal / clips as f64;
    }
    let (fs, ft) = ((cfg.k_s as f64).ln(), (cfg.k_t as f64).ln());
    ensure(
        (s / fs - 1.0).abs() <= 0.1,
        format!("spectral {s:.4} vs ln K_s {fs:.4}"),
    )?;
    ensure(
        (t / ft - 1.0).abs() <= 0.1,
        format!("temporal {t:.4} vs ln K_t {ft:.4}"),
    )?;
    ensure(
        identity_err <= 1e-12,
        format!("total identity off by {identity_err:e}"),
    )?;
    Ok(format!(
        "spectral {s:.3}/{fs:.3}, temporal {t:.3}/{ft:.3}, identity {identity_err:.1e}"
    ))
}

struct Trained {
    params: Params<f32>,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

fn overfit_run() -> (&'static Trained, Option<Check>) {
    let mut verdict = None;
    let trained = TRAINED.get_or_init(|| {
        let run = RunConfig::desk_scale();
        let t0 = Instant::now();
        let desk = common::desk_corpus(&run, 2);
        let outcome =
            trainer::run_pretraining(&desk.cfg, &desk.corpus, "acceptance", RunOptions::default());
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => panic!("pretraining failed: {e}"),
        };
        let elapsed = t0.elapsed();
        let plan = &desk.cfg.plan;
        let floor = plan.lambda * (desk.cfg.model.k_t as f64).ln()
            + (1.0 - plan.lambda) * (desk.cfg.model.k_s as f64).ln();
        let last = outcome.log.last().expect("log").total;
        let acc =
            trainer::masked_spectral_accuracy(&outcome.params, &desk.corpus, &desk.cfg.mask, 99)
                .unwrap();
        verdict = Some((|| {
            ensure(desk.corpus.len() == 8, "corpus size")?;
            ensure(
                (plan.phase_a_steps, plan.joint_steps) == (200, 300),
                "step counts",
            )?;
            ensure(
                last < 0.25 * floor,
                format!("final loss {last:.4} vs floor {floor:.4}"),
            )?;
            ensure(acc > 0.9, format!("masked accuracy {acc:.4}"))?;
            within(elapsed, 600.0)?;
            Ok(format!(
                "final loss {last:.4} = {:.3} of floor, masked accuracy {:.1}%, {:.0}s",
                last / floor,
                acc * 100.0,
                elapsed.as_secs_f64()
            ))
        })());
        Trained {
            params: outcome.params,
        }
    });
    (trained, verdict)
}

fn overfit() -> Check {
    let (_, verdict) = overfit_run();
    verdict.unwrap_or_else(|| Ok("already trained".into()))
}

fn temporal_head_zero(p: &Params<f32>) -> bool {
    p.layout
        .group_ranges(Group::TemporalHead)
        .all(|r| p.data[r].iter().all(|&g| g == 0.0))
}

fn two_phase_contract() -> Check {
    let mut run = common::short_run(4);
    run.plan.phase_a_steps = 4;
    run.plan.joint_steps = 3;
    let desk = common::desk_corpus(&run, 2);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = run.plan.phase_a_steps;
    let b1 = desk.cfg.optimizer.beta1;
    let b2 = desk.cfg.optimizer.beta2;
    let mut problems = Vec::new();
    let mut boundary_hash = String::new();
    let mut first_b: Option<Params<f32>> = None;
    let mut observer = |e: &trainer::StepEvent<'_>| {
        if e.phase == Phase::A && !(temporal_head_zero(e.grads) && temporal_head_zero(e.applied)) {
            problems.push(format!("temporal gradient at step {}", e.step));
        }
        if e.step == a {
            boundary_hash = trainer::carried_hash(e.params);
        }
        if e.step == a + 1 {
            if e.optim.step != 1 {
                problems.push(format!("optimizer step {} after reset", e.optim.step));
            }
            let fresh =
                e.applied
                    .data
                    .iter()
                    .zip(&e.optim.m)
                    .zip(&e.optim.v)
                    .all(|((&g, &m), &v)| {
                        let g = g as f64;
                        m == ((1.0 - b1) * g) as f32 && v == ((1.0 - b2) * g * g) as f32
                    });
            if !fresh {
                problems.push("moments not reset at the boundary".into());
            }
            first_b = Some(e.params.clone());
        }
    };
    trainer::run_pretraining(
        &desk.cfg,
        &desk.corpus,
        "contract",
        RunOptions {
            out_dir: Some(dir.path().to_path_buf()),
            observer: Some(&mut observer),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(problems.is_empty(), problems.join("; "))?;
    let ck = trainer::load_checkpoint(&trainer::checkpoint_dir(dir.path(), a))
        .map_err(|e| e.to_string())?;
    ensure(
        trainer::carried_hash(&ck.params) == boundary_hash,
        "boundary checkpoint hash differs",
    )?;
    let resumed = trainer::run_pretraining(
        &desk.cfg,
        &desk.corpus,
        "contract",
        RunOptions {
            resume: Some(ck),
            stop_after: Some(a + 1),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let expected = first_b.ok_or("no phase-B step observed")?;
    ensure(
        resumed
            .params
            .data
            .iter()
            .map(|x| x.to_bits())
            .eq(expected.data.iter().map(|x| x.to_bits())),
        "phase B did not start from the carried parameters",
    )?;
    Ok(format!(
        "{a} phase-A steps with zero temporal gradients, carried hash {}",
        &boundary_hash[..12]
    ))
}

fn schedule_exactness() -> Check {
    for total in [1000u64, 100_000, 150_000, 250_000] {
        let s = ScheduleConfig::default().with_total(total);
        let at = |k: u64| trainer::lr_at(k, &s).unwrap();
        ensure(at(0) == 1e-6, format!("T={total}: lr(0) = {:e}", at(0)))?;
        ensure(
            at(total / 10) == 1e-4,
            format!("T={total}: lr(0.1T) = {:e}", at(total / 10)),
        )?;
        ensure(
            at(total) == 1e-6,
            format!("T={total}: lr(T) = {:e}", at(total)),
        )?;
        let w = 0.1 * total as f64;
        let left = trainer::lr_at_time(w - 1e-6, &s).unwrap();
        let right = trainer::lr_at_time(w + 1e-6, &s).unwrap();
        ensure(
            (left - right).abs() <= 1e-12,
            format!("T={total}: jump {:e}", left - right),
        )?;
    }
    Ok("lr(0)=1e-6, lr(0.1T)=1e-4, lr(T)=1e-6 exact for four horizons".into())
}

/// Minimum inertia over every partition of `pts` into at most `k` clusters.
fn exhaustive_inertia(pts: &[Vec<f64>], k: usize) -> f64 {
    let n = pts.len();
    let dim = pts[0].len();
    let mut labels = vec![0usize; n];
    let mut best = f64::INFINITY;
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in pts.iter().zip(&labels) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut inertia = 0.0;
        for (p, &l) in pts.iter().zip(&labels) {
            for (d, x) in p.iter().enumerate() {
                let c = sums[l][d] / counts[l] as f64;
                inertia += (x - c) * (x - c);
            }
        }
        best = best.min(inertia);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Up to 12 points around `k` centres at least 8 units apart, unit spread.
fn clustered_points(r: &mut ChaCha8Rng, n: usize, k: usize, dim: usize) -> Vec<Vec<f32>> {
    let mut centres: Vec<Vec<f32>> = Vec::new();
    while centres.len() < k {
        let c: Vec<f32> = (0..dim).map(|_| r.gen_range(-20.0f32..20.0)).collect();
        if centres.iter().all(|o| {
            o.iter()
                .zip(&c)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f32>()
                >= 64.0
        }) {
            centres.push(c);
        }
    }
    (0..n)
        .map(|i| {
            centres[i % k]
                .iter()
                .map(|&c| c + r.sample::<f32, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn kmeans_oracle() -> Check {
    let mut worst_gap = f64::NEG_INFINITY;
    let mut cases = vec![(
        vec![
            vec![0.0f32, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 10.0],
            vec![10.0, 11.0],
        ],
        2usize,
    )];
    for case in 0..200u64 {
        let mut r = ChaCha8Rng::seed_from_u64(case);
        let k = r.gen_range(1..=3usize);
        let n = r.gen_range(k.max(4)..=12);
        let dim = r.gen_range(1..=3);
        cases.push((clustered_points(&mut r, n, k, dim), k));
    }
    for (case, (pts, k)) in cases.iter().enumerate() {
        let fit = quantizer::fit_kmeans(
            pts,
            &KMeansParams {
                k: *k,
                seed: case as u64,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let pts64: Vec<Vec<f64>> = pts
            .iter()
            .map(|p| p.iter().map(|&x| x as f64).collect())
            .collect();
        let oracle = exhaustive_inertia(&pts64, *k);
        let gap = fit.inertia - oracle;
        worst_gap = worst_gap.max(gap);
        ensure(
            gap <= 1e-9,
            format!(
                "case {case}: n={} k={k} inertia {} vs optimum {oracle}",
                pts.len(),
                fit.inertia
            ),
        )?;
    }
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let train: Vec<Vec<f32>> = (0..200)
        .map(|_| (0..6).map(|_| r.sample(StandardNormal)).collect())
        .collect();
    let cb = quantizer::fit_codebook(
        &train,
        CodebookSource::SpectralPatch,
        &KMeansParams {
            k: 12,
            seed: 1,
            ..Default::default()
        },
        "oracle",
    )
    .map_err(|e| e.to_string())?;
    for q in 0..1000 {
        let v: Vec<f32> = (0..6)
            .map(|_| r.sample::<f32, _>(StandardNormal) * 2.0)
            .collect();
        let brute = (0..cb.k)
            .map(|i| {
                let d: f64 = cb
                    .centroid(i)
                    .iter()
                    .zip(&v)
                    .map(|(&c, &x)| (c as f64 - x as f64).powi(2))
                    .sum();
                (d, i)
            })
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a })
            .1;
        let got = quantizer::assign(&v, &cb).map_err(|e| e.to_string())?;
        ensure(
            got == brute,
            format!("query {q}: assign {got}, brute force {brute}"),
        )?;
    }
    Ok(format!(
        "{} exhaustive cases (worst gap {worst_gap:.1e}), 1000 assign queries",
        cases.len()
    ))
}

fn probe_protocol() -> Check {
    let (trained, _) = overfit_run();
    let run = RunConfig::desk_scale();
    let t0 = Instant::now();
    let (mels, labels) = common::synth_mels(&run.synth, 50, &run.frontend);
    let clips: Vec<Vec<f32>> = mels
        .iter()
        .map(|m| gridding::patch_vectors(m, &run.grid).map(|p| p.concat()))
        .collect::<ultras::Result<_>>()
        .map_err(|e| e.to_string())?;
    let folds = probe::stratified_folds(&labels, 5, 0).map_err(|e| e.to_string())?;
    let before: Vec<u32> = trained.params.data.iter().map(|x| x.to_bits()).collect();
    let (_, report) = probe::train_probe(&trained.params, &clips, &labels, &folds, &run.probe)
        .map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    ensure(
        trained
            .params
            .data
            .iter()
            .map(|x| x.to_bits())
            .eq(before.iter().copied()),
        "encoder parameters changed",
    )?;
    let means: Vec<Vec<f64>> = mels.iter().map(|m| m.mean_column()).collect();
    let baseline = probe::kfold_with(&means, &labels, &folds, |tx, ty, sx, _| {
        probe::nearest_centroid(tx, ty, sx)
    })
    .map_err(|e| e.to_string())?;
    ensure(clips.len() == 200, "corpus size")?;
    ensure(
        baseline.mean_accuracy > 0.9,
        format!("baseline {:.3}", baseline.mean_accuracy),
    )?;
    ensure(
        report.mean_accuracy > 0.95,
        format!("probe {:.3}", report.mean_accuracy),
    )?;
    within(elapsed, 300.0)?;
    Ok(format!(
        "probe {:.1}%, mel-centroid baseline {:.1}%, encoder bit-identical, {:.0}s",
        report.mean_accuracy * 100.0,
        baseline.mean_accuracy * 100.0,
        elapsed.as_secs_f64()
    ))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_default()
}

fn determinism_and_resume() -> Check {
    let mut run = common::short_run(4);
    run.plan.phase_a_steps = 4;
    run.plan.joint_steps = 6;
    run.plan.checkpoint_every = 2;
    let desk = common::desk_corpus(&run, 2);
    let train = |dir: &Path, resume: Option<Checkpoint>, stop: Option<u64>| {
        trainer::run_pretraining(
            &desk.cfg,
            &desk.corpus,
            "resume",
            RunOptions {
                out_dir: Some(dir.to_path_buf()),
                resume,
                stop_after: stop,
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())
    };
    let first = tempfile::tempdir().map_err(|e| e.to_string())?;
    let second = tempfile::tempdir().map_err(|e| e.to_string())?;
    let full = train(first.path(), None, None)?;
    train(second.path(), None, None)?;
    let log = read(&first.path().join(trainer::LOG_FILE));
    ensure(
        !log.is_empty() && log == read(&second.path().join(trainer::LOG_FILE)),
        "logs differ between runs",
    )?;
    let bits = |p: &Params<f32>| p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for ck_path in &full.checkpoints {
        let ck = trainer::load_checkpoint(ck_path).map_err(|e| e.to_string())?;
        let step = ck.step;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::fs::write(dir.path().join(trainer::LOG_FILE), &log).map_err(|e| e.to_string())?;
        let out = train(dir.path(), Some(ck), None)?;
        ensure(
            read(&dir.path().join(trainer::LOG_FILE)) == log,
            format!("log differs after resuming at {step}"),
        )?;
        ensure(
            bits(&out.params) == bits(&full.params),
            format!("parameters differ after resuming at {step}"),
        )?;
    }
    // interruption mid-interval: resume from the latest checkpoint in place
    let third = tempfile::tempdir().map_err(|e| e.to_string())?;
    train(third.path(), None, Some(7))?;
    let latest = trainer::latest_checkpoint(third.path()).ok_or("no checkpoint written")?;
    let ck = trainer::load_checkpoint(&latest).map_err(|e| e.to_string())?;
    let out = train(third.path(), Some(ck), None)?;
    ensure(
        read(&third.path().join(trainer::LOG_FILE)) == log,
        "log differs after interruption",
    )?;
    ensure(
        bits(&out.params) == bits(&full.params),
        "parameters differ after interruption",
    )?;
    Ok(format!(
        "identical logs; resumed from {} checkpoints and one interruption",
        full.checkpoints.len()
    ))
}

fn round_trips() -> Check {
    let run = RunConfig::desk_scale();
    let (mels, _) = common::synth_mels(&run.synth, 1, &run.frontend);
    let mel = &mels[1];
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let seg = gridding::segment(mel, &run.grid).map_err(|e| e.to_string())?;
    let back = seg.concatenate().map_err(|e| e.to_string())?;
    ensure(
        bits(&back.values) == bits(&mel.values),
        "gridding reconstruction",
    )?;
    let mel_back = data::decode_mel(&data::encode_mel(mel)).map_err(|e| e.to_string())?;
    ensure(
        bits(&mel_back.values) == bits(&mel.values),
        "mel cache blob",
    )?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let books = ultras::pipeline::fit_codebooks(&mels, &run.grid, 16, 8, &run.codebooks, "rt")
        .map_err(|e| e.to_string())?;
    let cb_path = dir.path().join("spectral.ulcb");
    quantizer::save_codebook(&books.spectral, &cb_path).map_err(|e| e.to_string())?;
    let cb = quantizer::load_codebook(&cb_path).map_err(|e| e.to_string())?;
    ensure(
        bits(&cb.centroids) == bits(&books.spectral.centroids) && cb == books.spectral,
        "codebook",
    )?;

    let cfg = trainer::PretrainConfig::default();
    let mut params = Params::<f32>::init(&cfg.model, 5).map_err(|e| e.to_string())?;
    params.data[0] = -0.0;
    params.data[1] = f32::MIN_POSITIVE / 4.0;
    let mut optim = trainer::OptimState::new(params.data.len());
    optim.step = 17;
    let mut r = ChaCha8Rng::seed_from_u64(6);
    optim
        .m
        .iter_mut()
        .for_each(|x| *x = r.sample(StandardNormal));
    optim.v.iter_mut().for_each(|x| *x = r.gen::<f32>());
    let ck = Checkpoint {
        config: cfg,
        binding: "rt".into(),
        step: 17,
        params,
        optim,
    };
    let ck_path = dir.path().join("ck");
    trainer::save_checkpoint(&ck_path, &ck).map_err(|e| e.to_string())?;
    let loaded = trainer::load_checkpoint(&ck_path).map_err(|e| e.to_string())?;
    ensure(
        bits(&loaded.params.data) == bits(&ck.params.data)
            && bits(&loaded.optim.m) == bits(&ck.optim.m)
            && bits(&loaded.optim.v) == bits(&ck.optim.v)
            && loaded.step == ck.step
            && loaded.config == ck.config
            && loaded.binding == ck.binding,
        "checkpoint",
    )?;

    let manifest = CorpusManifest {
        root: dir.path().to_path_buf(),
        entries: (0..5)
            .map(|i| ManifestEntry {
                id: format!("clip {i}"),
                path: format!("audio/{i}.wav").into(),
                label: (i % 2 == 0).then_some(i as u32),
                fold: (i != 3).then_some(i as u32 % 2),
            })
            .collect(),
    };
    for e in &manifest.entries {
        let p = dir.path().join(&e.path);
        std::fs::create_dir_all(p.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&p, b"").map_err(|e| e.to_string())?;
    }
    let mpath = dir.path().join("manifest.tsv");
    manifest.write(&mpath).map_err(|e| e.to_string())?;
    ensure(
        CorpusManifest::read(&mpath).map_err(|e| e.to_string())? == manifest,
        "manifest",
    )?;
    Ok("gridding, mel blob, codebook, checkpoint and manifest bitwise lossless".into())
}

fn main() {
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let criteria: [(&str, fn() -> Check); 11] = [
        ("geometry", geometry),
        ("mask statistics", mask_statistics),
        ("gradient check", gradient_check),
        ("loss floors", loss_floors),
        ("overfit", overfit),
        ("two-phase contract", two_phase_contract),
        ("schedule exactness", schedule_exactness),
        ("k-means oracle", kmeans_oracle),
        ("probe protocol", probe_protocol),
        ("determinism and resume", determinism_and_resume),
        ("round-trips", round_trips),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!(
                "criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]",
                i + 1
            ),
            Err(detail) => {
                failed += 1;
                println!(
                    "criterion {:>2} {name}: FAIL ({detail}) [{secs:.1}s]",
                    i + 1
                );
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
