//! Frozen-encoder probing: softmax layer weights over mean-pooled block
//! outputs, a small classification head, and stratified k-fold evaluation.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::hash_json;
use crate::model::{self, ops, EncodeOutput, Params, Real};
use crate::objective::cross_entropy;
use crate::rng::{self, purpose};
use crate::trainer::{optimizer_step, OptimState, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    Linear,
    /// One hidden GELU layer of width `hidden`.
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_classes: usize,
    pub head: HeadKind,
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            head: HeadKind::Linear,
            hidden: 64,
            epochs: 50,
            lr: 5e-3,
            lr_final: 1e-6,
            batch_size: 16,
            folds: 5,
            seed: 0,
            weight_decay: 0.05,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config("probe needs at least two classes".into()));
        }
        if self.folds == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "folds and batch_size must be positive".into(),
            ));
        }
        if self.head == HeadKind::Mlp && self.hidden == 0 {
            return Err(Error::Config(
                "mlp head needs a positive hidden width".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr_final >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(
                "probe learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub raw: Vec<f64>,
}

impl LayerWeights {
    pub fn uniform(n_layers: usize) -> Self {
        Self {
            raw: vec![0.0; n_layers],
        }
    }

    pub fn effective(&self) -> Vec<f64> {
        let mut w = self.raw.clone();
        ops::softmax_in_place(&mut w);
        w
    }
}

fn mean_rows<T: Real>(x: &[T], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut out = vec![0.0; d];
    for row in x.chunks_exact(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v.to_f64().unwrap();
        }
    }
    out.iter_mut().for_each(|o| *o /= n.max(1) as f64);
    out
}

/// Token mean of every encoder block output, `n_layers × d_model`.
pub fn pooled_layers<T: Real>(out: &EncodeOutput<T>) -> Vec<Vec<f64>> {
    out.per_layer
        .iter()
        .map(|h| mean_rows(h, out.d_model))
        .collect()
}

/// Softmax-weighted sum of the per-layer mean-pooled outputs.
pub fn aggregate<T: Real>(out: &EncodeOutput<T>, w: &LayerWeights) -> Result<Vec<f64>> {
    mix(&pooled_layers(out), w)
}

fn mix(layers: &[Vec<f64>], w: &LayerWeights) -> Result<Vec<f64>> {
    if layers.len() != w.raw.len() || layers.is_empty() {
        return Err(Error::Geometry(format!(
            "{} layer weights for {} layers",
            w.raw.len(),
            layers.len()
        )));
    }
    let eff = w.effective();
    let mut e = vec![0.0; layers[0].len()];
    for (h, &a) in layers.iter().zip(&eff) {
        for (o, v) in e.iter_mut().zip(h) {
            *o += a * v;
        }
    }
    Ok(e)
}

/// Per-layer pooled features of one clip, computed without masking.
pub fn clip_features(params: &Params<f32>, patches: &[f32]) -> Result<Vec<Vec<f64>>> {
    let out = model::encode(params, model::embed(params, patches, &BTreeSet::new())?)?;
    if out.per_layer.is_empty() {
        return Err(Error::Config(
            "probing needs at least one encoder layer".into(),
        ));
    }
    Ok(pooled_layers(&out))
}

pub fn extract_features(params: &Params<f32>, clips: &[Vec<f32>]) -> Result<Vec<Vec<Vec<f64>>>> {
    clips.par_iter().map(|p| clip_features(params, p)).collect()
}

/// Head weights stored `[in, out]`, like the encoder's linear maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: LayerWeights,
    pub head: HeadKind,
    pub d: usize,
    pub hidden: usize,
    pub n_classes: usize,
    /// Per-layer, per-dimension standardization fitted on the training split.
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

struct HeadIdx {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

impl ProbeModel {
    fn layers(&self) -> usize {
        self.weights.raw.len()
    }

    fn idx(&self) -> HeadIdx {
        let (d, h, k) = (self.d, self.hidden, self.n_classes);
        let base = self.layers();
        match self.head {
            HeadKind::Linear => HeadIdx {
                w1: base..base + d * k,
                b1: base + d * k..base + d * k + k,
                w2: 0..0,
                b2: 0..0,
            },
            HeadKind::Mlp => {
                let w1 = base..base + d * h;
                let b1 = w1.end..w1.end + h;
                let w2 = b1.end..b1.end + h * k;
                let b2 = w2.end..w2.end + k;
                HeadIdx { w1, b1, w2, b2 }
            }
        }
    }

    fn standardized(&self, layers: &[Vec<f64>]) -> Vec<Vec<f64>> {
        layers
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(h, (m, s))| {
                h.iter()
                    .zip(m.iter().zip(s))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }

    /// Class logits for one clip's per-layer features.
    pub fn logits(&self, layers: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.forward(layers)?.logits)
    }

    pub fn predict(&self, layers: &[Vec<f64>]) -> Result<usize> {
        let l = self.logits(layers)?;
        Ok(argmax(&l))
    }

    fn forward(&self, layers: &[Vec<f64>]) -> Result<Trace> {
        let raw = self.standardized(layers);
        let w = LayerWeights {
            raw: self.theta[..self.layers()].to_vec(),
        };
        let e = mix(&raw, &w)?;
        let ix = self.idx();
        let t = &self.theta;
        let affine = |x: &[f64], w: &[f64], b: &[f64], out: usize| {
            let mut y = b.to_vec();
            ops::matmul_acc(x, w, &mut y, 1, x.len(), out);
            y
        };
        Ok(match self.head {
            HeadKind::Linear => Trace {
                logits: affine(&e, &t[ix.w1], &t[ix.b1], self.n_classes),
                u: Vec::new(),
                h: Vec::new(),
                e,
                layers: raw,
            },
            HeadKind::Mlp => {
                let u = affine(&e, &t[ix.w1], &t[ix.b1], self.hidden);
                let h: Vec<f64> = u.iter().map(|&v| ops::gelu(v)).collect();
                Trace {
                    logits: affine(&h, &t[ix.w2], &t[ix.b2], self.n_classes),
                    u,
                    h,
                    e,
                    layers: raw,
                }
            }
        })
    }

    /// Adds the cross-entropy gradient of one clip into `g`; returns the loss.
    fn accumulate(
        &self,
        layers: &[Vec<f64>],
        label: usize,
        scale: f64,
        g: &mut [f64],
    ) -> Result<f64> {
        let tr = self.forward(layers)?;
        let ix = self.idx();
        let t = &self.theta;
        let loss = cross_entropy(&tr.logits, label);
        let mut dl = tr.logits.clone();
        ops::softmax_in_place(&mut dl);
        dl[label] -= 1.0;
        dl.iter_mut().for_each(|v| *v *= scale);
        let outer = |x: &[f64], dy: &[f64], gw: &mut [f64]| {
            for (i, &xi) in x.iter().enumerate() {
                for (j, &d) in dy.iter().enumerate() {
                    gw[i * dy.len() + j] += xi * d;
                }
            }
        };
        let back = |dy: &[f64], w: &[f64], n_in: usize| -> Vec<f64> {
            (0..n_in)
                .map(|i| {
                    dy.iter()
                        .enumerate()
                        .map(|(j, &d)| d * w[i * dy.len() + j])
                        .sum()
                })
                .collect()
        };
        let de = match self.head {
            HeadKind::Linear => {
                outer(&tr.e, &dl, &mut g[ix.w1.clone()]);
                g[ix.b1.clone()]
                    .iter_mut()
                    .zip(&dl)
                    .for_each(|(a, b)| *a += b);
                back(&dl, &t[ix.w1.clone()], self.d)
            }
            HeadKind::Mlp => {
                outer(&tr.h, &dl, &mut g[ix.w2.clone()]);
                g[ix.b2.clone()]
                    .iter_mut()
                    .zip(&dl)
                    .for_each(|(a, b)| *a += b);
                let mut dh = back(&dl, &t[ix.w2.clone()], self.hidden);
                dh.iter_mut()
                    .zip(&tr.u)
                    .for_each(|(d, &u)| *d *= ops::gelu_grad(u));
                outer(&tr.e, &dh, &mut g[ix.w1.clone()]);
                g[ix.b1.clone()]
                    .iter_mut()
                    .zip(&dh)
                    .for_each(|(a, b)| *a += b);
                back(&dh, &t[ix.w1.clone()], self.d)
            }
        };
        // softmax layer weights
        let eff = LayerWeights {
            raw: t[..self.layers()].to_vec(),
        }
        .effective();
        let dw: Vec<f64> = tr
            .layers
            .iter()
            .map(|h| h.iter().zip(&de).map(|(a, b)| a * b).sum())
            .collect();
        let dot: f64 = eff.iter().zip(&dw).map(|(a, b)| a * b).sum();
        for (l, (a, b)) in eff.iter().zip(&dw).enumerate() {
            g[l] += a * (b - dot);
        }
        Ok(loss)
    }
}

struct Trace {
    logits: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
    e: Vec<f64>,
    layers: Vec<Vec<f64>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn check_labels(labels: &[u32], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::Config(format!(
            "label {bad} outside [0, {n_classes})"
        )));
    }
    Ok(())
}

/// Cosine decay from `lr` to `lr_final` over `total` updates.
pub fn cosine_lr(lr: f64, lr_final: f64, t: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let f = t as f64 / (total - 1) as f64;
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * f).cos())
}

/// Trains layer weights and head on precomputed per-layer features.
/// `stream` separates the RNG of independent fits (e.g. folds).
pub fn fit_probe(
    features: &[Vec<Vec<f64>>],
    labels: &[u32],
    cfg: &ProbeConfig,
    stream: u64,
) -> Result<ProbeModel> {
    cfg.validate()?;
    check_labels(labels, cfg.n_classes)?;
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Insufficient("probe needs one label per clip".into()));
    }
    let n_layers = features[0].len();
    let d = features[0].first().map_or(0, Vec::len);
    if n_layers == 0
        || d == 0
        || features
            .iter()
            .any(|f| f.len() != n_layers || f.iter().any(|h| h.len() != d))
    {
        return Err(Error::Geometry("inconsistent probe features".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![vec![0.0; d]; n_layers];
    let mut std = vec![vec![0.0; d]; n_layers];
    for f in features {
        for (m, h) in mean.iter_mut().zip(f) {
            m.iter_mut().zip(h).for_each(|(a, b)| *a += b / n);
        }
    }
    for f in features {
        for ((s, m), h) in std.iter_mut().zip(&mean).zip(f) {
            for ((a, mu), v) in s.iter_mut().zip(m).zip(h) {
                *a += (v - mu) * (v - mu) / n;
            }
        }
    }
    std.iter_mut()
        .flatten()
        .for_each(|s| *s = s.sqrt().max(1e-6));

    let mut r = rng::stream(cfg.seed, &[purpose::PROBE, stream]);
    let (h, k) = (cfg.hidden, cfg.n_classes);
    let n_head = match cfg.head {
        HeadKind::Linear => d * k + k,
        HeadKind::Mlp => d * h + h + h * k + k,
    };
    let mut model = ProbeModel {
        weights: LayerWeights::uniform(n_layers),
        head: cfg.head,
        d,
        hidden: h,
        n_classes: k,
        mean,
        std,
        theta: vec![0.0; n_layers + n_head],
    };
    let ix = model.idx();
    let mut decay = vec![false; model.theta.len()];
    // the output layer starts at zero, so an untrained head predicts class 0
    if cfg.head == HeadKind::Mlp {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        for i in ix.w1.clone() {
            model.theta[i] = normal.sample(&mut r);
        }
    }
    for i in ix.w1.clone().chain(ix.w2.clone()) {
        decay[i] = true;
    }
    let opt = OptimizerConfig {
        weight_decay: cfg.weight_decay,
        ..OptimizerConfig::default()
    };
    let mut state = OptimState::<f64>::new(model.theta.len());
    let mut order: Vec<usize> = (0..features.len()).collect();
    let per_epoch = features.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut t = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0; model.theta.len()];
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                model.accumulate(&features[i], labels[i] as usize, scale, &mut g)?;
            }
            let lr = cosine_lr(cfg.lr, cfg.lr_final, t, total);
            optimizer_step(&mut model.theta, &g, &decay, &mut state, &opt, lr)?;
            t += 1;
        }
    }
    model.weights.raw = model.theta[..n_layers].to_vec();
    Ok(model)
}

pub fn accuracy(predicted: &[usize], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    hits as f64 / labels.len() as f64
}

/// Deterministic stratified fold ids: each class is shuffled with a seeded
/// stream and dealt round-robin. Every class must reach every fold.
pub fn stratified_folds(labels: &[u32], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(
            "k-fold evaluation needs at least 2 folds".into(),
        ));
    }
    let classes: BTreeSet<u32> = labels.iter().copied().collect();
    let mut out = vec![0; labels.len()];
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < folds {
            return Err(Error::Insufficient(format!(
                "class {c} has {} clips, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng::stream(seed, &[purpose::FOLDS, c as u64]));
        for (j, i) in members.into_iter().enumerate() {
            out[i] = j % folds;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldReport {
    pub fold_accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Runs `classify(train_x, train_y, test_x, fold) -> predictions` over the
/// folds and averages the per-fold accuracies.
pub fn kfold_with<X, F>(
    features: &[X],
    labels: &[u32],
    fold_of: &[usize],
    mut classify: F,
) -> Result<KFoldReport>
where
    F: FnMut(&[&X], &[u32], &[&X], usize) -> Result<Vec<usize>>,
{
    if features.len() != labels.len() || fold_of.len() != labels.len() {
        return Err(Error::Geometry(
            "features, labels and folds differ in length".into(),
        ));
    }
    let folds = fold_of.iter().max().map_or(0, |m| m + 1);
    let all: BTreeSet<u32> = labels.iter().copied().collect();
    let mut accs = Vec::with_capacity(folds);
    for f in 0..folds {
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..labels.len()).partition(|&i| fold_of[i] == f);
        let present: BTreeSet<u32> = test.iter().map(|&i| labels[i]).collect();
        if present != all || train.is_empty() {
            return Err(Error::Insufficient(format!("fold {f} is missing a class")));
        }
        let tx: Vec<&X> = train.iter().map(|&i| &features[i]).collect();
        let ty: Vec<u32> = train.iter().map(|&i| labels[i]).collect();
        let sx: Vec<&X> = test.iter().map(|&i| &features[i]).collect();
        let sy: Vec<u32> = test.iter().map(|&i| labels[i]).collect();
        let pred = classify(&tx, &ty, &sx, f)?;
        accs.push(accuracy(&pred, &sy));
    }
    let mean = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
    Ok(KFoldReport {
        fold_accuracies: accs,
        mean_accuracy: mean,
    })
}

/// k-fold accuracy of the probe on per-layer features.
pub fn evaluate_kfold(
    features: &[Vec<Vec<f64>>],
    labels: &[u32],
    fold_of: &[usize],
    cfg: &ProbeConfig,
) -> Result<KFoldReport> {
    kfold_with(features, labels, fold_of, |tx, ty, sx, f| {
        let owned: Vec<Vec<Vec<f64>>> = tx.iter().map(|x| (*x).clone()).collect();
        let m = fit_probe(&owned, ty, cfg, f as u64)?;
        sx.iter().map(|x| m.predict(x)).collect()
    })
}

/// Nearest class mean under Euclidean distance.
pub fn nearest_centroid(
    train_x: &[&Vec<f64>],
    train_y: &[u32],
    test_x: &[&Vec<f64>],
) -> Result<Vec<usize>> {
    let k = train_y.iter().max().map_or(0, |m| *m as usize + 1);
    let d = train_x.first().map_or(0, |x| x.len());
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (x, &y) in train_x.iter().zip(train_y) {
        counts[y as usize] += 1;
        sums[y as usize]
            .iter_mut()
            .zip(x.iter())
            .for_each(|(a, b)| *a += b);
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    Ok(test_x
        .iter()
        .map(|x| {
            let dist = |c: &Vec<f64>| {
                c.iter()
                    .zip(x.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };
            (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b])))
                .unwrap_or(0)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: KFoldReport,
    pub baseline: Option<KFoldReport>,
    pub layer_weights: Vec<f64>,
    pub config_hash: String,
    pub checkpoint_hash: String,
}

/// Full frozen-encoder protocol: extract features, run k-fold probing and
/// verify afterwards that no encoder parameter changed.
pub fn train_probe(
    params: &Params<f32>,
    clips: &[Vec<f32>],
    labels: &[u32],
    fold_of: &[usize],
    cfg: &ProbeConfig,
) -> Result<(ProbeModel, KFoldReport)> {
    check_labels(labels, cfg.n_classes)?;
    let before = params.encoder_hash();
    let features = extract_features(params, clips)?;
    let report = evaluate_kfold(&features, labels, fold_of, cfg)?;
    let model = fit_probe(&features, labels, cfg, u64::MAX)?;
    if params.encoder_hash() != before {
        return Err(Error::FrozenViolation);
    }
    Ok((model, report))
}
