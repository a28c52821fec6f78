//! Two-phase pretraining: schedule, AdamW, checkpoints and the loss log.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sample_batch;
use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::gridding::{self, GridConfig};
use crate::io::{hash_json, sha256_hex};
use crate::masking::{
    masked_patch_indices, sample_patch_mask, sample_segment_mask, MaskConfig, MaskMode,
};
use crate::model::{self, loss_and_gradients, Example, Group, ModelConfig, Params, Real};
use crate::quantizer::{self, Codebook, TemporalSource};
use crate::rng::{self, purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            total_steps: 1,
            warmup_fraction: 0.1,
            lr_start: 1e-6,
            lr_peak: 1e-4,
            lr_end: 1e-6,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config(
                "schedule total_steps must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction outside [0, 1]".into()));
        }
        for (name, v) in [
            ("lr_start", self.lr_start),
            ("lr_peak", self.lr_peak),
            ("lr_end", self.lr_end),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name}={v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Peak raised for the short desk-scale schedule.
    pub fn desk_scale() -> Self {
        Self {
            lr_peak: 2e-3,
            ..Self::default()
        }
    }

    pub fn with_total(&self, total_steps: u64) -> Self {
        Self {
            total_steps,
            ..self.clone()
        }
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    // exact at both ends
    a * (1.0 - f) + b * f
}

/// Learning rate at a (possibly fractional) position `t` in `[0, T]`.
pub fn lr_at_time(t: f64, sched: &ScheduleConfig) -> Result<f64> {
    sched.validate()?;
    let total = sched.total_steps as f64;
    if !(0.0..=total).contains(&t) {
        return Err(Error::Config(format!("step {t} outside [0, {total}]")));
    }
    let warm = sched.warmup_fraction * total;
    Ok(if t <= warm && warm > 0.0 {
        lerp(sched.lr_start, sched.lr_peak, t / warm)
    } else if warm >= total {
        sched.lr_peak
    } else {
        lerp(sched.lr_peak, sched.lr_end, (t - warm) / (total - warm))
    })
}

pub fn lr_at(step: u64, sched: &ScheduleConfig) -> Result<f64> {
    lr_at_time(step as f64, sched)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "epsilon must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> OptimState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay on the elements where
/// `decay` is set. Arithmetic is carried out in f64.
pub fn optimizer_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    decay: &[bool],
    state: &mut OptimState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Geometry("optimizer buffers differ in length".into()));
    }
    if !model::ops::all_finite(grads) {
        return Err(Error::NonFinite("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads[i].to_f64().unwrap();
        let m = b1 * state.m[i].to_f64().unwrap() + (1.0 - b1) * g;
        let v = b2 * state.v[i].to_f64().unwrap() + (1.0 - b2) * g * g;
        let theta = params[i].to_f64().unwrap();
        let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
        let update = (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon) + wd * theta;
        state.m[i] = T::from_f64(m).unwrap();
        state.v[i] = T::from_f64(v).unwrap();
        params[i] = T::from_f64(theta - lr * update).unwrap();
    }
    Ok(())
}

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [T], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let v = g.to_f64().unwrap();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm).unwrap();
        grads.iter_mut().for_each(|g| *g = *g * s);
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub phase_a_steps: u64,
    pub joint_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: f64,
    /// Global-norm clipping threshold; 0 disables clipping.
    pub grad_clip: f64,
    /// Extra checkpoint interval in steps; 0 writes only at phase ends.
    pub checkpoint_every: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl TrainPlan {
    pub fn paper_scale() -> Self {
        Self {
            phase_a_steps: 100_000,
            joint_steps: 150_000,
            batch_size: 8,
            seed: 0,
            lambda: 0.75,
            grad_clip: 1.0,
            checkpoint_every: 10_000,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            phase_a_steps: 200,
            joint_steps: 300,
            batch_size: 4,
            checkpoint_every: 0,
            ..Self::paper_scale()
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.phase_a_steps.saturating_add(self.joint_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps() == 0 || self.total_steps() == u64::MAX {
            return Err(Error::Config(
                "plan step counts must be positive and finite".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(
                "grad_clip must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Phase of global step `s` (1-based) and its 0-based index within the phase.
    pub fn locate(&self, s: u64) -> (Phase, u64) {
        if s <= self.phase_a_steps {
            (Phase::A, s - 1)
        } else {
            (Phase::B, s - self.phase_a_steps - 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Patch masks, spectral loss only.
    A,
    /// Segment masks, weighted spectral and temporal loss.
    B,
}

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub plan: TrainPlan,
    /// Learning-rate shape; `total_steps` is replaced by each phase's length.
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerConfig,
    pub mask: MaskConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk_scale(),
            plan: TrainPlan::desk_scale(),
            schedule: ScheduleConfig::desk_scale(),
            optimizer: OptimizerConfig::default(),
            mask: MaskConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()?;
        self.schedule.with_total(1).validate()?;
        self.optimizer.validate()?;
        self.mask.validate()
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }

    pub fn phase_schedule(&self, phase: Phase) -> ScheduleConfig {
        let n = match phase {
            Phase::A => self.plan.phase_a_steps,
            Phase::B => self.plan.joint_steps,
        };
        self.schedule.with_total(n)
    }

    fn phase_mask(&self, phase: Phase) -> MaskConfig {
        MaskConfig {
            mode: match phase {
                Phase::A => MaskMode::Patch,
                Phase::B => MaskMode::Segment,
            },
            ..self.mask.clone()
        }
    }
}

/// Turns a spectrogram into a training example with frozen targets.
pub fn prepare_example(
    spec: &MelSpectrogram,
    grid: &GridConfig,
    cb_s: &Codebook,
    temporal: TemporalSource<'_>,
) -> Result<Example<f32>> {
    let targets = quantizer::build_targets(spec, grid, cb_s, temporal)?;
    let patches = gridding::patch_vectors(spec, grid)?.concat();
    Ok(Example {
        patches,
        n_segments: targets.n_segments,
        targets,
    })
}

fn check_corpus(cfg: &ModelConfig, corpus: &[Example<f32>]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Insufficient("empty training corpus".into()));
    }
    for (i, ex) in corpus.iter().enumerate() {
        let t = &ex.targets;
        if ex.n_segments == 0 || ex.n_segments > cfg.n_max {
            return Err(Error::Geometry(format!(
                "clip {i}: {} segments, model allows {}",
                ex.n_segments, cfg.n_max
            )));
        }
        if ex.patches.len() != ex.n_segments * cfg.r_s * cfg.patch_dim
            || t.r_s != cfg.r_s
            || t.r_t != cfg.r_t
        {
            return Err(Error::Geometry(format!(
                "clip {i} does not match the model geometry"
            )));
        }
        if t.spectral.iter().any(|&c| c as usize >= cfg.k_s)
            || t.temporal.iter().any(|&c| c as usize >= cfg.k_t)
        {
            return Err(Error::Mismatch(format!(
                "clip {i} has labels beyond the codebook sizes"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub spectral: f64,
    pub temporal: f64,
    pub total: f64,
    pub wall_ms: u64,
}

pub const LOG_HEADER: &str = "step,lr,spectral,temporal,total,wall_ms";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{}",
            self.step, self.lr, self.spectral, self.temporal, self.total, self.wall_ms
        )
    }
}

pub fn format_log(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Parses a log written by [`format_log`].
pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Format("training log header missing".into()));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("log line {}: malformed", i + 2));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                lr: num(f[1])?,
                spectral: num(f[2])?,
                temporal: num(f[3])?,
                total: num(f[4])?,
                wall_ms: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PretrainConfig,
    /// Caller-supplied identity of the training data and codebooks.
    pub binding: String,
    /// Number of completed global steps.
    pub step: u64,
    pub params: Params<f32>,
    pub optim: OptimState<f32>,
}

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: u64,
    pub seed: u64,
    pub optimizer_step: u64,
    pub config: PretrainConfig,
    pub config_hash: String,
    pub model_config_hash: String,
    pub binding: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn push_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Manifest JSON and tensor blob for a checkpoint.
pub fn encode_checkpoint(ck: &Checkpoint) -> Result<(Vec<u8>, Vec<u8>)> {
    let layout = &ck.params.layout;
    if layout.config != ck.config.model {
        return Err(Error::Mismatch(
            "parameters do not match the checkpoint config".into(),
        ));
    }
    let mut blob = Vec::with_capacity(12 * layout.total);
    let mut tensors = Vec::with_capacity(3 * layout.tensors.len());
    for (prefix, data) in [
        ("", &ck.params.data),
        ("opt.m.", &ck.optim.m),
        ("opt.v.", &ck.optim.v),
    ] {
        for t in &layout.tensors {
            tensors.push(TensorEntry {
                name: format!("{prefix}{}", t.name),
                shape: t.shape.clone(),
                offset: blob.len() as u64,
            });
            push_f32s(&mut blob, &data[t.range()]);
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        step: ck.step,
        seed: ck.config.plan.seed,
        optimizer_step: ck.optim.step,
        config: ck.config.clone(),
        config_hash: ck.config.hash(),
        model_config_hash: ck.config.model.hash(),
        binding: ck.binding.clone(),
        blob_sha256: sha256_hex(&blob),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    Ok((json, blob))
}

/// Inverse of [`encode_checkpoint`]; validates every index entry against
/// the blob before allocating parameter buffers.
pub fn decode_checkpoint(manifest: &[u8], blob: &[u8]) -> Result<Checkpoint> {
    let m: CheckpointManifest = serde_json::from_slice(manifest)
        .map_err(|e| Error::Format(format!("checkpoint manifest: {e}")))?;
    if m.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            m.format_version
        )));
    }
    m.config.validate()?;
    if m.config.hash() != m.config_hash || m.config.model.hash() != m.model_config_hash {
        return Err(Error::Mismatch(
            "checkpoint config hash does not match its config".into(),
        ));
    }
    if sha256_hex(blob) != m.blob_sha256 {
        return Err(Error::Format("tensor blob checksum mismatch".into()));
    }
    let n = m.config.model.parameter_count().total();
    if blob.len() as u128 != 12 * n as u128 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, expected {}",
            blob.len(),
            12 * n as u128
        )));
    }
    let layout = Arc::new(m.config.model.layout());
    if m.tensors.len() != 3 * layout.tensors.len() {
        return Err(Error::Format(
            "tensor index has the wrong number of entries".into(),
        ));
    }
    let mut bufs = [vec![0f32; n], vec![0f32; n], vec![0f32; n]];
    for (k, (prefix, buf)) in ["", "opt.m.", "opt.v."]
        .iter()
        .zip(bufs.iter_mut())
        .enumerate()
    {
        for (i, t) in layout.tensors.iter().enumerate() {
            let e = &m.tensors[k * layout.tensors.len() + i];
            if e.name != format!("{prefix}{}", t.name) || e.shape != t.shape {
                return Err(Error::Format(format!("unexpected tensor {:?}", e.name)));
            }
            let start =
                usize::try_from(e.offset).map_err(|_| Error::Format("offset overflow".into()))?;
            let bytes = start
                .checked_add(4 * t.len())
                .and_then(|end| blob.get(start..end))
                .ok_or_else(|| Error::Format(format!("tensor {:?} runs past the blob", e.name)))?;
            for (dst, c) in buf[t.range()].iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(c.try_into().unwrap());
            }
        }
    }
    let [p, mm, vv] = bufs;
    Ok(Checkpoint {
        config: m.config,
        binding: m.binding,
        step: m.step,
        params: Params { layout, data: p },
        optim: OptimState {
            m: mm,
            v: vv,
            step: m.optimizer_step,
        },
    })
}

/// Writes the checkpoint directory atomically: both files go to a sibling
/// temp directory which is then renamed into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let (json, blob) = encode_checkpoint(ck)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    fs::write(tmp.join(BLOB_FILE), &blob).map_err(|e| Error::io(tmp.join(BLOB_FILE), e))?;
    fs::write(tmp.join(MANIFEST_FILE), &json).map_err(|e| Error::io(tmp.join(MANIFEST_FILE), e))?;
    if path.exists() {
        fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mp = path.join(MANIFEST_FILE);
    let bp = path.join(BLOB_FILE);
    let manifest = fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    decode_checkpoint(&manifest, &blob)
}

/// Loads a checkpoint and refuses it unless it was written for `model`.
pub fn load_checkpoint_for(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.config.model.hash() != model.hash() {
        return Err(Error::Mismatch(format!(
            "checkpoint {} was written for a different model config",
            path.display()
        )));
    }
    Ok(ck)
}

pub fn checkpoint_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step-{step:08}"))
}

/// Most recent complete checkpoint under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let dir = out_dir.join("checkpoints");
    let mut best: Option<(u64, PathBuf)> = None;
    for e in fs::read_dir(dir).ok()?.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(step) = name
            .strip_prefix("step-")
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if e.path().join(MANIFEST_FILE).is_file() && best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, e.path()));
        }
    }
    best.map(|(_, p)| p)
}

/// Snapshot handed to an observer after each update.
pub struct StepEvent<'a> {
    pub step: u64,
    pub phase: Phase,
    pub lr: f64,
    /// Batch-mean gradient before clipping.
    pub grads: &'a Params<f32>,
    /// Gradient actually applied.
    pub applied: &'a Params<f32>,
    pub params: &'a Params<f32>,
    pub optim: &'a OptimState<f32>,
    pub row: &'a LogRow,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for checkpoints and `train_log.csv`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Stop after this global step (for interruption tests).
    pub stop_after: Option<u64>,
    /// Record real wall time; otherwise `wall_ms` is 0 so logs are reproducible.
    pub record_wall_time: bool,
    pub observer: Option<&'a mut dyn FnMut(&StepEvent<'_>)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Params<f32>,
    pub optim: OptimState<f32>,
    pub step: u64,
    /// Rows produced in this invocation.
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOG_FILE: &str = "train_log.csv";

fn batch_gradients(
    params: &Params<f32>,
    corpus: &[Example<f32>],
    cfg: &PretrainConfig,
    phase: Phase,
    step: u64,
) -> Result<(f64, f64, Params<f32>)> {
    let plan = &cfg.plan;
    let mask = cfg.phase_mask(phase);
    let lambda = match phase {
        Phase::A => 0.0,
        Phase::B => plan.lambda,
    };
    let batch = sample_batch(corpus.len(), plan.batch_size, plan.seed, step)?;
    let per_clip: Vec<Result<_>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, &clip)| {
            let ex = &corpus[clip];
            let mut mr = rng::stream(plan.seed, &[purpose::MASK, step, slot as u64]);
            let mplan = match phase {
                Phase::A => sample_patch_mask(ex.n_segments * cfg.model.r_s, &mask, &mut mr)?,
                Phase::B => sample_segment_mask(ex.n_segments, &mask, &mut mr)?,
            };
            let mut dr = rng::stream(plan.seed, &[purpose::DROPOUT, step, slot as u64]);
            let dropout = (cfg.model.dropout_rate > 0.0).then_some(&mut dr);
            loss_and_gradients::<f32, ChaCha8Rng>(params, ex, &mplan, lambda, dropout)
        })
        .collect();
    // fixed-order reduction keeps results independent of thread count
    let mut grads = params.zeros_like();
    let (mut ls, mut lt) = (0.0, 0.0);
    for r in per_clip {
        let (loss, g) = r?;
        ls += loss.spectral;
        lt += loss.temporal;
        grads.add_scaled(&g, 1.0);
    }
    let inv = 1.0 / plan.batch_size as f64;
    grads.scale(inv as f32);
    Ok((ls * inv, lt * inv, grads))
}

/// Runs (or resumes) both phases. Step `s` of the run draws its batch, masks
/// and dropout from streams keyed by `(seed, s, slot)`, so a resumed run
/// repeats the uninterrupted one exactly.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    corpus: &[Example<f32>],
    binding: &str,
    mut opts: RunOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_corpus(&cfg.model, corpus)?;
    let total = cfg.plan.total_steps();
    let (mut params, mut optim, start) = match opts.resume.take() {
        Some(ck) => {
            if ck.config.model.hash() != cfg.model.hash() {
                return Err(Error::Mismatch(
                    "checkpoint was written for a different model config".into(),
                ));
            }
            if ck.config.hash() != cfg.hash() || ck.binding != binding {
                return Err(Error::Mismatch(
                    "checkpoint belongs to a different run".into(),
                ));
            }
            (ck.params, ck.optim, ck.step)
        }
        None => {
            let p = Params::<f32>::init(&cfg.model, cfg.plan.seed)?;
            let n = p.data.len();
            (p, OptimState::new(n), 0)
        }
    };
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let decay = params.layout.decay_mask();

    let mut log_text = None;
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut rows = Vec::new();
        if start > 0 {
            let lp = dir.join(LOG_FILE);
            if let Ok(text) = fs::read_to_string(&lp) {
                rows = parse_log(&text)?;
                rows.retain(|r| r.step <= start);
            }
        }
        log_text = Some(format_log(&rows));
    }

    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    for s in start + 1..=end {
        let t0 = Instant::now();
        let (phase, k) = cfg.plan.locate(s);
        if s == cfg.plan.phase_a_steps + 1 {
            optim = OptimState::new(params.data.len());
        }
        let lr = lr_at(k, &cfg.phase_schedule(phase))?;
        let (ls, lt, grads) = batch_gradients(&params, corpus, cfg, phase, s)?;
        if !grads.all_finite() || !ls.is_finite() || !lt.is_finite() {
            return Err(Error::NonFinite(format!("loss or gradient at step {s}")));
        }
        let mut applied = grads.clone();
        if cfg.plan.grad_clip > 0.0 {
            clip_global_norm(&mut applied.data, cfg.plan.grad_clip);
        }
        optimizer_step(
            &mut params.data,
            &applied.data,
            &decay,
            &mut optim,
            &cfg.optimizer,
            lr,
        )?;
        if !params.all_finite() {
            return Err(Error::NonFinite(format!("parameters diverged at step {s}")));
        }
        let lambda = if phase == Phase::A {
            0.0
        } else {
            cfg.plan.lambda
        };
        let row = LogRow {
            step: s,
            lr,
            spectral: ls,
            temporal: lt,
            total: lambda * lt + (1.0 - lambda) * ls,
            wall_ms: if opts.record_wall_time {
                t0.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        if let Some(obs) = opts.observer.as_mut() {
            obs(&StepEvent {
                step: s,
                phase,
                lr,
                grads: &grads,
                applied: &applied,
                params: &params,
                optim: &optim,
                row: &row,
            });
        }
        if let (Some(dir), Some(text)) = (&opts.out_dir, log_text.as_mut()) {
            text.push_str(&row.to_csv());
            text.push('\n');
            let boundary = s == cfg.plan.phase_a_steps || s == total;
            let periodic = cfg.plan.checkpoint_every > 0 && s % cfg.plan.checkpoint_every == 0;
            if boundary || periodic || s == end {
                crate::io::write_atomic(&dir.join(LOG_FILE), text.as_bytes())?;
            }
            if boundary || periodic {
                let path = checkpoint_dir(dir, s);
                save_checkpoint(
                    &path,
                    &Checkpoint {
                        config: cfg.clone(),
                        binding: binding.to_string(),
                        step: s,
                        params: params.clone(),
                        optim: optim.clone(),
                    },
                )?;
                checkpoints.push(path);
            }
        }
        log.push(row);
    }
    Ok(TrainOutcome {
        params,
        optim,
        step: end.max(start),
        log,
        checkpoints,
    })
}

/// Top-1 accuracy of the spectral head on masked patches, using segment
/// masks drawn from a fixed evaluation stream.
pub fn masked_spectral_accuracy(
    params: &Params<f32>,
    corpus: &[Example<f32>],
    mask: &MaskConfig,
    seed: u64,
) -> Result<f64> {
    let cfg = params.config();
    let mask = MaskConfig {
        mode: MaskMode::Segment,
        ..mask.clone()
    };
    let grid_like = GridConfig {
        patch: cfg.r_t,
        frame_width: 1,
        n_mels: cfg.r_s * cfg.r_t,
    };
    let counts: Vec<Result<(usize, usize)>> = corpus
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut r = rng::stream(seed, &[purpose::EVAL, i as u64]);
            let plan = sample_segment_mask(ex.n_segments, &mask, &mut r)?;
            let masked = masked_patch_indices(&plan, &grid_like);
            let out = model::encode(params, model::embed(params, &ex.patches, &masked)?)?;
            let logits = model::spectral_logits(&out, params);
            let hits = masked
                .iter()
                .filter(|&&row| {
                    let l = &logits[row * cfg.k_s..(row + 1) * cfg.k_s];
                    argmax(l) == ex.targets.spectral[row] as usize
                })
                .count();
            Ok((hits, masked.len()))
        })
        .collect();
    let (mut hits, mut n) = (0, 0);
    for c in counts {
        let (h, m) = c?;
        hits += h;
        n += m;
    }
    Ok(hits as f64 / n.max(1) as f64)
}

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hash of the groups that must survive the phase boundary unchanged.
pub fn carried_hash(p: &Params<f32>) -> String {
    p.hash_groups(&[
        Group::Embedding,
        Group::Encoder,
        Group::SpectralHead,
        Group::TemporalHead,
    ])
}
