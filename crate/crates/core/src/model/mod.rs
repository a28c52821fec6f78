//! Patch embedding, transformer encoder and prediction heads.
//!
//! All learnable parameters live in one flat buffer described by a
//! [`Layout`]; gradients and optimizer moments reuse the same layout.

mod forward;
pub mod ops;

use std::fmt::Debug;
use std::ops::Range;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

pub use forward::{
    attention_maps, embed, encode, loss_and_gradients, spectral_logits, temporal_logits,
    EncodeOutput, Example,
};

/// Floating point type the network can run in.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + Default + 'static {
    fn to_le_f32(self) -> f32;
}

impl Real for f32 {
    fn to_le_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn to_le_f32(self) -> f32 {
        self as f32
    }
}

const MAX_DIM: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub k_s: usize,
    pub k_t: usize,
    pub r_s: usize,
    pub r_t: usize,
    /// Maximum number of segments; the positional table has `n_max * r_s` rows.
    pub n_max: usize,
    /// Length of a flattened spectral patch.
    pub patch_dim: usize,
    pub dropout_rate: f64,
    pub init_std: f64,
    /// Fixed input standardization applied to every patch value.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    pub fn paper_scale() -> Self {
        Self {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            mlp_ratio: 4,
            k_s: 100,
            k_t: 500,
            r_s: 8,
            r_t: 8,
            n_max: 50,
            patch_dim: 256,
            dropout_rate: 0.0,
            init_std: 0.02,
            input_mean: 0.0,
            input_std: 1.0,
        }
    }

    /// Narrow, shallow encoder with small codebooks for CPU runs.
    pub fn desk_scale() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            k_s: 64,
            k_t: 32,
            ..Self::paper_scale()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("k_s", self.k_s),
            ("k_t", self.k_t),
            ("r_s", self.r_s),
            ("r_t", self.r_t),
            ("n_max", self.n_max),
            ("patch_dim", self.patch_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        // keeps parameter counts far from usize overflow for untrusted configs
        for (name, v) in positive.iter().chain(&[("n_layers", self.n_layers)]) {
            if *v > MAX_DIM {
                return Err(Error::Config(format!("{name}={v} exceeds {MAX_DIM}")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.input_mean.is_finite() && self.input_std.is_finite() && self.input_std > 0.0) {
            return Err(Error::Config(
                "input_std must be positive and finite".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> ParameterCount {
        let d = self.d_model;
        let h = self.hidden();
        let embedding = self.patch_dim * d + d + self.n_max * self.r_s * d + d;
        let per_layer = 4 * (d * d + d) + (d * h + h) + (h * d + d) + 4 * d;
        let mlp = |k: usize| d * d + d + d * k + k;
        let heads = mlp(self.k_s) + self.r_t * mlp(self.k_t);
        ParameterCount {
            embedding,
            encoder: per_layer * self.n_layers,
            heads,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub embedding: usize,
    pub encoder: usize,
    pub heads: usize,
}

impl ParameterCount {
    pub fn total(&self) -> usize {
        self.embedding + self.encoder + self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Embedding,
    Encoder,
    SpectralHead,
    TemporalHead,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub group: Group,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearIdx {
    pub w: Range<usize>,
    pub b: Range<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockIdx {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpIdx {
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub config: ModelConfig,
    pub tensors: Vec<TensorSpec>,
    pub patch: LinearIdx,
    pub pos: Range<usize>,
    pub mask_token: Range<usize>,
    pub blocks: Vec<BlockIdx>,
    pub spectral: MlpIdx,
    pub temporal: Vec<MlpIdx>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorSpec>,
    offset: usize,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, group: Group, decay: bool) -> Range<usize> {
        let spec = TensorSpec {
            name,
            shape,
            offset: self.offset,
            group,
            decay,
        };
        let r = spec.range();
        self.offset = r.end;
        self.tensors.push(spec);
        r
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, group: Group) -> LinearIdx {
        let w = self.push(format!("{name}.weight"), vec![fan_in, fan_out], group, true);
        let b = self.push(format!("{name}.bias"), vec![fan_out], group, true);
        LinearIdx {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> (Range<usize>, Range<usize>) {
        (
            self.push(format!("{name}.gain"), vec![d], Group::Encoder, false),
            self.push(format!("{name}.bias"), vec![d], Group::Encoder, false),
        )
    }
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let mut b = Builder {
            tensors: Vec::new(),
            offset: 0,
        };
        let patch = b.linear("embed.patch", cfg.patch_dim, d, Group::Embedding);
        let pos = b.push(
            "embed.position".into(),
            vec![cfg.n_max * cfg.r_s, d],
            Group::Embedding,
            true,
        );
        let mask_token = b.push("embed.mask_token".into(), vec![d], Group::Embedding, false);
        let blocks = (0..cfg.n_layers)
            .map(|l| {
                let (ln1_gain, ln1_bias) = b.norm(&format!("layer{l}.norm1"), d);
                let q = b.linear(&format!("layer{l}.attn.query"), d, d, Group::Encoder);
                let k = b.linear(&format!("layer{l}.attn.key"), d, d, Group::Encoder);
                let v = b.linear(&format!("layer{l}.attn.value"), d, d, Group::Encoder);
                let o = b.linear(&format!("layer{l}.attn.output"), d, d, Group::Encoder);
                let (ln2_gain, ln2_bias) = b.norm(&format!("layer{l}.norm2"), d);
                let fc1 = b.linear(
                    &format!("layer{l}.ffn.fc1"),
                    d,
                    cfg.hidden(),
                    Group::Encoder,
                );
                let fc2 = b.linear(
                    &format!("layer{l}.ffn.fc2"),
                    cfg.hidden(),
                    d,
                    Group::Encoder,
                );
                BlockIdx {
                    ln1_gain,
                    ln1_bias,
                    q,
                    k,
                    v,
                    o,
                    ln2_gain,
                    ln2_bias,
                    fc1,
                    fc2,
                }
            })
            .collect();
        let spectral = MlpIdx {
            fc1: b.linear("head.spectral.fc1", d, d, Group::SpectralHead),
            fc2: b.linear("head.spectral.fc2", d, cfg.k_s, Group::SpectralHead),
        };
        let temporal = (0..cfg.r_t)
            .map(|j| MlpIdx {
                fc1: b.linear(&format!("head.temporal{j}.fc1"), d, d, Group::TemporalHead),
                fc2: b.linear(
                    &format!("head.temporal{j}.fc2"),
                    d,
                    cfg.k_t,
                    Group::TemporalHead,
                ),
            })
            .collect();
        Layout {
            config: cfg.clone(),
            tensors: b.tensors,
            patch,
            pos,
            mask_token,
            blocks,
            spectral,
            temporal,
            total: b.offset,
        }
    }

    /// Element mask of parameters subject to weight decay.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.total];
        for t in self.tensors.iter().filter(|t| t.decay) {
            m[t.range()].iter_mut().for_each(|x| *x = true);
        }
        m
    }

    pub fn group_ranges(&self, group: Group) -> impl Iterator<Item = Range<usize>> + '_ {
        self.tensors
            .iter()
            .filter(move |t| t.group == group)
            .map(|t| t.range())
    }
}

/// A full parameter (or gradient) set.
#[derive(Debug, Clone)]
pub struct Params<T> {
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Real> PartialEq for Params<T> {
    fn eq(&self, other: &Self) -> bool {
        self.layout == other.layout && self.data == other.data
    }
}

impl<T: Real> Params<T> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![T::zero(); layout.total];
        Self { layout, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    /// Normal(0, init_std) weights and mask token, zero biases, unit norm
    /// gains, and a factored sinusoidal positional table.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Arc::new(cfg.layout());
        let mut p = Self::zeros(layout.clone());
        let mut r = rng::stream(seed, &[rng::purpose::INIT]);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        for t in &layout.tensors {
            let name = t.name.as_str();
            let slice = &mut p.data[t.range()];
            if name.ends_with(".gain") {
                slice.iter_mut().for_each(|x| *x = T::one());
            } else if name == "embed.position" {
                let table = factored_positions(cfg);
                for (x, v) in slice.iter_mut().zip(table) {
                    *x = T::from_f64(v).unwrap();
                }
            } else if name.ends_with(".weight") || name == "embed.mask_token" {
                for x in slice.iter_mut() {
                    *x = T::from_f64(normal.sample(&mut r)).unwrap();
                }
            }
        }
        Ok(p)
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * scale;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x = *x * s);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        ops::all_finite(&self.data)
    }

    /// SHA-256 over the f32 little-endian encoding of the given groups.
    pub fn hash_groups(&self, groups: &[Group]) -> String {
        let mut h = Sha256::new();
        for t in self
            .layout
            .tensors
            .iter()
            .filter(|t| groups.contains(&t.group))
        {
            h.update(t.name.as_bytes());
            for x in &self.data[t.range()] {
                h.update(x.to_le_f32().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn encoder_hash(&self) -> String {
        self.hash_groups(&[Group::Embedding, Group::Encoder])
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layout: self.layout.clone(),
            data: self
                .data
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }
}

/// Peak amplitude of the initial positional table.
pub const POSITION_INIT_SCALE: f64 = 0.5;

/// `(n_max * r_s) × d_model` table: the first half of each row encodes the
/// segment index and the second half the band, as sine/cosine pairs.
pub fn factored_positions(cfg: &ModelConfig) -> Vec<f64> {
    let d = cfg.d_model;
    let half = d / 2;
    let encode = |pos: usize, out: &mut [f64]| {
        let w = out.len();
        for (i, o) in out.iter_mut().enumerate() {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / w.max(1) as f64);
            let a = pos as f64 * freq;
            *o = POSITION_INIT_SCALE * if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    };
    let mut table = vec![0.0; cfg.n_max * cfg.r_s * d];
    for (g, row) in table.chunks_exact_mut(d).enumerate() {
        let (seg, band) = row.split_at_mut(half);
        encode(g / cfg.r_s, seg);
        encode(g % cfg.r_s, band);
    }
    table
}

/// Bernoulli keep-mask scaled by `1 / (1 - rate)`.
pub(crate) fn dropout_mask<T: Real, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate)).unwrap();
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < rate {
                T::zero()
            } else {
                keep
            }
        })
        .collect()
}
