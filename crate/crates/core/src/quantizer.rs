//! K-means codebooks and discrete target construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;
use crate::gridding::{self, GridConfig};
use crate::rng;

/// Width of the space spectral patches are clustered in.
pub const TARGET_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookSource {
    SpectralPatch,
    TemporalFrame,
    ExternalEmbedding,
}

impl CodebookSource {
    fn to_byte(self) -> u8 {
        match self {
            CodebookSource::SpectralPatch => 0,
            CodebookSource::TemporalFrame => 1,
            CodebookSource::ExternalEmbedding => 2,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => CodebookSource::SpectralPatch,
            1 => CodebookSource::TemporalFrame,
            2 => CodebookSource::ExternalEmbedding,
            _ => return Err(Error::Format(format!("unknown codebook source {b}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionKind {
    Identity,
    FixedRandomOrthonormal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub kind: ProjectionKind,
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major; empty for the identity.
    pub matrix: Vec<f32>,
}

impl Projection {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: ProjectionKind::Identity,
            in_dim: dim,
            out_dim: dim,
            matrix: Vec::new(),
        }
    }

    /// Random matrix with orthonormal rows (Gram-Schmidt on Gaussian rows).
    pub fn random_orthonormal(in_dim: usize, out_dim: usize, seed: u64) -> Result<Self> {
        if out_dim > in_dim || out_dim == 0 {
            return Err(Error::Config(format!(
                "cannot build {out_dim} orthonormal rows in {in_dim} dimensions"
            )));
        }
        let mut r = rng::stream(
            seed,
            &[rng::purpose::PROJECTION, in_dim as u64, out_dim as u64],
        );
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
        while rows.len() < out_dim {
            let mut v: Vec<f64> = (0..in_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            // two passes keep the basis orthogonal to working precision
            for _ in 0..2 {
                for u in &rows {
                    let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                v.iter_mut().for_each(|a| *a /= norm);
                rows.push(v);
            }
        }
        Ok(Self {
            kind: ProjectionKind::FixedRandomOrthonormal,
            in_dim,
            out_dim,
            matrix: rows.into_iter().flatten().map(|x| x as f32).collect(),
        })
    }

    /// Identity when the input already fits in `target` dimensions,
    /// otherwise a seeded random orthonormal map down to `target`.
    pub fn for_input(in_dim: usize, target: usize, seed: u64) -> Result<Self> {
        if in_dim <= target {
            Ok(Self::identity(in_dim))
        } else {
            Self::random_orthonormal(in_dim, target, seed)
        }
    }

    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.in_dim {
            return Err(Error::Geometry(format!(
                "vector of length {} for projection from {}",
                v.len(),
                self.in_dim
            )));
        }
        Ok(match self.kind {
            ProjectionKind::Identity => v.to_vec(),
            ProjectionKind::FixedRandomOrthonormal => self
                .matrix
                .chunks_exact(self.in_dim)
                .map(|row| {
                    row.iter()
                        .zip(v)
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum::<f64>() as f32
                })
                .collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f32>,
    pub projection: Projection,
    pub source: CodebookSource,
    /// Hash of the configuration that produced this codebook.
    pub binding: String,
}

impl Codebook {
    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }

    /// Nearest centroid of an already-projected vector; ties go to the lowest index.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in self.centroids.chunks_exact(self.dim).enumerate() {
            let d = sq_dist_f32(v, c);
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

fn sq_dist_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Label of a raw (unprojected) vector.
pub fn assign(v: &[f32], cb: &Codebook) -> Result<usize> {
    let projected = cb.projection.apply(v)?;
    if projected.len() != cb.dim {
        return Err(Error::Geometry(format!(
            "projected length {} vs codebook dim {}",
            projected.len(),
            cb.dim
        )));
    }
    Ok(cb.nearest(&projected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 100,
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
            n_init: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// `k × dim`, row-major, at working precision.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn nearest_f64(v: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(v, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

fn assign_all(data: &[Vec<f64>], centroids: &[f64], dim: usize) -> Vec<(usize, f64)> {
    data.par_iter()
        .map(|v| nearest_f64(v, centroids, dim))
        .collect()
}

fn kmeans_plus_plus<R: Rng>(data: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<f64> {
    let dim = data[0].len();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..data.len());
    centroids.extend_from_slice(&data[first]);
    let mut d2: Vec<f64> = data.iter().map(|v| sq_dist(v, &data[first])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        chosen = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can leave `target` past the last positive weight
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap_or(0))
        } else {
            rng.gen_range(0..data.len())
        };
        let c = data[pick].clone();
        d2.par_iter_mut()
            .zip(data.par_iter())
            .for_each(|(d, v)| *d = d.min(sq_dist(v, &c)));
        centroids.extend_from_slice(&c);
    }
    centroids
}

fn lloyd(data: &[Vec<f64>], mut centroids: Vec<f64>, params: &KMeansParams) -> KMeansFit {
    let dim = data[0].len();
    let k = params.k;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut assigned = assign_all(data, &centroids, dim);
    loop {
        history.push(assigned.iter().map(|a| a.1).sum());
        if iterations >= params.max_iters {
            break;
        }
        iterations += 1;

        // update step, summed in input order
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (v, &(c, _)) in data.iter().zip(&assigned) {
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(v)
                .for_each(|(s, x)| *s += x);
        }
        let mut next = centroids.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                for (n, s) in next[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *n = s / counts[c] as f64;
                }
            } else {
                // reseed to the point farthest from its centroid
                let far = assigned
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .fold((0usize, -1.0f64), |best, (i, a)| {
                        if a.1 > best.1 {
                            (i, a.1)
                        } else {
                            best
                        }
                    })
                    .0;
                taken.push(far);
                next[c * dim..(c + 1) * dim].copy_from_slice(&data[far]);
            }
        }
        let shift = centroids
            .chunks_exact(dim)
            .zip(next.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        assigned = assign_all(data, &centroids, dim);
        if shift < params.tol {
            history.push(assigned.iter().map(|a| a.1).sum());
            break;
        }
    }
    let inertia = *history.last().unwrap();
    KMeansFit {
        labels: assigned.iter().map(|a| a.0).collect(),
        centroids,
        dim,
        inertia,
        history,
        iterations,
    }
}

/// Lloyd's algorithm with k-means++ seeding under squared Euclidean distance.
pub fn fit_kmeans(vectors: &[Vec<f32>], params: &KMeansParams) -> Result<KMeansFit> {
    if params.k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if vectors.len() < params.k {
        return Err(Error::Insufficient(format!(
            "{} vectors for {} clusters",
            vectors.len(),
            params.k
        )));
    }
    let dim = vectors[0].len();
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Geometry(
            "vectors must share a positive dimension".into(),
        ));
    }
    let data: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| v.iter().map(|&x| x as f64).collect())
        .collect();
    if data.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let distinct = {
        let mut keys: Vec<Vec<u32>> = vectors
            .iter()
            .map(|v| v.iter().map(|x| x.to_bits()).collect())
            .collect();
        keys.sort_unstable();
        keys.dedup();
        keys.len()
    };
    if distinct < params.k {
        return Err(Error::Insufficient(format!(
            "{distinct} distinct vectors for {} clusters",
            params.k
        )));
    }
    let mut best: Option<KMeansFit> = None;
    for run in 0..params.n_init.max(1) {
        let mut r = rng::stream(params.seed, &[rng::purpose::KMEANS, run as u64]);
        let init = kmeans_plus_plus(&data, params.k, &mut r);
        let fit = lloyd(&data, init, params);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// Sum of squared distances of `vectors` to their nearest codebook centroid.
pub fn inertia(vectors: &[Vec<f32>], cb: &Codebook) -> f64 {
    vectors
        .iter()
        .map(|v| sq_dist_f32(v, cb.centroid(cb.nearest(v))))
        .sum()
}

/// Projects raw vectors, fits k-means and freezes the result into a codebook.
pub fn fit_codebook(
    raw: &[Vec<f32>],
    source: CodebookSource,
    params: &KMeansParams,
    binding: &str,
) -> Result<Codebook> {
    let in_dim = raw.first().map(|v| v.len()).unwrap_or(0);
    let projection = Projection::for_input(in_dim, TARGET_DIM, params.seed)?;
    let projected = raw
        .iter()
        .map(|v| projection.apply(v))
        .collect::<Result<Vec<_>>>()?;
    let fit = fit_kmeans(&projected, params)?;
    Ok(Codebook {
        k: params.k,
        dim: fit.dim,
        centroids: fit.centroids.iter().map(|&c| c as f32).collect(),
        projection,
        source,
        binding: binding.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSet {
    pub n_segments: usize,
    pub r_s: usize,
    pub r_t: usize,
    /// `n_segments × r_s`, segment-major.
    pub spectral: Vec<u32>,
    /// `n_segments × r_t`, segment-major.
    pub temporal: Vec<u32>,
}

impl TargetSet {
    pub fn spectral_at(&self, segment: usize, band: usize) -> u32 {
        self.spectral[segment * self.r_s + band]
    }

    pub fn temporal_at(&self, segment: usize, frame: usize) -> u32 {
        self.temporal[segment * self.r_t + frame]
    }
}

pub enum TemporalSource<'a> {
    Codebook(&'a Codebook),
    /// Imported labels for this clip, one per temporal frame.
    External(&'a [u32]),
}

pub fn build_targets(
    spec: &MelSpectrogram,
    grid: &GridConfig,
    cb_s: &Codebook,
    temporal: TemporalSource<'_>,
) -> Result<TargetSet> {
    if cb_s.source != CodebookSource::SpectralPatch {
        return Err(Error::Mismatch(
            "spectral codebook has the wrong source".into(),
        ));
    }
    let patches = gridding::patch_vectors(spec, grid)?;
    let n_segments = grid.n_segments(spec.n_frames);
    let spectral = patches
        .iter()
        .map(|p| assign(p, cb_s).map(|l| l as u32))
        .collect::<Result<Vec<_>>>()?;
    let n_frames = n_segments * grid.r_t();
    let temporal = match temporal {
        TemporalSource::Codebook(cb_t) => {
            if cb_t.source != CodebookSource::TemporalFrame {
                return Err(Error::Mismatch(
                    "temporal codebook has the wrong source".into(),
                ));
            }
            gridding::frame_vectors(spec, grid)?
                .iter()
                .map(|f| assign(f, cb_t).map(|l| l as u32))
                .collect::<Result<Vec<_>>>()?
        }
        TemporalSource::External(labels) => {
            if labels.len() != n_frames {
                return Err(Error::Geometry(format!(
                    "{} external labels for {n_frames} temporal frames",
                    labels.len()
                )));
            }
            labels.to_vec()
        }
    };
    Ok(TargetSet {
        n_segments,
        r_s: grid.r_s(),
        r_t: grid.r_t(),
        spectral,
        temporal,
    })
}

// ---------------------------------------------------------------------------
// binary formats

const CODEBOOK_MAGIC: &[u8; 4] = b"ULCB";
const CODEBOOK_VERSION: u32 = 1;
const EXTERNAL_MAGIC: &[u8; 4] = b"ULXF";
const EXTERNAL_VERSION: u32 = 1;

/// Little-endian cursor that fails instead of panicking on short input.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    /// `n` little-endian f32 values; the length is checked before allocating.
    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("invalid utf-8".into()))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    let b = s.as_bytes();
    out.extend_from_slice(&(b.len().min(u16::MAX as usize) as u16).to_le_bytes());
    out.extend_from_slice(&b[..b.len().min(u16::MAX as usize)]);
}

fn put_f32s(out: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_codebook(cb: &Codebook) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 4 * (cb.centroids.len() + cb.projection.matrix.len()));
    out.extend_from_slice(CODEBOOK_MAGIC);
    out.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
    out.push(cb.source.to_byte());
    out.push(0); // metric: euclidean
    out.push(match cb.projection.kind {
        ProjectionKind::Identity => 0,
        ProjectionKind::FixedRandomOrthonormal => 1,
    });
    out.push(0);
    out.extend_from_slice(&(cb.k as u32).to_le_bytes());
    out.extend_from_slice(&(cb.dim as u32).to_le_bytes());
    out.extend_from_slice(&(cb.projection.in_dim as u32).to_le_bytes());
    put_string(&mut out, &cb.binding);
    put_f32s(&mut out, &cb.projection.matrix);
    put_f32s(&mut out, &cb.centroids);
    out
}

pub fn decode_codebook(bytes: &[u8]) -> Result<Codebook> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CODEBOOK_MAGIC {
        return Err(Error::Format("not a codebook file".into()));
    }
    let version = r.u32()?;
    if version != CODEBOOK_VERSION {
        return Err(Error::Format(format!(
            "unsupported codebook version {version}"
        )));
    }
    let source = CodebookSource::from_byte(r.u8()?)?;
    if r.u8()? != 0 {
        return Err(Error::Format("unknown metric".into()));
    }
    let kind = match r.u8()? {
        0 => ProjectionKind::Identity,
        1 => ProjectionKind::FixedRandomOrthonormal,
        b => return Err(Error::Format(format!("unknown projection kind {b}"))),
    };
    r.u8()?;
    let k = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let in_dim = r.u32()? as usize;
    if k == 0 || dim == 0 {
        return Err(Error::Format("empty codebook".into()));
    }
    let binding = r.string()?;
    let matrix = match kind {
        ProjectionKind::Identity => {
            if in_dim != dim {
                return Err(Error::Format(
                    "identity projection with in_dim != dim".into(),
                ));
            }
            Vec::new()
        }
        ProjectionKind::FixedRandomOrthonormal => r.f32s(
            dim.checked_mul(in_dim)
                .ok_or_else(|| Error::Format("projection size overflow".into()))?,
        )?,
    };
    let centroids = r.f32s(
        k.checked_mul(dim)
            .ok_or_else(|| Error::Format("centroid size overflow".into()))?,
    )?;
    r.finish()?;
    if centroids.iter().chain(&matrix).any(|x| !x.is_finite()) {
        return Err(Error::Format("non-finite codebook payload".into()));
    }
    Ok(Codebook {
        k,
        dim,
        centroids,
        projection: Projection {
            kind,
            in_dim,
            out_dim: dim,
            matrix,
        },
        source,
        binding,
    })
}

pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &encode_codebook(cb))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codebook(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExternalPayload {
    /// `frames × dim` embeddings, quantized at import.
    Embeddings {
        dim: usize,
        values: Vec<f32>,
    },
    Labels(Vec<i32>),
}

impl ExternalPayload {
    pub fn frame_count(&self) -> usize {
        match self {
            ExternalPayload::Embeddings { dim, values } => values.len() / dim,
            ExternalPayload::Labels(l) => l.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalRecord {
    pub clip_id: String,
    pub payload: ExternalPayload,
}

pub fn encode_external_frames(records: &[ExternalRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EXTERNAL_MAGIC);
    out.extend_from_slice(&EXTERNAL_VERSION.to_le_bytes());
    let (kind, dim) = match records.first().map(|r| &r.payload) {
        Some(ExternalPayload::Embeddings { dim, .. }) => (0u8, *dim),
        _ => (1u8, 0),
    };
    out.push(kind);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for rec in records {
        put_string(&mut out, &rec.clip_id);
        out.extend_from_slice(&(rec.payload.frame_count() as u32).to_le_bytes());
        match (&rec.payload, kind) {
            (ExternalPayload::Embeddings { dim: d, values }, 0) if *d == dim => {
                put_f32s(&mut out, values)
            }
            (ExternalPayload::Labels(l), 1) => l
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            _ => {
                return Err(Error::Format(
                    "records mix payload kinds or dimensions".into(),
                ))
            }
        }
    }
    Ok(out)
}

pub fn decode_external_frames(bytes: &[u8]) -> Result<Vec<ExternalRecord>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EXTERNAL_MAGIC {
        return Err(Error::Format("not an external frame file".into()));
    }
    let version = r.u32()?;
    if version != EXTERNAL_VERSION {
        return Err(Error::Format(format!(
            "unsupported external frame version {version}"
        )));
    }
    let kind = r.u8()?;
    let dim = r.u32()? as usize;
    let n = r.u32()? as usize;
    if kind == 0 && dim == 0 {
        return Err(Error::Format(
            "embedding records with zero dimension".into(),
        ));
    }
    let mut records = Vec::new();
    for _ in 0..n {
        let clip_id = r.string()?;
        let frames = r.u32()? as usize;
        let payload = match kind {
            0 => ExternalPayload::Embeddings {
                dim,
                values: r.f32s(
                    frames
                        .checked_mul(dim)
                        .ok_or_else(|| Error::Format("payload size overflow".into()))?,
                )?,
            },
            1 => {
                let raw = r.take(
                    frames
                        .checked_mul(4)
                        .ok_or_else(|| Error::Format("payload size overflow".into()))?,
                )?;
                ExternalPayload::Labels(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            _ => return Err(Error::Format(format!("unknown payload kind {kind}"))),
        };
        records.push(ExternalRecord { clip_id, payload });
    }
    r.finish()?;
    Ok(records)
}

/// Reads an external frame file and turns every record into per-frame labels.
/// Embedding records need a codebook of source `ExternalEmbedding`.
pub fn import_external_frames(
    path: &Path,
    expected_rate_hz: f64,
    clip_seconds: f64,
    codebook: Option<&Codebook>,
) -> Result<BTreeMap<String, Vec<u32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    labels_from_records(
        &decode_external_frames(&bytes)?,
        expected_rate_hz,
        clip_seconds,
        codebook,
    )
}

pub fn labels_from_records(
    records: &[ExternalRecord],
    expected_rate_hz: f64,
    clip_seconds: f64,
    codebook: Option<&Codebook>,
) -> Result<BTreeMap<String, Vec<u32>>> {
    let expected = (expected_rate_hz * clip_seconds).round() as usize;
    let mut out = BTreeMap::new();
    for rec in records {
        if rec.payload.frame_count() != expected {
            return Err(Error::Geometry(format!(
                "clip {} has {} external frames, expected {expected}",
                rec.clip_id,
                rec.payload.frame_count()
            )));
        }
        let labels = match &rec.payload {
            ExternalPayload::Labels(l) => l
                .iter()
                .map(|&x| {
                    u32::try_from(x).map_err(|_| Error::Format(format!("negative label {x}")))
                })
                .collect::<Result<Vec<_>>>()?,
            ExternalPayload::Embeddings { dim, values } => {
                let cb = codebook.ok_or_else(|| {
                    Error::Mismatch(
                        "embedding records require an external-embedding codebook".into(),
                    )
                })?;
                if cb.source != CodebookSource::ExternalEmbedding {
                    return Err(Error::Mismatch(
                        "codebook source is not external_embedding".into(),
                    ));
                }
                values
                    .chunks_exact(*dim)
                    .map(|v| assign(v, cb).map(|l| l as u32))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if out.insert(rec.clip_id.clone(), labels).is_some() {
            return Err(Error::Format(format!("duplicate clip id {}", rec.clip_id)));
        }
    }
    Ok(out)
}
