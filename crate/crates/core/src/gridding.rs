//! Segment, spectral-patch and temporal-frame partitions of a spectrogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelSpectrogram;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Segment width in frames; also the side of a square spectral patch.
    pub patch: usize,
    /// Temporal frame width in frames.
    pub frame_width: usize,
    pub n_mels: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            patch: 16,
            frame_width: 2,
            n_mels: 128,
        }
    }
}

impl GridConfig {
    /// Spectral patches per segment.
    pub fn r_s(&self) -> usize {
        self.n_mels / self.patch
    }

    /// Temporal frames per segment.
    pub fn r_t(&self) -> usize {
        self.patch / self.frame_width
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn frame_dim(&self) -> usize {
        self.n_mels * self.frame_width
    }

    pub fn n_segments(&self, n_frames: usize) -> usize {
        n_frames / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.frame_width == 0 || self.n_mels == 0 {
            return Err(Error::Config("grid sizes must be positive".into()));
        }
        if !self.n_mels.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "n_mels {} not divisible by patch {}",
                self.n_mels, self.patch
            )));
        }
        if !self.patch.is_multiple_of(self.frame_width) {
            return Err(Error::Config(format!(
                "patch {} not divisible by frame width {}",
                self.patch, self.frame_width
            )));
        }
        Ok(())
    }

    /// Global index of spectral patch `band` in segment `segment` (0-based).
    pub fn patch_index(&self, segment: usize, band: usize) -> usize {
        segment * self.r_s() + band
    }

    pub fn frame_index(&self, segment: usize, frame: usize) -> usize {
        segment * self.r_t() + frame
    }
}

/// Dense row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Row-major vectorization.
    pub fn flatten(&self) -> Vec<f32> {
        self.data.clone()
    }

    pub fn reshape(values: Vec<f32>, rows: usize, cols: usize) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Geometry(format!(
                "cannot reshape {} values to {rows}x{cols}",
                values.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data: values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGrid {
    pub segments: Vec<Matrix>,
}

impl SegmentGrid {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Horizontal concatenation of all segments.
    pub fn concatenate(&self) -> Result<MelSpectrogram> {
        let Some(first) = self.segments.first() else {
            return Err(Error::Geometry("no segments".into()));
        };
        let rows = first.rows;
        let width = first.cols;
        let n_frames = width * self.segments.len();
        let mut values = vec![0f32; rows * n_frames];
        for (n, seg) in self.segments.iter().enumerate() {
            for r in 0..rows {
                values[r * n_frames + n * width..r * n_frames + (n + 1) * width]
                    .copy_from_slice(&seg.data[r * width..(r + 1) * width]);
            }
        }
        MelSpectrogram::new(rows, n_frames, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPatch {
    pub segment: usize,
    pub band: usize,
    pub values: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemporalFrame {
    pub segment: usize,
    pub frame: usize,
    pub values: Matrix,
}

pub fn segment(spec: &MelSpectrogram, grid: &GridConfig) -> Result<SegmentGrid> {
    if grid.patch == 0 || !spec.n_frames.is_multiple_of(grid.patch) || spec.n_frames == 0 {
        return Err(Error::Geometry(format!(
            "{} frames not divisible into segments of {}",
            spec.n_frames, grid.patch
        )));
    }
    if spec.n_mels != grid.n_mels {
        return Err(Error::Geometry(format!(
            "spectrogram has {} bands, grid expects {}",
            spec.n_mels, grid.n_mels
        )));
    }
    let p = grid.patch;
    let segments = (0..spec.n_frames / p)
        .map(|n| Matrix::from_fn(spec.n_mels, p, |r, c| spec.get(r, n * p + c)))
        .collect();
    Ok(SegmentGrid { segments })
}

/// Spectral patches in segment-major, band-ascending order.
pub fn patchify_spectral(seg: &SegmentGrid, grid: &GridConfig) -> Result<Vec<SpectralPatch>> {
    if grid.patch == 0 || !grid.n_mels.is_multiple_of(grid.patch) {
        return Err(Error::Geometry(format!(
            "{} bands not divisible into patches of {}",
            grid.n_mels, grid.patch
        )));
    }
    let p = grid.patch;
    let mut out = Vec::with_capacity(seg.len() * grid.r_s());
    for (n, s) in seg.segments.iter().enumerate() {
        if s.rows != grid.n_mels || s.cols != p {
            return Err(Error::Geometry("segment shape does not match grid".into()));
        }
        for k in 0..grid.r_s() {
            out.push(SpectralPatch {
                segment: n,
                band: k,
                values: Matrix::from_fn(p, p, |r, c| s.get(k * p + r, c)),
            });
        }
    }
    Ok(out)
}

pub fn frame_temporal(seg: &SegmentGrid, grid: &GridConfig) -> Result<Vec<TemporalFrame>> {
    if grid.frame_width == 0 || !grid.patch.is_multiple_of(grid.frame_width) {
        return Err(Error::Geometry(format!(
            "segment width {} not divisible into frames of {}",
            grid.patch, grid.frame_width
        )));
    }
    let w = grid.frame_width;
    let mut out = Vec::with_capacity(seg.len() * grid.r_t());
    for (n, s) in seg.segments.iter().enumerate() {
        if s.cols != grid.patch {
            return Err(Error::Geometry("segment shape does not match grid".into()));
        }
        for j in 0..grid.r_t() {
            out.push(TemporalFrame {
                segment: n,
                frame: j,
                values: Matrix::from_fn(s.rows, w, |r, c| s.get(r, j * w + c)),
            });
        }
    }
    Ok(out)
}

/// Flattened spectral patches of a whole spectrogram, in global patch order.
pub fn patch_vectors(spec: &MelSpectrogram, grid: &GridConfig) -> Result<Vec<Vec<f32>>> {
    let seg = segment(spec, grid)?;
    Ok(patchify_spectral(&seg, grid)?
        .into_iter()
        .map(|p| p.values.flatten())
        .collect())
}

pub fn frame_vectors(spec: &MelSpectrogram, grid: &GridConfig) -> Result<Vec<Vec<f32>>> {
    let seg = segment(spec, grid)?;
    Ok(frame_temporal(&seg, grid)?
        .into_iter()
        .map(|f| f.values.flatten())
        .collect())
}
