//! Waveform loading and log-mel feature extraction.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wav;

pub const SAMPLE_RATE: u32 = 16000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub clip_seconds: f64,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: 128,
            win_ms: 25.0,
            hop_ms: 10.0,
            clip_seconds: 8.0,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn hash(&self) -> String {
        crate::io::hash_json(self)
    }

    pub fn win_samples(&self) -> usize {
        (self.win_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    pub fn clip_samples(&self) -> usize {
        (self.clip_seconds * SAMPLE_RATE as f64).round() as usize
    }

    /// FFT size: the window zero-padded to the next power of two.
    pub fn n_fft(&self) -> usize {
        self.win_samples().next_power_of_two()
    }

    pub fn n_frames(&self) -> usize {
        self.clip_samples() / self.hop_samples()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be > 0".into()));
        }
        if self.win_samples() < 2 || self.hop_samples() == 0 {
            return Err(Error::Config("window and hop must be positive".into()));
        }
        if !self.clip_samples().is_multiple_of(self.hop_samples()) {
            return Err(Error::Config(format!(
                "clip of {} samples is not a whole number of {}-sample hops",
                self.clip_samples(),
                self.hop_samples()
            )));
        }
        if self.clip_samples() <= self.win_samples() / 2 {
            return Err(Error::Config("clip shorter than half a window".into()));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config(format!(
                "need 0 <= fmin < fmax <= {}, got fmin={} fmax={}",
                SAMPLE_RATE / 2,
                self.fmin,
                self.fmax
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaveformClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl WaveformClip {
    /// Truncates from the end or zero-pads at the end to exactly `len` samples.
    pub fn fit_to(mut samples: Vec<f32>, len: usize) -> Self {
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: SAMPLE_RATE,
        }
    }
}

/// D×M log-mel matrix stored row-major (one row per mel band).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != n_mels * n_frames {
            return Err(Error::Geometry(format!(
                "{} values for a {n_mels}x{n_frames} spectrogram",
                values.len()
            )));
        }
        Ok(Self {
            n_mels,
            n_frames,
            values,
        })
    }

    #[inline]
    pub fn get(&self, band: usize, frame: usize) -> f32 {
        self.values[band * self.n_frames + frame]
    }

    pub fn column(&self, frame: usize) -> Vec<f32> {
        (0..self.n_mels).map(|d| self.get(d, frame)).collect()
    }

    /// Per-band average over time.
    pub fn mean_column(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.n_frames)
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>() / self.n_frames as f64)
            .collect()
    }
}

pub fn load_clip(path: &Path, config: &FrontendConfig) -> Result<WaveformClip> {
    let audio = wav::read_wav(path)?;
    clip_from_pcm(&audio, config)
}

pub fn clip_from_pcm(audio: &wav::PcmAudio, config: &FrontendConfig) -> Result<WaveformClip> {
    if audio.channels != 1 {
        return Err(Error::Audio(format!(
            "expected mono, got {} channels",
            audio.channels
        )));
    }
    if audio.sample_rate != SAMPLE_RATE {
        return Err(Error::Audio(format!(
            "expected {SAMPLE_RATE} Hz, got {} Hz",
            audio.sample_rate
        )));
    }
    let samples = audio.samples.iter().map(|&s| s as f32 / 32768.0).collect();
    Ok(WaveformClip::fit_to(samples, config.clip_samples()))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Edge frequencies of the triangular filters: `n_mels + 2` points.
pub fn mel_edges_hz(config: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.fmin);
    let hi = hz_to_mel(config.fmax);
    let n = config.n_mels + 2;
    (0..n)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect()
}

/// Center frequency of each mel filter.
pub fn mel_centers_hz(config: &FrontendConfig) -> Vec<f64> {
    let edges = mel_edges_hz(config);
    edges[1..edges.len() - 1].to_vec()
}

/// Slaney-style area-normalized triangular filterbank, `n_mels × (n_fft/2+1)`.
pub fn mel_filterbank(config: &FrontendConfig) -> Vec<Vec<f64>> {
    let n_fft = config.n_fft();
    let n_bins = n_fft / 2 + 1;
    let edges = mel_edges_hz(config);
    let bin_hz: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * SAMPLE_RATE as f64 / n_fft as f64)
        .collect();
    (0..config.n_mels)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let norm = 2.0 / (hi - lo);
            bin_hz
                .iter()
                .map(|&f| {
                    let rise = (f - lo) / (c - lo);
                    let fall = (hi - f) / (hi - c);
                    rise.min(fall).max(0.0) * norm
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

fn reflect_pad(x: &[f32], pad: usize) -> Vec<f64> {
    let n = x.len() as isize;
    let total = x.len() + 2 * pad;
    (0..total)
        .map(|i| {
            let mut j = i as isize - pad as isize;
            // mirror without repeating the edge sample
            while j < 0 || j >= n {
                if j < 0 {
                    j = -j;
                }
                if j >= n {
                    j = 2 * (n - 1) - j;
                }
            }
            x[j as usize] as f64
        })
        .collect()
}

/// Log-mel spectrogram with centered frames: the waveform is reflect-padded
/// by half a window on each side and exactly `len / hop` frames are taken.
pub fn compute_logmel(clip: &WaveformClip, config: &FrontendConfig) -> Result<MelSpectrogram> {
    config.validate()?;
    if clip.sample_rate != SAMPLE_RATE || clip.samples.len() != config.clip_samples() {
        return Err(Error::Geometry(format!(
            "clip has {} samples at {} Hz, expected {} at {SAMPLE_RATE} Hz",
            clip.samples.len(),
            clip.sample_rate,
            config.clip_samples()
        )));
    }
    let win = config.win_samples();
    let hop = config.hop_samples();
    let n_fft = config.n_fft();
    let n_frames = config.n_frames();
    let window = hann_window(win);
    let fbank = mel_filterbank(config);
    let padded = reflect_pad(&clip.samples, win / 2);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut values = vec![0f32; config.n_mels * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0f64; n_fft / 2 + 1];
    for t in 0..n_frames {
        let start = t * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < win {
                Complex::new(padded[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, b) in power.iter_mut().zip(&buf) {
            *p = b.norm_sqr();
        }
        for (m, filt) in fbank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * n_frames + t] = (e + config.log_floor).ln() as f32;
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-mel output".into()));
    }
    MelSpectrogram::new(config.n_mels, n_frames, values)
}
