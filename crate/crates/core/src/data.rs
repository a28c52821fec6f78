//! Corpus manifests, batch sampling, spectrogram caching and the synthetic
//! four-class generator used by the tests.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{self, FrontendConfig, MelSpectrogram};
use crate::io::write_atomic;
use crate::quantizer::Reader;
use crate::rng::{self, purpose};
use crate::wav::{self, PcmAudio};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: Option<u32>,
    pub fold: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

fn parse_opt_u32(field: &str, what: &str, line: usize) -> Result<Option<u32>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<u32>()
        .map(Some)
        .map_err(|_| Error::Format(format!("line {line}: bad {what} {field:?}")))
}

impl CorpusManifest {
    /// Parses tab-separated `id, path, label, fold` lines. Label and fold may
    /// be empty or omitted; blank lines and `#` comments are skipped.
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() < 2 || fields.len() > 4 {
                return Err(Error::Format(format!(
                    "line {line}: expected 2 to 4 tab-separated fields"
                )));
            }
            let id = fields[0];
            if id.is_empty() || fields[1].is_empty() {
                return Err(Error::Format(format!("line {line}: empty id or path")));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::Format(format!("line {line}: duplicate id {id:?}")));
            }
            let label = parse_opt_u32(fields.get(2).copied().unwrap_or(""), "label", line)?;
            let fold = parse_opt_u32(fields.get(3).copied().unwrap_or(""), "fold", line)?;
            entries.push(ManifestEntry {
                id: id.to_string(),
                path: PathBuf::from(fields[1]),
                label,
                fold,
            });
        }
        Ok(Self {
            root: root.into(),
            entries,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.id,
                e.path.display(),
                opt(e.label),
                opt(e.fold)
            ));
        }
        out
    }

    /// Reads a manifest whose paths are relative to its own directory and
    /// checks that every referenced file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self::parse(&text, root)?;
        for e in &m.entries {
            let p = m.resolve(e);
            if !p.is_file() {
                return Err(Error::NotFound(format!("clip {} at {}", e.id, p.display())));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        for e in &self.entries {
            let s = e.path.to_string_lossy();
            if e.id.contains(['\t', '\n', '\r'])
                || s.contains(['\t', '\n', '\r'])
                || e.id.starts_with('#')
            {
                return Err(Error::Format(format!(
                    "entry {:?} cannot be written as a manifest line",
                    e.id
                )));
            }
        }
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn resolve(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Result<Vec<u32>> {
        self.entries
            .iter()
            .map(|e| {
                e.label
                    .ok_or_else(|| Error::Format(format!("clip {} has no label", e.id)))
            })
            .collect()
    }
}

/// Clip indices for one step, uniform with replacement.
pub fn sample_batch(n_clips: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if n_clips == 0 {
        return Err(Error::Insufficient("empty corpus".into()));
    }
    let mut r = rng::stream(seed, &[purpose::BATCH, step]);
    Ok((0..batch_size).map(|_| r.gen_range(0..n_clips)).collect())
}

pub fn iterate_batches(
    manifest: &CorpusManifest,
    batch_size: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<&ManifestEntry>> {
    Ok(sample_batch(manifest.len(), batch_size, seed, step)?
        .into_iter()
        .map(|i| &manifest.entries[i])
        .collect())
}

const MEL_MAGIC: &[u8; 4] = b"ULMS";
const MEL_VERSION: u32 = 1;

pub fn encode_mel(spec: &MelSpectrogram) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + spec.values.len() * 4);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&MEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.n_mels as u32).to_le_bytes());
    out.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    for v in &spec.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_mel(bytes: &[u8]) -> Result<MelSpectrogram> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MEL_MAGIC {
        return Err(Error::Format("not a spectrogram blob".into()));
    }
    let version = r.u32()?;
    if version != MEL_VERSION {
        return Err(Error::Format(format!(
            "unsupported spectrogram version {version}"
        )));
    }
    let n_mels = r.u32()? as usize;
    let n_frames = r.u32()? as usize;
    let n = n_mels
        .checked_mul(n_frames)
        .ok_or_else(|| Error::Format("spectrogram size overflows".into()))?;
    let values = r.f32s(n)?;
    r.finish()?;
    MelSpectrogram::new(n_mels, n_frames, values)
}

/// Spectrograms keyed by audio content hash and frontend config hash.
#[derive(Debug, Clone)]
pub struct SpectrogramCache {
    pub dir: PathBuf,
}

impl SpectrogramCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    fn key_path(&self, wav_bytes: &[u8], cfg: &FrontendConfig) -> PathBuf {
        let content = crate::io::sha256_hex(wav_bytes);
        self.dir
            .join(format!("{}-{}.mel", &content[..32], &cfg.hash()[..16]))
    }

    /// Returns the cached spectrogram or computes and stores it.
    pub fn get_or_compute(&self, wav_path: &Path, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
        let bytes = std::fs::read(wav_path).map_err(|e| Error::io(wav_path, e))?;
        let key = self.key_path(&bytes, cfg);
        if let Ok(blob) = std::fs::read(&key) {
            if let Ok(spec) = decode_mel(&blob) {
                return Ok(spec);
            }
        }
        let clip = frontend::clip_from_pcm(&wav::decode_wav(&bytes)?, cfg)?;
        let spec = frontend::compute_logmel(&clip, cfg)?;
        write_atomic(&key, &encode_mel(&spec))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthClass {
    Tone,
    Chirp,
    Noise,
    AmTone,
}

impl SynthClass {
    pub const ALL: [SynthClass; 4] = [
        SynthClass::Tone,
        SynthClass::Chirp,
        SynthClass::Noise,
        SynthClass::AmTone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthClass::Tone => "tone",
            SynthClass::Chirp => "chirp",
            SynthClass::Noise => "noise",
            SynthClass::AmTone => "am-tone",
        }
    }

    pub fn label(self) -> u32 {
        self as u32
    }
}

/// Generator settings. Every clip repeats with period `period_samples`, and
/// all frequencies sit on the `sample_rate / period_samples` grid, so the
/// 16-bit waveform (including its quantization error) is exactly periodic.
/// The default period equals one segment at the default frontend, which
/// makes each band's targets depend on the clip rather than on noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub per_class: usize,
    pub clip_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
    pub folds: u32,
    pub period_samples: usize,
    pub amplitude: (f64, f64),
    pub tone_hz: (f64, f64),
    /// Sawtooth sweep; start and end are drawn from this range.
    pub chirp_hz: (f64, f64),
    /// Frozen random-phase multisine covering a random sub-band of this range.
    pub noise_hz: (f64, f64),
    pub noise_bandwidth_hz: (f64, f64),
    pub am_carrier_hz: (f64, f64),
    /// Modulation rates are multiples of the grid step within this range.
    pub am_rate_hz: (f64, f64),
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            per_class: 50,
            clip_seconds: 8.0,
            sample_rate: frontend::SAMPLE_RATE,
            seed: 0,
            folds: 5,
            period_samples: 2560,
            amplitude: (0.2, 0.5),
            tone_hz: (300.0, 1000.0),
            chirp_hz: (1500.0, 3000.0),
            noise_hz: (5000.0, 7000.0),
            noise_bandwidth_hz: (1200.0, 2000.0),
            am_carrier_hz: (3500.0, 4500.0),
            am_rate_hz: (6.0, 19.0),
        }
    }
}

impl SynthSpec {
    pub fn grid_hz(&self) -> f64 {
        self.sample_rate as f64 / self.period_samples as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_samples == 0 || self.clip_seconds <= 0.0 || self.sample_rate == 0 {
            return Err(Error::Config(
                "period, duration and sample rate must be positive".into(),
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let ranges = [
            ("tone_hz", self.tone_hz),
            ("chirp_hz", self.chirp_hz),
            ("noise_hz", self.noise_hz),
            ("am_carrier_hz", self.am_carrier_hz),
        ];
        for (name, (lo, hi)) in ranges {
            if !(0.0 < lo && lo <= hi && hi < nyquist) {
                return Err(Error::Config(format!(
                    "{name} must satisfy 0 < lo <= hi < {nyquist}"
                )));
            }
            if self.snap_range(lo, hi).is_none() {
                return Err(Error::Config(format!("{name} contains no grid frequency")));
            }
        }
        let (a0, a1) = self.amplitude;
        if !(0.0 < a0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(
                "amplitude must satisfy 0 < lo <= hi <= 1".into(),
            ));
        }
        let (b0, b1) = self.noise_bandwidth_hz;
        if !(0.0 < b0 && b0 <= b1 && b1 <= self.noise_hz.1 - self.noise_hz.0) {
            return Err(Error::Config(
                "noise bandwidth must fit inside noise_hz".into(),
            ));
        }
        if self
            .snap_range(self.am_rate_hz.0, self.am_rate_hz.1)
            .is_none()
        {
            return Err(Error::Config(
                "am_rate_hz contains no grid frequency".into(),
            ));
        }
        if self.folds == 0 {
            return Err(Error::Config("folds must be positive".into()));
        }
        Ok(())
    }

    /// Inclusive range of grid indices inside `[lo, hi]`.
    fn snap_range(&self, lo: f64, hi: f64) -> Option<(u64, u64)> {
        let g = self.grid_hz();
        let a = (lo / g).ceil() as u64;
        let b = (hi / g).floor() as u64;
        (a <= b && a > 0).then_some((a, b))
    }

    fn draw_grid<R: Rng>(&self, range: (f64, f64), r: &mut R) -> f64 {
        let (a, b) = self.snap_range(range.0, range.1).expect("validated");
        r.gen_range(a..=b) as f64 * self.grid_hz()
    }

    /// One period of a clip's waveform, peak-normalized to `amplitude`.
    fn period<R: Rng>(&self, class: SynthClass, r: &mut R) -> Vec<f64> {
        let p = self.period_samples;
        let sr = self.sample_rate as f64;
        let t = |n: usize| n as f64 / sr;
        let amplitude = r.gen_range(self.amplitude.0..=self.amplitude.1);
        let mut x: Vec<f64> = match class {
            SynthClass::Tone => {
                let f = self.draw_grid(self.tone_hz, r);
                let phi = r.gen_range(0.0..2.0 * PI);
                (0..p).map(|n| (2.0 * PI * f * t(n) + phi).sin()).collect()
            }
            SynthClass::Chirp => {
                let f0 = self.draw_grid(self.chirp_hz, r);
                let mut f1 = self.draw_grid(self.chirp_hz, r);
                if f1 == f0 {
                    f1 = if f0 + self.grid_hz() <= self.chirp_hz.1 {
                        f0 + self.grid_hz()
                    } else {
                        f0 - self.grid_hz()
                    };
                }
                let period = p as f64 / sr;
                (0..p)
                    .map(|n| {
                        let tau = t(n);
                        (2.0 * PI * (f0 * tau + (f1 - f0) * tau * tau / (2.0 * period))).sin()
                    })
                    .collect()
            }
            SynthClass::Noise => {
                let g = self.grid_hz();
                let bw = r.gen_range(self.noise_bandwidth_hz.0..=self.noise_bandwidth_hz.1);
                let lo = r.gen_range(self.noise_hz.0..=self.noise_hz.1 - bw);
                let (a, b) = self.snap_range(lo, lo + bw).unwrap_or_else(|| {
                    let k = (lo / g).round().max(1.0) as u64;
                    (k, k)
                });
                let comps: Vec<(f64, f64)> = (a..=b)
                    .map(|k| (k as f64 * g, r.gen_range(0.0..2.0 * PI)))
                    .collect();
                (0..p)
                    .map(|n| {
                        comps
                            .iter()
                            .map(|&(f, ph)| (2.0 * PI * f * t(n) + ph).sin())
                            .sum()
                    })
                    .collect()
            }
            SynthClass::AmTone => {
                let fc = self.draw_grid(self.am_carrier_hz, r);
                let fm = self.draw_grid(self.am_rate_hz, r);
                let depth = r.gen_range(0.6..=0.9);
                (0..p)
                    .map(|n| {
                        (1.0 + depth * (2.0 * PI * fm * t(n)).sin()) * (2.0 * PI * fc * t(n)).sin()
                    })
                    .collect()
            }
        };
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            x.iter_mut().for_each(|v| *v *= amplitude / peak);
        }
        x
    }

    /// Samples of clip `index` of a class, deterministic in (seed, class, index).
    pub fn render(&self, class: SynthClass, index: usize) -> Result<PcmAudio> {
        self.validate()?;
        let mut r = rng::stream(
            self.seed,
            &[purpose::SYNTH, class.label() as u64, index as u64],
        );
        let period = self.period(class, &mut r);
        let len = (self.clip_seconds * self.sample_rate as f64).round() as usize;
        let samples: Vec<f32> = (0..len).map(|n| period[n % period.len()] as f32).collect();
        Ok(PcmAudio {
            sample_rate: self.sample_rate,
            channels: 1,
            samples: wav::quantize_pcm16(&samples),
        })
    }
}

/// Writes `wav/<id>.wav` files and `manifest.tsv` under `out_dir`.
/// Labels follow [`SynthClass::label`]; folds cycle within each class.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(4 * spec.per_class);
    for i in 0..spec.per_class {
        for class in SynthClass::ALL {
            let id = format!("{}-{:04}", class.name(), i);
            let rel = PathBuf::from("wav").join(format!("{id}.wav"));
            let audio = spec.render(class, i)?;
            wav::write_wav(&out_dir.join(&rel), &audio)?;
            entries.push(ManifestEntry {
                id,
                path: rel,
                label: Some(class.label()),
                fold: Some(i as u32 % spec.folds),
            });
        }
    }
    let manifest = CorpusManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
