//! Minimal RIFF/WAVE codec for 16-bit PCM.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcmAudio {
    pub sample_rate: u32,
    pub channels: u16,
    /// Interleaved samples.
    pub samples: Vec<i16>,
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Decodes a RIFF/WAVE byte buffer. Only PCM format tag 1 with 16 bits per
/// sample is accepted; unknown chunks are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<PcmAudio> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("chunk runs past end of file".into()))?;
        match id {
            b"fmt " => {
                if len < 16 {
                    return Err(Error::Format("fmt chunk too short".into()));
                }
                fmt = Some((
                    read_u16(bytes, body),
                    read_u16(bytes, body + 2),
                    read_u32(bytes, body + 4),
                    read_u16(bytes, body + 14),
                ));
            }
            b"data" => {
                let (tag, channels, rate, bits) =
                    fmt.ok_or_else(|| Error::Format("data chunk before fmt chunk".into()))?;
                if tag != 1 || bits != 16 {
                    return Err(Error::Audio(format!(
                        "expected 16-bit PCM, got format tag {tag} with {bits} bits"
                    )));
                }
                if channels == 0 {
                    return Err(Error::Format("zero channels".into()));
                }
                if !len.is_multiple_of(2 * channels as usize) {
                    return Err(Error::Format(
                        "data length not a whole number of frames".into(),
                    ));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]))
                    .collect();
                return Ok(PcmAudio {
                    sample_rate: rate,
                    channels,
                    samples,
                });
            }
            _ => {}
        }
        // chunks are word aligned
        pos = end + (len & 1);
    }
    Err(Error::Format("no data chunk".into()))
}

pub fn encode_wav(audio: &PcmAudio) -> Vec<u8> {
    let data_len = audio.samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&audio.channels.to_le_bytes());
    out.extend_from_slice(&audio.sample_rate.to_le_bytes());
    let block_align = audio.channels as u32 * 2;
    out.extend_from_slice(&(audio.sample_rate * block_align).to_le_bytes());
    out.extend_from_slice(&(block_align as u16).to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for s in &audio.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<PcmAudio> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

pub fn write_wav(path: &Path, audio: &PcmAudio) -> Result<()> {
    std::fs::write(path, encode_wav(audio)).map_err(|e| Error::io(path, e))
}

/// Converts [-1, 1] floats to 16-bit PCM with clipping.
pub fn quantize_pcm16(samples: &[f32]) -> Vec<i16> {
    samples
        .iter()
        .map(|&s| (s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
        .collect()
}
