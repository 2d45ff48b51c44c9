//! RIFF/WAVE reading and writing, restricted to 16-bit PCM mono at 16 kHz.

use std::fs;
use std::path::Path;

use super::{AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};

fn unsupported(field: &'static str, detail: impl Into<String>) -> Error {
    Error::UnsupportedAudio {
        field,
        detail: detail.into(),
    }
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" {
        return Err(unsupported("riff", "missing RIFF header"));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(unsupported("wave", "RIFF form type is not WAVE"));
    }
    let mut pos = 12;
    let mut fmt_seen = false;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        let end = body
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| unsupported("chunk_size", format!("chunk {:?} overruns file", String::from_utf8_lossy(id))))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(unsupported("fmt", "fmt chunk shorter than 16 bytes"));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != 1 {
                    return Err(unsupported("audio_format", format!("{format} (only PCM = 1)")));
                }
                if channels != 1 {
                    return Err(unsupported("channels", format!("{channels} (only mono)")));
                }
                if rate != SAMPLE_RATE {
                    return Err(unsupported("sample_rate", format!("{rate} (only {SAMPLE_RATE})")));
                }
                if bits != 16 {
                    return Err(unsupported("bits_per_sample", format!("{bits} (only 16)")));
                }
                fmt_seen = true;
            }
            b"data" => {
                if !fmt_seen {
                    return Err(unsupported("fmt", "data chunk before fmt chunk"));
                }
                let samples = bytes[body..end]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return AudioClip::new(samples, SAMPLE_RATE);
            }
            _ => {}
        }
        pos = end + (size & 1);
    }
    Err(unsupported("data", "no data chunk"))
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes)
}

/// Quantize to 16-bit PCM and encode. Samples are clamped to `[-1, 1)`.
pub fn encode_wav(samples: &[f64]) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    out.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    fs::write(path, encode_wav(samples)).map_err(|e| Error::io(path, e))
}
