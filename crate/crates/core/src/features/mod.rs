//! Audio front end: framing, log-mel filterbanks, energy VAD and corpus
//! normalization.

pub mod fft;
pub mod format;
pub mod mel;
pub mod norm;
pub mod wav;

use std::f64::consts::PI;

pub use format::{read_features, read_norm_stats, write_features, write_norm_stats};
pub use norm::{apply_norm, compute_norm_stats, denormalize, NormAccumulator, NormStats};

use crate::error::{Error, Result};
use crate::numcore::Matrix;
use fft::Fft;
use mel::MelFilterbank;

pub const SAMPLE_RATE: u32 = 16_000;
/// Floor added before taking the log of filterbank energies.
pub const LOG_FLOOR: f64 = 1e-10;

/// Mono PCM audio scaled to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::UnsupportedAudio {
                field: "sample_rate",
                detail: format!("{sample_rate} (only {SAMPLE_RATE})"),
            });
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// `T × F` feature grid, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    values: Matrix,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, normalized: bool) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::contract("feature values must be finite"));
        }
        Ok(FeatureMatrix { values, normalized })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dims(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.values.row(t)
    }

    /// Keep only the frames whose mask entry is set.
    pub fn select(&self, mask: &[bool]) -> Result<FeatureMatrix> {
        if mask.len() != self.frames() {
            return Err(Error::contract(format!(
                "mask of length {} for {} frames",
                mask.len(),
                self.frames()
            )));
        }
        let kept: Vec<f64> = mask
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .flat_map(|(t, _)| self.frame(t).iter().copied())
            .collect();
        let rows = kept.len() / self.dims().max(1);
        if rows == 0 {
            return Err(Error::EmptyFeatures("mask removes every frame".into()));
        }
        Ok(FeatureMatrix {
            values: Matrix::from_vec(rows, self.dims(), kept)?,
            normalized: self.normalized,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub win_ms: u32,
    pub hop_ms: u32,
    pub f_min: f64,
    pub f_max: f64,
    pub vad: bool,
    pub vad_threshold_db: f64,
    pub vad_min_run: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            n_mels: 40,
            win_ms: 32,
            hop_ms: 16,
            f_min: 0.0,
            f_max: 8000.0,
            vad: true,
            vad_threshold_db: 40.0,
            vad_min_run: 5,
        }
    }
}

fn ms_to_samples(ms: u32) -> usize {
    (SAMPLE_RATE as usize * ms as usize) / 1000
}

/// Number of whole windows of `win` samples at stride `hop` in `n` samples.
pub fn frame_count(n: usize, win: usize, hop: usize) -> usize {
    if n < win {
        0
    } else {
        (n - win) / hop + 1
    }
}

/// Periodic Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Slice `clip` into Hamming-windowed frames.
pub fn frame_signal(clip: &AudioClip, win_ms: u32, hop_ms: u32) -> Result<Vec<Vec<f64>>> {
    let win = ms_to_samples(win_ms);
    let hop = ms_to_samples(hop_ms);
    if win == 0 || hop == 0 {
        return Err(Error::contract("window and hop must be non-zero"));
    }
    let n = clip.samples().len();
    let count = frame_count(n, win, hop);
    if count == 0 {
        return Err(Error::EmptyFeatures(format!(
            "clip of {n} samples is shorter than one {win}-sample window"
        )));
    }
    let window = hamming(win);
    Ok((0..count)
        .map(|f| {
            clip.samples()[f * hop..f * hop + win]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect()
        })
        .collect())
}

/// Log-mel front end with cached FFT tables and filterbank.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    fft: Fft,
    filterbank: MelFilterbank,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        let win = ms_to_samples(config.win_ms);
        if win == 0 || config.hop_ms == 0 || config.n_mels == 0 {
            return Err(Error::Config("feature window, hop and mel count must be non-zero".into()));
        }
        if !(config.f_min >= 0.0 && config.f_max > config.f_min && config.f_max <= SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel range {}..{} Hz is invalid",
                config.f_min, config.f_max
            )));
        }
        let n_fft = win.next_power_of_two();
        let fft = Fft::new(n_fft);
        let filterbank = MelFilterbank::new(config.n_mels, n_fft, SAMPLE_RATE, config.f_min, config.f_max);
        Ok(FeatureExtractor {
            config,
            fft,
            filterbank,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Unnormalized log-mel energies of already-windowed frames.
    pub fn logmel(&self, frames: &[Vec<f64>]) -> Result<FeatureMatrix> {
        if frames.is_empty() {
            return Err(Error::EmptyFeatures("no frames".into()));
        }
        let dims = self.filterbank.n_mels();
        let mut values = Matrix::zeros(frames.len(), dims);
        for (t, frame) in frames.iter().enumerate() {
            let power = self.fft.power_spectrum(frame);
            let energies = self.filterbank.apply(&power);
            for (dst, e) in values.row_mut(t).iter_mut().zip(energies) {
                *dst = (e + LOG_FLOOR).ln();
            }
        }
        FeatureMatrix::new(values, false)
    }

    /// Framing, log-mel and (when enabled) VAD pruning.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let frames = frame_signal(clip, self.config.win_ms, self.config.hop_ms)?;
        let feats = self.logmel(&frames)?;
        if !self.config.vad {
            return Ok(feats);
        }
        let mask = energy_vad(&feats, self.config.vad_threshold_db, self.config.vad_min_run)?;
        feats.select(&mask)
    }
}

/// Mean log-energy per frame.
pub fn frame_energies(features: &FeatureMatrix) -> Vec<f64> {
    (0..features.frames())
        .map(|t| features.frame(t).iter().sum::<f64>() / features.dims() as f64)
        .collect()
}

/// Keep frames within `threshold_db` of the loudest frame, then drop kept runs
/// shorter than `min_run` frames.
pub fn energy_vad(features: &FeatureMatrix, threshold_db: f64, min_run: usize) -> Result<Vec<bool>> {
    if features.is_normalized() {
        return Err(Error::contract("energy VAD expects unnormalized features"));
    }
    if features.frames() == 0 {
        return Err(Error::EmptyFeatures("no frames".into()));
    }
    let energy = frame_energies(features);
    let max = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = max - threshold_db / 10.0 * std::f64::consts::LN_10;
    let mut mask: Vec<bool> = energy.iter().map(|&e| e >= floor).collect();

    let mut t = 0;
    while t < mask.len() {
        if !mask[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < mask.len() && mask[t] {
            t += 1;
        }
        if t - start < min_run {
            mask[start..t].iter_mut().for_each(|m| *m = false);
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyFeatures("VAD pruned every frame".into()));
    }
    Ok(mask)
}
