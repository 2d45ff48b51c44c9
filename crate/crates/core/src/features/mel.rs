use crate::numcore::Matrix;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the HTK mel scale.
///
/// Each filter is a triangle in Hz with height 1 at its center, evaluated at
/// the FFT bin frequencies.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `n_mels + 2` edge frequencies in Hz; filter `m` spans `edges[m]..edges[m + 2]`.
    edges: Vec<f64>,
    weights: Matrix,
    bin_hz: f64,
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Self {
        let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let mut fb = MelFilterbank {
            edges,
            weights: Matrix::zeros(n_mels, n_bins),
            bin_hz,
        };
        for m in 0..n_mels {
            for k in 0..n_bins {
                let w = fb.response(m, k as f64 * bin_hz);
                fb.weights.set(m, k, w);
            }
        }
        fb
    }

    pub fn n_mels(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.cols()
    }

    pub fn bin_hz(&self) -> f64 {
        self.bin_hz
    }

    /// `n_mels × n_bins` weight matrix.
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.edges[m + 1]
    }

    pub fn centers_hz(&self) -> Vec<f64> {
        (0..self.n_mels()).map(|m| self.center_hz(m)).collect()
    }

    /// Triangle of filter `m` evaluated at `hz`.
    pub fn response(&self, m: usize, hz: f64) -> f64 {
        let (l, c, r) = (self.edges[m], self.edges[m + 1], self.edges[m + 2]);
        if hz <= l || hz >= r {
            0.0
        } else if hz <= c {
            (hz - l) / (c - l)
        } else {
            (r - hz) / (r - c)
        }
    }

    /// Filter energies for one power spectrum.
    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        debug_assert_eq!(power.len(), self.n_bins());
        (0..self.n_mels())
            .map(|m| {
                self.weights
                    .row(m)
                    .iter()
                    .zip(power)
                    .map(|(w, p)| w * p)
                    .sum()
            })
            .collect()
    }
}
