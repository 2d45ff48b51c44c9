//! Iterative radix-2 FFT used for the power spectrum of each analysis frame.

use std::f64::consts::PI;

/// Precomputed twiddles and bit-reversal table for one power-of-two size.
#[derive(Clone, Debug)]
pub struct Fft {
    size: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl Fft {
    /// Panics if `size` is not a power of two.
    pub fn new(size: usize) -> Self {
        assert!(size.is_power_of_two() && size >= 2, "fft size must be a power of two");
        let half = size / 2;
        let cos = (0..half).map(|k| (2.0 * PI * k as f64 / size as f64).cos()).collect();
        let sin = (0..half).map(|k| -(2.0 * PI * k as f64 / size as f64).sin()).collect();
        let bits = size.trailing_zeros();
        let bitrev = (0..size)
            .map(|i| i.reverse_bits() >> (usize::BITS - bits))
            .collect();
        Fft {
            size,
            cos,
            sin,
            bitrev,
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// In-place forward transform of `(re, im)`.
    pub fn forward(&self, re: &mut [f64], im: &mut [f64]) {
        let n = self.size;
        assert_eq!(re.len(), n);
        assert_eq!(im.len(), n);
        for i in 0..n {
            let j = self.bitrev[i];
            if j > i {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let step = n / len;
            let half = len / 2;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let (wr, wi) = (self.cos[k * step], self.sin[k * step]);
                    let a = start + k;
                    let b = a + half;
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            len <<= 1;
        }
    }

    /// `|X_k|²` for `k = 0..=size/2` of a real signal, zero-padded to `size`.
    pub fn power_spectrum(&self, signal: &[f64]) -> Vec<f64> {
        assert!(signal.len() <= self.size);
        let mut re = vec![0.0; self.size];
        re[..signal.len()].copy_from_slice(signal);
        let mut im = vec![0.0; self.size];
        self.forward(&mut re, &mut im);
        (0..=self.size / 2)
            .map(|k| re[k] * re[k] + im[k] * im[k])
            .collect()
    }
}
