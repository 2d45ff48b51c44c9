use super::FeatureMatrix;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Smallest standard deviation used for normalization.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-dimension mean and standard deviation over a training corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frame_count: u64,
    /// Dimensions whose variance was zero (or below the floor) and got clamped.
    pub clamped: Vec<bool>,
}

impl NormStats {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

/// Streaming mean/variance accumulator; accumulators merge pairwise.
#[derive(Clone, Debug, Default)]
pub struct NormAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl NormAccumulator {
    pub fn new(dims: usize) -> Self {
        NormAccumulator {
            count: 0,
            mean: vec![0.0; dims],
            m2: vec![0.0; dims],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, features: &FeatureMatrix) -> Result<()> {
        if self.count == 0 && self.mean.is_empty() {
            *self = NormAccumulator::new(features.dims());
        }
        if features.dims() != self.mean.len() {
            return Err(Error::contract(format!(
                "feature dims {} differ from accumulator dims {}",
                features.dims(),
                self.mean.len()
            )));
        }
        for t in 0..features.frames() {
            self.count += 1;
            let n = self.count as f64;
            for (d, &x) in features.frame(t).iter().enumerate() {
                let delta = x - self.mean[d];
                self.mean[d] += delta / n;
                self.m2[d] += delta * (x - self.mean[d]);
            }
        }
        Ok(())
    }

    /// Combine two partial accumulators (parallel Welford update).
    pub fn merge(&mut self, other: &NormAccumulator) -> Result<()> {
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        if other.mean.len() != self.mean.len() {
            return Err(Error::contract("merging accumulators of different dims"));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for d in 0..self.mean.len() {
            let delta = other.mean[d] - self.mean[d];
            self.mean[d] += delta * nb / n;
            self.m2[d] += other.m2[d] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<NormStats> {
        if self.count == 0 {
            return Err(Error::EmptyFeatures("normalization corpus is empty".into()));
        }
        let n = self.count as f64;
        let mut clamped = Vec::with_capacity(self.mean.len());
        let std = self
            .m2
            .iter()
            .map(|&m2| {
                let s = (m2 / n).max(0.0).sqrt();
                clamped.push(s < STD_FLOOR);
                s.max(STD_FLOOR)
            })
            .collect();
        Ok(NormStats {
            mean: self.mean.clone(),
            std,
            frame_count: self.count,
            clamped,
        })
    }
}

pub fn compute_norm_stats<'a, I>(corpus: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a FeatureMatrix>,
{
    let mut acc = NormAccumulator::default();
    for f in corpus {
        if f.is_normalized() {
            return Err(Error::contract("normalization stats need unnormalized features"));
        }
        acc.push(f)?;
    }
    acc.finish()
}

fn check_dims(features: &FeatureMatrix, stats: &NormStats) -> Result<()> {
    if features.dims() != stats.dims() {
        return Err(Error::contract(format!(
            "features have {} dims, stats have {}",
            features.dims(),
            stats.dims()
        )));
    }
    Ok(())
}

/// `(x - mean) / std` per dimension.
pub fn apply_norm(features: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix> {
    check_dims(features, stats)?;
    let mut values = Matrix::zeros(features.frames(), features.dims());
    for t in 0..features.frames() {
        for (d, (dst, &x)) in values.row_mut(t).iter_mut().zip(features.frame(t)).enumerate() {
            *dst = (x - stats.mean[d]) / stats.std[d];
        }
    }
    FeatureMatrix::new(values, true)
}

/// Inverse of [`apply_norm`].
pub fn denormalize(features: &FeatureMatrix, stats: &NormStats) -> Result<FeatureMatrix> {
    check_dims(features, stats)?;
    let mut values = Matrix::zeros(features.frames(), features.dims());
    for t in 0..features.frames() {
        for (d, (dst, &x)) in values.row_mut(t).iter_mut().zip(features.frame(t)).enumerate() {
            *dst = x * stats.std[d] + stats.mean[d];
        }
    }
    FeatureMatrix::new(values, false)
}
