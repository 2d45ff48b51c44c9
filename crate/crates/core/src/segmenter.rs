//! Sliding-window segmentation with 50% overlap.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::numcore::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowMode {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowPolicy {
    pub mode: WindowMode,
    /// Inclusive range the per-batch training length is drawn from.
    pub train_range: (usize, usize),
    pub test_length: usize,
    /// Append one window anchored at the end when the last regular window
    /// leaves trailing frames uncovered.
    pub tail_segment: bool,
    /// Tile utterances shorter than the window instead of rejecting them.
    pub repeat_pad: bool,
}

impl Default for WindowPolicy {
    fn default() -> Self {
        WindowPolicy {
            mode: WindowMode::Train,
            train_range: (80, 120),
            test_length: 100,
            tail_segment: true,
            repeat_pad: true,
        }
    }
}

impl WindowPolicy {
    pub fn with_mode(&self, mode: WindowMode) -> Self {
        WindowPolicy {
            mode,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.train_range;
        if lo < 2 || hi < lo {
            return Err(Error::Config(format!("window range [{lo}, {hi}] is invalid")));
        }
        if self.test_length < 2 {
            return Err(Error::Config("test window must be at least 2 frames".into()));
        }
        Ok(())
    }
}

/// Window length for one batch: uniform over the training range, or the fixed
/// test length.
pub fn draw_batch_window<R: Rng + ?Sized>(policy: &WindowPolicy, rng: &mut R) -> usize {
    match policy.mode {
        WindowMode::Train => rng.gen_range(policy.train_range.0..=policy.train_range.1),
        WindowMode::Test => policy.test_length,
    }
}

/// One fixed-length window of an utterance's features.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub values: Matrix,
    pub padded: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

pub fn hop_for(length: usize) -> usize {
    (length / 2).max(1)
}

/// Start frames of the windows `segment` would produce.
pub fn segment_starts(frames: usize, length: usize, tail_segment: bool) -> Vec<usize> {
    if frames < length {
        return vec![0];
    }
    let hop = hop_for(length);
    let mut starts: Vec<usize> = (0..).map(|k| k * hop).take_while(|s| s + length <= frames).collect();
    let last = *starts.last().unwrap();
    if tail_segment && last + length < frames {
        starts.push(frames - length);
    }
    starts
}

pub fn segment(features: &FeatureMatrix, length: usize, policy: &WindowPolicy) -> Result<Vec<Segment>> {
    let frames = features.frames();
    if frames == 0 {
        return Err(Error::EmptyFeatures("cannot segment an empty utterance".into()));
    }
    if length == 0 {
        return Err(Error::contract("segment length must be positive"));
    }
    let dims = features.dims();
    let src = features.values();
    if frames < length {
        if !policy.repeat_pad {
            return Err(Error::EmptyFeatures(format!(
                "utterance of {frames} frames is shorter than the {length}-frame window"
            )));
        }
        let mut values = Matrix::zeros(length, dims);
        for t in 0..length {
            values.row_mut(t).copy_from_slice(src.row(t % frames));
        }
        return Ok(vec![Segment {
            start: 0,
            values,
            padded: true,
        }]);
    }
    Ok(segment_starts(frames, length, policy.tail_segment)
        .into_iter()
        .map(|start| {
            let data = src.data()[start * dims..(start + length) * dims].to_vec();
            Segment {
                start,
                values: Matrix::from_vec(length, dims, data).expect("window within bounds"),
                padded: false,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(frames: usize) -> FeatureMatrix {
        let data = (0..frames * 2).map(|i| (i / 2) as f64).collect();
        FeatureMatrix::new(Matrix::from_vec(frames, 2, data).unwrap(), true).unwrap()
    }

    #[test]
    fn draws_are_reproducible_and_in_range() {
        let policy = WindowPolicy::default();
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let sa: Vec<usize> = (0..50).map(|_| draw_batch_window(&policy, &mut a)).collect();
        let sb: Vec<usize> = (0..50).map(|_| draw_batch_window(&policy, &mut b)).collect();
        assert_eq!(sa, sb);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws: Vec<usize> = (0..100_000).map(|_| draw_batch_window(&policy, &mut rng)).collect();
        assert_eq!(*draws.iter().min().unwrap(), 80);
        assert_eq!(*draws.iter().max().unwrap(), 120);

        let test = policy.with_mode(WindowMode::Test);
        assert!((0..100).all(|_| draw_batch_window(&test, &mut rng) == 100));
    }

    #[test]
    fn examples() {
        let p = WindowPolicy::default();
        let one = segment(&ramp(100), 100, &p).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].start, 0);

        let five = segment(&ramp(300), 100, &p).unwrap();
        assert_eq!(five.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 50, 100, 150, 200]);

        let padded = segment(&ramp(70), 100, &p).unwrap();
        assert_eq!(padded.len(), 1);
        assert!(padded[0].padded);
        let order: Vec<f64> = (0..100).map(|t| padded[0].values.get(t, 0)).collect();
        let expected: Vec<f64> = (0..70).chain(0..30).map(|v| v as f64).collect();
        assert_eq!(order, expected);
    }

    #[test]
    fn tail_and_padding_switches() {
        let p = WindowPolicy::default();
        let with_tail = segment(&ramp(130), 100, &p).unwrap();
        assert_eq!(with_tail.iter().map(|s| s.start).collect::<Vec<_>>(), vec![0, 30]);
        let no_tail = WindowPolicy {
            tail_segment: false,
            repeat_pad: false,
            ..p
        };
        assert_eq!(segment(&ramp(130), 100, &no_tail).unwrap().len(), 1);
        assert!(matches!(segment(&ramp(70), 100, &no_tail), Err(Error::EmptyFeatures(_))));
        let empty = FeatureMatrix::new(Matrix::zeros(0, 2), true).unwrap();
        assert!(matches!(segment(&empty, 100, &p), Err(Error::EmptyFeatures(_))));
    }

    /// Every placement `s` with `s % hop == 0` and `s + T <= frames`.
    fn brute_force_starts(frames: usize, t: usize) -> Vec<usize> {
        let hop = (t / 2).max(1);
        (0..=frames).filter(|s| s % hop == 0 && s + t <= frames).collect()
    }

    proptest! {
        #[test]
        fn count_and_coverage(frames in 1usize..700, t in 2usize..130) {
            let p = WindowPolicy::default();
            let segs = segment(&ramp(frames), t, &p).unwrap();
            prop_assert!(segs.iter().all(|s| s.len() == t));
            let mut covered = vec![false; frames];
            for s in &segs {
                for k in 0..t.min(frames) {
                    covered[(s.start + k).min(frames - 1)] = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
            if frames >= t {
                let regular = brute_force_starts(frames, t);
                prop_assert_eq!(regular.len(), (frames - t) / hop_for(t) + 1);
                let tail = usize::from(regular.last().unwrap() + t < frames);
                prop_assert_eq!(segs.len(), regular.len() + tail);
                prop_assert_eq!(&segs.iter().map(|s| s.start).take(regular.len()).collect::<Vec<_>>(), &regular);
                if t % 2 == 0 {
                    prop_assert_eq!(tail, usize::from(frames % (t / 2) != 0));
                }
            } else {
                prop_assert_eq!(segs.len(), 1);
            }
        }
    }
}
