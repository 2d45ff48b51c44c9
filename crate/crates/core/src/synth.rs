//! Synthetic speakers for desk-scale experiments.
//!
//! A speaker is a fixed spectral envelope: four two-pole resonators in
//! cascade (an 8-pole filter) with a base pitch and breathiness. An utterance
//! is a run of voiced bursts separated by near-silent pauses; each burst
//! excites the speaker's filter with a jittered pulse train plus noise. The
//! envelope is present in every burst, so every segment carries identity.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluator::{format_trials, Trial};
use crate::features::wav::write_wav;
use crate::features::SAMPLE_RATE;
use crate::manifest::{CorpusManifest, ManifestEntry, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_speakers: usize,
    pub train_utterances: usize,
    pub train_seconds: (f64, f64),
    pub valid_speakers: usize,
    pub valid_utterances: usize,
    pub test_speakers: usize,
    pub test_utterances: usize,
    pub test_seconds: (f64, f64),
    pub target_trials: usize,
    pub nontarget_trials: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_speakers: 10,
            train_utterances: 20,
            train_seconds: (2.0, 4.0),
            valid_speakers: 0,
            valid_utterances: 4,
            test_speakers: 5,
            test_utterances: 5,
            test_seconds: (15.0, 25.0),
            target_trials: 50,
            nontarget_trials: 150,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("train", self.train_seconds), ("test", self.test_seconds)] {
            if !(lo > 0.0 && hi >= lo && hi < 3600.0) {
                return Err(Error::Config(format!("synth {name} durations [{lo}, {hi}] s are invalid")));
            }
        }
        Ok(())
    }
}

/// Resonances of one synthetic vocal tract.
#[derive(Clone, Debug, PartialEq)]
pub struct Voice {
    /// `(centre Hz, bandwidth Hz)` of the four resonators.
    pub formants: [(f64, f64); 4],
    pub pitch_hz: f64,
    /// Noise share of the excitation, in [0, 1].
    pub breathiness: f64,
}

const FORMANT_RANGES: [(f64, f64); 4] = [(300.0, 850.0), (900.0, 2300.0), (2300.0, 3300.0), (3400.0, 4800.0)];

impl Voice {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut formants = [(0.0, 0.0); 4];
        for (f, &(lo, hi)) in formants.iter_mut().zip(&FORMANT_RANGES) {
            *f = (rng.gen_range(lo..hi), rng.gen_range(60.0..180.0));
        }
        Voice {
            formants,
            pitch_hz: rng.gen_range(90.0..240.0),
            breathiness: rng.gen_range(0.05..0.35),
        }
    }
}

/// Two-pole resonator `y[n] = g·x[n] + a1·y[n−1] + a2·y[n−2]`, gain-normalized
/// to unit peak response.
struct Resonator {
    g: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64) -> Self {
        let fs = SAMPLE_RATE as f64;
        let r = (-std::f64::consts::PI * bandwidth / fs).exp();
        let theta = 2.0 * std::f64::consts::PI * freq / fs;
        let a1 = 2.0 * r * theta.cos();
        let a2 = -r * r;
        // |H(e^{jθ})| for the unnormalized filter
        let peak = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
        Resonator {
            g: peak,
            a1,
            a2,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tick(&mut self, x: f64) -> f64 {
        let y = self.g * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Exactly `round(seconds · 16000)` samples of one utterance.
pub fn synthesize<R: Rng + ?Sized>(voice: &Voice, seconds: f64, rng: &mut R) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let total = (seconds * fs).round() as usize;
    let mut out = vec![0.0; total];

    // per-utterance jitter of pitch and resonances
    let pitch = voice.pitch_hz * (1.0 + rng.gen_range(-0.06..0.06));
    let formants: Vec<(f64, f64)> = voice
        .formants
        .iter()
        .map(|&(f, bw)| (f * (1.0 + rng.gen_range(-0.03..0.03)), bw))
        .collect();

    let mut pos = (rng.gen_range(0.05..0.2) * fs) as usize;
    while pos < total {
        let burst = (rng.gen_range(0.15..0.45) * fs) as usize;
        let end = (pos + burst).min(total);
        // a vowel-like shift shared by all speakers, so bursts differ in content
        let shift = rng.gen_range(-0.08..0.08);
        let mut bank: Vec<Resonator> = formants
            .iter()
            .map(|&(f, bw)| Resonator::new(f * (1.0 + shift), bw))
            .collect();
        let glide = rng.gen_range(-0.05..0.05);
        let loudness = rng.gen_range(0.5..1.0);
        let mut phase = 0.0;
        let ramp = (0.02 * fs) as usize;
        let len = end - pos;
        for (k, sample) in out[pos..end].iter_mut().enumerate() {
            let f0 = pitch * (1.0 + glide * k as f64 / len as f64) * (1.0 + rng.gen_range(-0.01..0.01));
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let mut x = (1.0 - voice.breathiness) * pulse * 4.0 + voice.breathiness * noise;
            for r in bank.iter_mut() {
                x = r.tick(x);
            }
            let env = (k.min(len - 1 - k) as f64 / ramp as f64).min(1.0);
            *sample = loudness * env * x;
        }
        pos = end + (rng.gen_range(0.08..0.3) * fs) as usize;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { 0.5 / peak } else { 0.0 };
    for v in out.iter_mut() {
        // faint noise floor so pauses are not digital silence
        *v = *v * gain + 1e-4 * rng.gen_range(-1.0..1.0);
    }
    out
}

/// Independent stream per `(speaker, utterance)` so adding speakers or
/// utterances leaves the others unchanged.
fn stream(seed: u64, speaker: usize, utterance: Option<usize>) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 32) | utterance.map_or(0, |u| u as u64 + 1));
    rng
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: CorpusManifest,
    pub manifest_path: PathBuf,
    pub trials: Vec<Trial>,
    pub trials_path: PathBuf,
}

struct Planned {
    entry: ManifestEntry,
    speaker: usize,
    utterance: usize,
    seconds: (f64, f64),
}

/// Write WAVs under `out/wav/`, `out/manifest.tsv` and `out/trials.tsv`.
pub fn generate(cfg: &SynthConfig, out: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let wav_dir = out.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let groups = [
        (Split::Train, cfg.train_speakers, cfg.train_utterances, cfg.train_seconds),
        (Split::Valid, cfg.valid_speakers, cfg.valid_utterances, cfg.train_seconds),
        (Split::Test, cfg.test_speakers, cfg.test_utterances, cfg.test_seconds),
    ];
    let mut plan = Vec::new();
    let mut speaker = 0;
    for (split, speakers, per, seconds) in groups {
        for _ in 0..speakers {
            for u in 0..per {
                let spk = format!("spk{speaker:03}");
                let utt = format!("{spk}_{}{u:03}", &split.as_str()[..2]);
                plan.push(Planned {
                    entry: ManifestEntry {
                        path: PathBuf::from("wav").join(format!("{utt}.wav")),
                        speaker: spk,
                        utterance: utt,
                        split,
                    },
                    speaker,
                    utterance: u,
                    seconds,
                });
            }
            speaker += 1;
        }
    }

    plan.par_iter().try_for_each(|p| {
        let voice = Voice::draw(&mut stream(cfg.seed, p.speaker, None));
        let mut rng = stream(cfg.seed, p.speaker, Some(p.utterance));
        let (lo, hi) = p.seconds;
        let seconds = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        write_wav(&out.join(&p.entry.path), &synthesize(&voice, seconds, &mut rng))
    })?;

    let manifest = CorpusManifest {
        entries: plan.into_iter().map(|p| p.entry).collect(),
        root: out.to_path_buf(),
    };
    let manifest_path = out.join("manifest.tsv");
    manifest.write(&manifest_path)?;

    let trials = make_trials(&manifest, cfg.target_trials, cfg.nontarget_trials, cfg.seed)?;
    let trials_path = out.join("trials.tsv");
    crate::write_atomic(&trials_path, format_trials(&trials).as_bytes())?;
    Ok(SynthOutput {
        manifest,
        manifest_path,
        trials,
        trials_path,
    })
}

/// Sample target and nontarget pairs of test-split utterances without
/// replacement; requests larger than the available pairs are capped.
pub fn make_trials(manifest: &CorpusManifest, targets: usize, nontargets: usize, seed: u64) -> Result<Vec<Trial>> {
    let test: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..test.len() {
        for j in i + 1..test.len() {
            let pair = (test[i].utterance.clone(), test[j].utterance.clone());
            if test[i].speaker == test[j].speaker {
                same.push(pair);
            } else {
                diff.push(pair);
            }
        }
    }
    if targets + nontargets == 0 {
        return Ok(Vec::new());
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::DatasetShape(
            "trials need at least two test speakers, one of them with two utterances".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut trials: Vec<Trial> = Vec::new();
    for (pairs, n, target) in [(&same, targets, true), (&diff, nontargets, false)] {
        let mut idx = sample(&mut rng, pairs.len(), n.min(pairs.len())).into_vec();
        idx.sort_unstable();
        trials.extend(idx.into_iter().map(|i| Trial {
            target,
            a: pairs[i].0.clone(),
            b: pairs[i].1.clone(),
        }));
    }
    Ok(trials)
}
