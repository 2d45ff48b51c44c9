//! Command implementations behind the `dsae` binary.
//!
//! Feature directories hold one normalized `<utterance>.dsaf` per utterance
//! plus `norm.dsan` with the training-split statistics. Checkpoint
//! directories hold `latest.dsac`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::codec::read_file;
use crate::config::{hex, Config};
use crate::error::{Error, Result};
use crate::evaluator::{embed_all, parse_scores, read_trials, run_trials, score_trials, Pooling, ScoreReport};
use crate::features::format::{decode_features, encode_matrix, encode_norm_stats};
use crate::features::wav::read_wav;
use crate::features::{apply_norm, FeatureExtractor, FeatureMatrix, NormAccumulator};
use crate::manifest::{CorpusManifest, Split};
use crate::model::checkpoint::{model_from, Checkpoint};
use crate::model::ModelParams;
use crate::numcore::Matrix;
use crate::segmenter::WindowMode;
use crate::synth::{generate, SynthOutput};
use crate::trainer::{
    save_checkpoint, load_checkpoint, train, Dataset, MetricsLog, StepMetrics, TrainObserver, TrainerState,
    ValidationSet,
};

pub const NORM_FILE: &str = "norm.dsan";
pub const CHECKPOINT_FILE: &str = "latest.dsac";

/// Process exit status for an error: 2 usage, 3 data, 4 incompatibility,
/// 5 numeric failure.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Incompatible(_) => 4,
        Error::Numeric(_) | Error::DegenerateEmbedding(_) => 5,
        Error::Contract(_)
        | Error::EmptyFeatures(_)
        | Error::UnsupportedAudio { .. }
        | Error::Format(_)
        | Error::DatasetShape(_)
        | Error::Evaluation(_)
        | Error::Io { .. } => 3,
    }
}

pub fn feature_path(dir: &Path, utterance: &str) -> PathBuf {
    dir.join(format!("{utterance}.dsaf"))
}

pub fn read_normalized(dir: &Path, utterance: &str) -> Result<FeatureMatrix> {
    decode_features(&read_file(&feature_path(dir, utterance))?, true)
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<SynthOutput> {
    let output = generate(&cfg.synth_config(), out)?;
    log::info!(
        "synthesized {} utterances and {} trials under {}",
        output.manifest.entries.len(),
        output.trials.len(),
        out.display()
    );
    Ok(output)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExtractSummary {
    pub written: usize,
    pub skipped: usize,
    /// Frames kept per utterance.
    pub frames: BTreeMap<String, usize>,
}

/// Write `bytes` unless the file already holds exactly them. Returns whether
/// it wrote.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = std::fs::read(path) {
        if Sha256::digest(&existing) == Sha256::digest(bytes) {
            return Ok(false);
        }
    }
    crate::write_atomic(path, bytes)?;
    Ok(true)
}

/// Log-mel features for every manifest entry, normalized with statistics of
/// the training split. Outputs whose content would not change are left alone.
pub fn cmd_extract(cfg: &Config, manifest_path: &Path, out: &Path) -> Result<ExtractSummary> {
    let manifest = CorpusManifest::read(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::DatasetShape(format!("{}: no utterances", manifest_path.display())));
    }
    let extractor = FeatureExtractor::new(cfg.feature_config()?)?;
    let raw: Vec<Result<FeatureMatrix>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            read_wav(&path)
                .and_then(|clip| extractor.extract(&clip))
                .map_err(|err| match err {
                    Error::Io { .. } => err,
                    other => Error::format(format!("{}: {other}", path.display())),
                })
        })
        .collect();

    let failures: Vec<String> = manifest
        .entries
        .iter()
        .zip(&raw)
        .filter_map(|(e, r)| r.as_ref().err().map(|err| format!("{}: {err}", e.utterance)))
        .collect();
    if !failures.is_empty() {
        for f in &failures {
            log::error!("{f}");
        }
        return Err(Error::format(format!(
            "{} of {} utterances failed: {}",
            failures.len(),
            manifest.entries.len(),
            failures.join("; ")
        )));
    }
    let raw: Vec<FeatureMatrix> = raw.into_iter().map(|r| r.expect("failures handled")).collect();

    let mut acc = NormAccumulator::new(extractor.config().n_mels);
    for (e, f) in manifest.entries.iter().zip(&raw) {
        if e.split == Split::Train {
            acc.push(f)?;
        }
    }
    if acc.count() == 0 {
        return Err(Error::DatasetShape("normalization needs at least one training frame".into()));
    }
    let stats = acc.finish()?;
    if stats.any_clamped() {
        log::warn!("some feature dimensions have near-zero variance; their std was floored");
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut summary = ExtractSummary::default();
    if write_if_changed(&out.join(NORM_FILE), &encode_norm_stats(&stats))? {
        summary.written += 1;
    } else {
        summary.skipped += 1;
    }
    let outcomes = manifest
        .entries
        .par_iter()
        .zip(&raw)
        .map(|(e, f)| {
            let normalized = apply_norm(f, &stats)?;
            write_if_changed(&feature_path(out, &e.utterance), &encode_matrix(normalized.values()))
        })
        .collect::<Result<Vec<bool>>>()?;
    for ((e, f), wrote) in manifest.entries.iter().zip(&raw).zip(outcomes) {
        if wrote {
            summary.written += 1;
        } else {
            summary.skipped += 1;
        }
        summary.frames.insert(e.utterance.clone(), f.frames());
    }
    log::info!("extract: {} written, {} unchanged", summary.written, summary.skipped);
    Ok(summary)
}

/// Load one split's features grouped by speaker.
pub fn load_split(manifest: &CorpusManifest, features: &Path, split: Split) -> Result<Dataset> {
    let entries: Vec<_> = manifest.split(split).collect();
    let loaded = entries
        .par_iter()
        .map(|e| Ok((e.speaker.clone(), e.utterance.clone(), read_normalized(features, &e.utterance)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_utterances(loaded))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub first: Option<StepMetrics>,
    pub last: Option<StepMetrics>,
}

pub struct TrainPaths<'a> {
    pub manifest: &'a Path,
    pub features: &'a Path,
    pub checkpoints: &'a Path,
    pub metrics: &'a Path,
}

struct CliObserver<'a> {
    log: MetricsLog,
    cfg: &'a crate::trainer::TrainConfig,
    digest: String,
    checkpoint: PathBuf,
    first: Option<StepMetrics>,
    last: Option<StepMetrics>,
}

impl TrainObserver for CliObserver<'_> {
    fn on_step(&mut self, _: &TrainerState, m: &StepMetrics) -> Result<()> {
        self.log.append(m)?;
        if self.first.is_none() {
            self.first = Some(*m);
        }
        self.last = Some(*m);
        if m.step.is_multiple_of(100) {
            log::info!("step {} L={:.4} grad_norm={:.3} lr={}", m.step, m.loss.total, m.grad_norm, m.lr);
        }
        Ok(())
    }

    fn on_validation(&mut self, state: &TrainerState, eer: f64) -> Result<()> {
        log::info!("step {}: validation EER {:.2}%", state.step, 100.0 * eer);
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainerState) -> Result<()> {
        self.log.flush()?;
        save_checkpoint(state, self.cfg, &self.digest, &self.checkpoint)
    }
}

/// Train on the manifest's training split, resuming from the checkpoint
/// directory when `resume` is set and a checkpoint exists.
pub fn cmd_train(cfg: &Config, paths: &TrainPaths, resume: bool) -> Result<TrainSummary> {
    let tc = cfg.train_config()?;
    tc.validate()?;
    let manifest = CorpusManifest::read(paths.manifest)?;
    let dataset = load_split(&manifest, paths.features, Split::Train)?;
    if dataset.speakers.is_empty() {
        return Err(Error::DatasetShape("the manifest has no training utterances".into()));
    }
    let validation = if tc.validate_every > 0 && manifest.split(Split::Valid).next().is_some() {
        let valid = load_split(&manifest, paths.features, Split::Valid)?;
        Some(ValidationSet::new(&valid, tc.valid_trials, tc.seed)?)
    } else {
        None
    };

    std::fs::create_dir_all(paths.checkpoints).map_err(|e| Error::io(paths.checkpoints, e))?;
    let checkpoint = paths.checkpoints.join(CHECKPOINT_FILE);
    let digest = cfg.model_digest();
    let mut state = if resume && checkpoint.exists() {
        let s = load_checkpoint(&checkpoint, &digest)?;
        log::info!("resuming from step {}", s.step);
        s
    } else {
        TrainerState::new(&cfg.model_config(), &tc)?
    };

    let mut observer = CliObserver {
        log: MetricsLog::open(paths.metrics, state.step)?,
        cfg: &tc,
        digest,
        checkpoint: checkpoint.clone(),
        first: None,
        last: None,
    };
    train(&mut state, &dataset, validation.as_ref(), &tc, &mut observer)?;
    observer.log.flush()?;
    if !checkpoint.exists() {
        save_checkpoint(&state, &tc, &observer.digest, &checkpoint)?;
    }
    Ok(TrainSummary {
        steps: state.step,
        checkpoint,
        first: observer.first,
        last: observer.last,
    })
}

/// Model parameters from a checkpoint written under a compatible configuration.
pub fn load_model(cfg: &Config, checkpoint: &Path) -> Result<ModelParams> {
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.require_digest(&cfg.model_digest())?;
    model_from(&ckpt)
}

/// Embed utterances (all test-split ids when `ids` is empty) and write one
/// `1 × d_e` DSAF file per utterance.
pub fn cmd_embed(
    cfg: &Config,
    checkpoint: &Path,
    manifest: &Path,
    features: &Path,
    ids: &[String],
    out: &Path,
    pooling: Pooling,
) -> Result<Vec<PathBuf>> {
    let params = load_model(cfg, checkpoint)?;
    let ids: BTreeSet<String> = if ids.is_empty() {
        CorpusManifest::read(manifest)?
            .split(Split::Test)
            .map(|e| e.utterance.clone())
            .collect()
    } else {
        ids.iter().cloned().collect()
    };
    if ids.is_empty() {
        return Err(Error::DatasetShape("nothing to embed".into()));
    }
    let policy = cfg.window_policy().with_mode(WindowMode::Test);
    let table = embed_all(&ids, |id| read_normalized(features, id), &params, &policy, pooling);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(table.len());
    for (id, emb) in table {
        let emb = emb.map_err(|why| Error::format(format!("{id}: {why}")))?;
        let path = feature_path(out, &id);
        let dims = emb.len();
        crate::write_atomic(&path, &encode_matrix(&Matrix::from_vec(1, dims, emb)?))?;
        written.push(path);
    }
    Ok(written)
}

pub enum ScoreSource<'a> {
    /// Embed from features with a checkpoint.
    Checkpoint { checkpoint: &'a Path, features: &'a Path },
    /// Previously written embedding files.
    Embeddings(&'a Path),
}

pub fn cmd_score(cfg: &Config, source: ScoreSource, trials: &Path, pooling: Pooling) -> Result<ScoreReport> {
    let trials = read_trials(trials)?;
    if trials.is_empty() {
        return Err(Error::Evaluation("the trial list is empty".into()));
    }
    match source {
        ScoreSource::Checkpoint { checkpoint, features } => {
            let params = load_model(cfg, checkpoint)?;
            let policy = cfg.window_policy().with_mode(WindowMode::Test);
            run_trials(&params, &trials, |id| read_normalized(features, id), &policy, pooling)
        }
        ScoreSource::Embeddings(dir) => {
            let ids: BTreeSet<String> = trials.iter().flat_map(|t| [t.a.clone(), t.b.clone()]).collect();
            let table = ids
                .into_iter()
                .map(|id| {
                    let emb = read_file(&feature_path(dir, &id))
                        .and_then(|b| crate::features::format::decode_matrix(&b))
                        .and_then(|m| {
                            if m.rows() == 1 {
                                Ok(m.into_vec())
                            } else {
                                Err(Error::format(format!("embedding has {} rows, expected 1", m.rows())))
                            }
                        })
                        .map_err(|e| e.to_string());
                    (id, emb)
                })
                .collect();
            score_trials(&trials, &table)
        }
    }
}

/// EER from a score file alone.
pub fn cmd_eer(scores: &Path) -> Result<ScoreReport> {
    let text = std::fs::read_to_string(scores).map_err(|e| Error::io(scores, e))?;
    let scored = parse_scores(&text).map_err(|e| Error::format(format!("{}: {e}", scores.display())))?;
    ScoreReport::from_scores(scored, Vec::new())
}

/// Hex SHA-256 of a file, for reports and idempotence checks.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(read_file(path)?)))
}
