//! Batch sampling, Adam updates with gradient clipping, validation-driven
//! learning-rate decay and resumable checkpoints.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluator::{compute_eer, embed, Pooling};
use crate::features::FeatureMatrix;
use crate::loss::{LossBreakdown, LossConfig};
use crate::model::checkpoint::{put_model, put_params, quantize, take_params, model_from, Checkpoint};
use crate::model::{ModelConfig, ModelParams};
use crate::numcore::{cosine, Parameterized};
use crate::objective::{loss_and_grad, SegmentBatch};
use crate::segmenter::{draw_batch_window, segment, WindowMode, WindowPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    /// One L2 norm over every parameter jointly.
    Global,
    /// Each tensor clipped to the bound on its own.
    PerTensor,
}

impl ClipMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipMode::Global => "global",
            ClipMode::PerTensor => "per_tensor",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "global" => Some(ClipMode::Global),
            "per_tensor" => Some(ClipMode::PerTensor),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Speakers per batch (Q).
    pub speakers: usize,
    /// Utterances per speaker (P).
    pub per_speaker: usize,
    pub loss: LossConfig,
    pub lr: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub max_batches: u64,
    pub seed: u64,
    pub window: WindowPolicy,
    pub adam: AdamConfig,
    /// Lower bound re-imposed on the similarity scale after each update.
    pub w_floor: f64,
    /// Validate every this many steps; 0 disables validation.
    pub validate_every: u64,
    pub valid_trials: usize,
    pub decay_patience: usize,
    pub decay_factor: f64,
    pub lr_floor: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            speakers: 8,
            per_speaker: 4,
            loss: LossConfig::default(),
            lr: 1e-3,
            clip_norm: 3.0,
            clip_mode: ClipMode::Global,
            max_batches: 15_000,
            seed: 0,
            window: WindowPolicy::default(),
            adam: AdamConfig::default(),
            w_floor: 1e-4,
            validate_every: 0,
            valid_trials: 200,
            decay_patience: 3,
            decay_factor: 0.5,
            lr_floor: 1e-5,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.lr", self.lr),
            ("train.clip_norm", self.clip_norm),
            ("train.adam_eps", self.adam.eps),
            ("train.w_floor", self.w_floor),
            ("train.decay_factor", self.decay_factor),
            ("train.lr_floor", self.lr_floor),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.speakers < 2 {
            return Err(Error::Config(format!("train.q = {} but GE2E needs at least 2 speakers", self.speakers)));
        }
        if self.per_speaker < 1 {
            return Err(Error::Config("train.p must be at least 1".into()));
        }
        if self.loss.exclude_self && self.per_speaker < 2 {
            return Err(Error::Config("centroid self-exclusion needs train.p ≥ 2".into()));
        }
        for (name, b) in [("train.beta1", self.adam.beta1), ("train.beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.decay_factor > 1.0 {
            return Err(Error::Config("train.decay_factor must not exceed 1".into()));
        }
        if self.decay_patience == 0 {
            return Err(Error::Config("train.decay_patience must be at least 1".into()));
        }
        self.window.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub id: String,
    pub features: FeatureMatrix,
}

#[derive(Clone, Debug)]
pub struct Speaker {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

/// Training utterances grouped by speaker, in a fixed order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub speakers: Vec<Speaker>,
}

impl Dataset {
    /// Group `(speaker, utterance id, features)` triples; speakers and their
    /// utterances are sorted by id so sampling does not depend on input order.
    pub fn from_utterances(items: impl IntoIterator<Item = (String, String, FeatureMatrix)>) -> Self {
        let mut map: std::collections::BTreeMap<String, Vec<Utterance>> = Default::default();
        for (spk, id, features) in items {
            map.entry(spk).or_default().push(Utterance { id, features });
        }
        let speakers = map
            .into_iter()
            .map(|(id, mut utterances)| {
                utterances.sort_by(|a, b| a.id.cmp(&b.id));
                Speaker { id, utterances }
            })
            .collect();
        Dataset { speakers }
    }

    pub fn utterance_count(&self) -> usize {
        self.speakers.iter().map(|s| s.utterances.len()).sum()
    }
}

/// Speaker-major picks `(speaker index, utterance index)` and the window length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledBatch {
    pub window: usize,
    pub picks: Vec<(usize, usize)>,
    pub speakers: usize,
    pub per_speaker: usize,
}

/// Draw `Q` distinct speakers, then `P` distinct utterances from each, then
/// one window length for the whole batch.
pub fn sample_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    q: usize,
    p: usize,
    policy: &WindowPolicy,
    rng: &mut R,
) -> Result<SampledBatch> {
    if dataset.speakers.len() < q {
        return Err(Error::DatasetShape(format!(
            "batch needs {q} speakers but the dataset has {}",
            dataset.speakers.len()
        )));
    }
    let short: Vec<String> = dataset
        .speakers
        .iter()
        .filter(|s| s.utterances.len() < p)
        .map(|s| format!("{} ({})", s.id, s.utterances.len()))
        .collect();
    if !short.is_empty() {
        return Err(Error::DatasetShape(format!(
            "batch needs {p} utterances per speaker; short: {}",
            short.join(", ")
        )));
    }
    let mut picks = Vec::with_capacity(q * p);
    for spk in sample(rng, dataset.speakers.len(), q).into_iter() {
        for utt in sample(rng, dataset.speakers[spk].utterances.len(), p).into_iter() {
            picks.push((spk, utt));
        }
    }
    let window = draw_batch_window(policy, rng);
    Ok(SampledBatch {
        window,
        picks,
        speakers: q,
        per_speaker: p,
    })
}

impl SampledBatch {
    pub fn segments(&self, dataset: &Dataset, policy: &WindowPolicy) -> Result<SegmentBatch> {
        let utterances = self
            .picks
            .iter()
            .map(|&(s, u)| segment(&dataset.speakers[s].utterances[u].features, self.window, policy))
            .collect::<Result<Vec<_>>>()?;
        Ok(SegmentBatch {
            speakers: self.speakers,
            per_speaker: self.per_speaker,
            utterances,
        })
    }

    pub fn ids<'a>(&self, dataset: &'a Dataset) -> Vec<&'a str> {
        self.picks
            .iter()
            .map(|&(s, u)| dataset.speakers[s].utterances[u].id.as_str())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub t: u64,
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Seed `rng` was created from; with its word position it restores the stream.
    pub seed: u64,
    pub lr: f64,
    pub best_metric: f64,
    /// Validations since the best metric last improved.
    pub stagnation: usize,
    pub step: u64,
}

impl PartialEq for TrainerState {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.adam == other.adam
            && self.seed == other.seed
            && self.rng.get_word_pos() == other.rng.get_word_pos()
            && self.lr.to_bits() == other.lr.to_bits()
            && self.best_metric.to_bits() == other.best_metric.to_bits()
            && self.stagnation == other.stagnation
            && self.step == other.step
    }
}

impl TrainerState {
    /// Fresh state: parameters are initialized from the same seeded stream
    /// that later draws the batches.
    pub fn new(model: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ModelParams::init(model, &mut rng)?;
        quantize(&mut params);
        Ok(TrainerState {
            adam: AdamState {
                m: params.zeros_like(),
                v: params.zeros_like(),
                t: 0,
            },
            params,
            rng,
            seed: cfg.seed,
            lr: cfg.lr,
            best_metric: f64::INFINITY,
            stagnation: 0,
            step: 0,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

impl StepMetrics {
    /// `step L L_u L_s L_p grad_norm lr`, tab-separated, floats in shortest
    /// round-trip form.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            self.step, self.loss.total, self.loss.utterance, self.loss.segment, self.loss.penalty, self.grad_norm, self.lr
        )
    }
}

/// Scale gradients so their norm is at most `max_norm`; returns the global
/// norm before clipping.
pub fn clip_gradients(grad: &mut ModelParams, max_norm: f64, mode: ClipMode) -> f64 {
    let total = grad.norm();
    match mode {
        ClipMode::Global => {
            if total > max_norm {
                grad.scale(max_norm / total);
            }
        }
        ClipMode::PerTensor => {
            for (_, t) in grad.tensors_mut() {
                let n = t.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > max_norm {
                    let s = max_norm / n;
                    t.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
    }
    total
}

/// One bias-corrected Adam update in place.
pub fn adam_update(params: &mut ModelParams, adam: &mut AdamState, grad: &ModelParams, lr: f64, cfg: &AdamConfig) {
    adam.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(adam.t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(adam.t.min(i32::MAX as u64) as i32);
    let grads = grad.tensors();
    let mut ms = adam.m.tensors_mut();
    let mut vs = adam.v.tensors_mut();
    for (((_, p), (_, g)), (m, v)) in params.tensors_mut().into_iter().zip(grads).zip(ms.iter_mut().zip(vs.iter_mut())) {
        for i in 0..p.len() {
            m.1[i] = cfg.beta1 * m.1[i] + (1.0 - cfg.beta1) * g[i];
            v.1[i] = cfg.beta2 * v.1[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m.1[i] / bc1;
            let v_hat = v.1[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Forward, backward, clip, Adam, re-impose `w ≥ w_floor`.
///
/// Parameters and moments are rounded to `f32` after the update so a
/// checkpoint (stored as `f32`) resumes bit-exactly. On a non-finite loss or
/// gradient the state is left untouched.
pub fn train_step(state: &mut TrainerState, batch: &SegmentBatch, cfg: &TrainConfig) -> Result<StepMetrics> {
    let (loss, mut grad) = loss_and_grad(batch, &state.params, &cfg.loss)?;
    let finite = [loss.total, loss.utterance, loss.segment, loss.penalty].iter().all(|v| v.is_finite());
    if !finite || !grad.is_finite() {
        return Err(Error::Numeric(format!(
            "step {}: non-finite loss or gradient (L={}, L_u={}, L_s={}, L_p={}, grad_norm={}, batch {}×{})",
            state.step + 1,
            loss.total,
            loss.utterance,
            loss.segment,
            loss.penalty,
            grad.norm(),
            batch.speakers,
            batch.per_speaker
        )));
    }
    let grad_norm = clip_gradients(&mut grad, cfg.clip_norm, cfg.clip_mode);
    let lr = state.lr;
    adam_update(&mut state.params, &mut state.adam, &grad, lr, &cfg.adam);
    state.params.sim_w = state.params.sim_w.max(cfg.w_floor);
    quantize(&mut state.params);
    quantize(&mut state.adam.m);
    quantize(&mut state.adam.v);
    // the floor itself may not be representable in f32
    if state.params.sim_w < cfg.w_floor {
        state.params.sim_w = f32_above(cfg.w_floor);
    }
    state.step += 1;
    Ok(StepMetrics {
        step: state.step,
        loss,
        grad_norm,
        lr,
    })
}

fn f32_above(x: f64) -> f64 {
    let f = x as f32;
    if (f as f64) >= x {
        f as f64
    } else {
        f32::from_bits(f.to_bits() + 1) as f64
    }
}

/// Draw the next batch from the state's random stream.
pub fn next_batch(state: &mut TrainerState, dataset: &Dataset, cfg: &TrainConfig) -> Result<(SampledBatch, SegmentBatch)> {
    let picked = sample_batch(dataset, cfg.speakers, cfg.per_speaker, &cfg.window, &mut state.rng)?;
    let segments = picked.segments(dataset, &cfg.window)?;
    Ok((picked, segments))
}

/// Record a validation result; after `decay_patience` validations without
/// improvement the learning rate is multiplied by `decay_factor`, never going
/// below `lr_floor`. Returns whether the rate was decayed.
pub fn schedule(state: &mut TrainerState, metric: f64, cfg: &TrainConfig) -> bool {
    if metric < state.best_metric {
        state.best_metric = metric;
        state.stagnation = 0;
        return false;
    }
    state.stagnation += 1;
    if state.stagnation >= cfg.decay_patience {
        state.stagnation = 0;
        state.lr = (state.lr * cfg.decay_factor).max(cfg.lr_floor);
        return true;
    }
    false
}

/// Held-out utterances with a trial list fixed by a seed.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub features: Vec<FeatureMatrix>,
    /// `(target, index a, index b)`
    pub trials: Vec<(bool, usize, usize)>,
}

impl ValidationSet {
    /// Half target, half nontarget pairs (as far as the data allows), drawn
    /// without replacement.
    pub fn new(dataset: &Dataset, n_trials: usize, seed: u64) -> Result<Self> {
        let mut features = Vec::new();
        let mut owner = Vec::new();
        for (s, spk) in dataset.speakers.iter().enumerate() {
            for u in &spk.utterances {
                features.push(u.features.clone());
                owner.push(s);
            }
        }
        let mut same = Vec::new();
        let mut diff = Vec::new();
        for a in 0..features.len() {
            for b in a + 1..features.len() {
                if owner[a] == owner[b] {
                    same.push((true, a, b));
                } else {
                    diff.push((false, a, b));
                }
            }
        }
        if same.is_empty() || diff.is_empty() {
            return Err(Error::DatasetShape(
                "validation needs at least two speakers and one speaker with two utterances".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69_6461_7465);
        let n_same = (n_trials / 2).min(same.len()).max(1);
        let n_diff = (n_trials - n_same.min(n_trials)).min(diff.len()).max(1);
        let mut trials: Vec<_> = sample(&mut rng, same.len(), n_same).into_iter().map(|i| same[i]).collect();
        trials.extend(sample(&mut rng, diff.len(), n_diff).into_iter().map(|i| diff[i]));
        Ok(ValidationSet { features, trials })
    }

    pub fn eer(&self, params: &ModelParams, policy: &WindowPolicy) -> Result<f64> {
        use rayon::prelude::*;
        let test = policy.with_mode(WindowMode::Test);
        let emb = self
            .features
            .par_iter()
            .map(|f| embed(f, params, &test, Pooling::Attentive))
            .collect::<Result<Vec<_>>>()?;
        let mut scores = Vec::with_capacity(self.trials.len());
        let mut labels = Vec::with_capacity(self.trials.len());
        for &(t, a, b) in &self.trials {
            scores.push(cosine(&emb[a], &emb[b])?);
            labels.push(t);
        }
        Ok(compute_eer(&scores, &labels)?.eer)
    }
}

/// Validation EER followed by the decay rule.
pub fn validate_and_schedule(state: &mut TrainerState, set: &ValidationSet, cfg: &TrainConfig) -> Result<f64> {
    let eer = set.eer(&state.params, &cfg.window)?;
    if schedule(state, eer, cfg) {
        log::info!("step {}: validation EER {eer:.4} stagnant, lr → {}", state.step, state.lr);
    }
    Ok(eer)
}

pub fn save_checkpoint(state: &TrainerState, cfg: &TrainConfig, digest: &str, path: &Path) -> Result<()> {
    to_checkpoint(state, cfg, digest).save(path)
}

pub fn to_checkpoint(state: &TrainerState, cfg: &TrainConfig, digest: &str) -> Checkpoint {
    let mut ckpt = Checkpoint {
        digest: digest.to_string(),
        ..Default::default()
    };
    put_model(&mut ckpt, &state.params);
    put_params(&mut ckpt, &state.adam.m, "adam.m.");
    put_params(&mut ckpt, &state.adam.v, "adam.v.");
    let meta = [
        ("adam.beta1", format!("{:?}", cfg.adam.beta1)),
        ("adam.beta2", format!("{:?}", cfg.adam.beta2)),
        ("adam.eps", format!("{:?}", cfg.adam.eps)),
        ("adam.t", state.adam.t.to_string()),
        ("train.step", state.step.to_string()),
        ("train.lr", format!("{:?}", state.lr)),
        ("train.best_metric", format!("{:?}", state.best_metric)),
        ("train.stagnation", state.stagnation.to_string()),
        ("train.clip_norm", format!("{:?}", cfg.clip_norm)),
        ("train.clip_mode", cfg.clip_mode.as_str().to_string()),
        ("train.decay", format!("patience {} factor {:?} floor {:?}", cfg.decay_patience, cfg.decay_factor, cfg.lr_floor)),
        ("rng.algorithm", "chacha8".to_string()),
        ("rng.seed", state.seed.to_string()),
        ("rng.word_pos", state.rng.get_word_pos().to_string()),
    ];
    for (k, v) in meta {
        ckpt.metadata.insert(k.to_string(), v);
    }
    ckpt
}

/// Restore a full trainer state. The checkpoint's digest must equal `digest`.
pub fn load_checkpoint(path: &Path, digest: &str) -> Result<TrainerState> {
    from_checkpoint(&Checkpoint::load(path)?, digest)
}

pub fn from_checkpoint(ckpt: &Checkpoint, digest: &str) -> Result<TrainerState> {
    ckpt.require_digest(digest)?;
    let params = model_from(ckpt)?;
    let m = take_params(ckpt, &params.config, "adam.m.")?;
    let v = take_params(ckpt, &params.config, "adam.v.")?;
    let seed: u64 = ckpt.meta_parse("rng.seed")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_word_pos(ckpt.meta_parse::<u128>("rng.word_pos")?);
    Ok(TrainerState {
        params,
        adam: AdamState {
            m,
            v,
            t: ckpt.meta_parse("adam.t")?,
        },
        rng,
        seed,
        lr: ckpt.meta_parse("train.lr")?,
        best_metric: ckpt.meta_parse("train.best_metric")?,
        stagnation: ckpt.meta_parse("train.stagnation")?,
        step: ckpt.meta_parse("train.step")?,
    })
}

/// Appends one line per step to the metrics log.
pub struct MetricsLog {
    file: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsLog {
    /// Open for appending, first dropping any lines past `keep_through` so a
    /// resumed run does not repeat steps.
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let kept: String = match std::fs::read_to_string(path) {
            Ok(text) => text
                .lines()
                .filter(|l| {
                    l.split('\t')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .is_some_and(|s| s <= keep_through)
                })
                .map(|l| format!("{l}\n"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(Error::io(path, e)),
        };
        std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            file: std::io::BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, m: &StepMetrics) -> Result<()> {
        writeln!(self.file, "{}", m.log_line()).map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Hooks the training loop calls back into.
pub trait TrainObserver {
    fn on_step(&mut self, _state: &TrainerState, _metrics: &StepMetrics) -> Result<()> {
        Ok(())
    }
    fn on_validation(&mut self, _state: &TrainerState, _eer: f64) -> Result<()> {
        Ok(())
    }
    /// Called every `checkpoint_every` steps and after the last one.
    fn on_checkpoint(&mut self, _state: &TrainerState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Train until `cfg.max_batches` steps have been taken in total.
pub fn train(
    state: &mut TrainerState,
    dataset: &Dataset,
    validation: Option<&ValidationSet>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    cfg.validate()?;
    while state.step < cfg.max_batches {
        let (picked, batch) = next_batch(state, dataset, cfg)?;
        let metrics = train_step(state, &batch, cfg).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!(
                "{msg}; window {}, utterances {}",
                picked.window,
                picked.ids(dataset).join(",")
            )),
            other => other,
        })?;
        observer.on_step(state, &metrics)?;
        if let Some(set) = validation {
            if cfg.validate_every > 0 && state.step % cfg.validate_every == 0 {
                let eer = validate_and_schedule(state, set, cfg)?;
                observer.on_validation(state, eer)?;
            }
        }
        let last = state.step == cfg.max_batches;
        if last || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
            observer.on_checkpoint(state)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Matrix;

    fn toy_model() -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            hidden: 6,
            embed_dim: 4,
            attn_dim: 4,
            heads: 2,
            ..ModelConfig::default()
        }
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            speakers: 2,
            per_speaker: 2,
            window: WindowPolicy {
                train_range: (6, 9),
                test_length: 8,
                ..WindowPolicy::default()
            },
            max_batches: 20,
            ..TrainConfig::default()
        }
    }

    /// Speakers differ in their mean feature vector.
    fn toy_dataset(speakers: usize, per: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..speakers).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mut items = Vec::new();
        for (s, c) in centers.iter().enumerate() {
            for u in 0..per {
                let frames = rng.gen_range(10..20);
                let data = (0..frames * 3).map(|i| c[i % 3] + 0.3 * rng.gen_range(-1.0..1.0)).collect();
                let f = FeatureMatrix::new(Matrix::from_vec(frames, 3, data).unwrap(), true).unwrap();
                items.push((format!("s{s:02}"), format!("s{s:02}u{u:02}"), f));
            }
        }
        Dataset::from_utterances(items)
    }

    #[test]
    fn exhaustive_batch_covers_both_speakers() {
        let ds = toy_dataset(2, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&ds, 2, 1, &WindowPolicy::default(), &mut rng).unwrap();
        let mut spk: Vec<usize> = b.picks.iter().map(|p| p.0).collect();
        spk.sort();
        assert_eq!(spk, vec![0, 1]);
        assert!((80..=120).contains(&b.window));
    }

    #[test]
    fn sampling_is_seeded() {
        let ds = toy_dataset(5, 4, 0);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| sample_batch(&ds, 3, 2, &WindowPolicy::default(), &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn sampling_deficits_are_named() {
        let ds = toy_dataset(3, 2, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = sample_batch(&ds, 4, 1, &WindowPolicy::default(), &mut rng).unwrap_err();
        assert!(matches!(&e, Error::DatasetShape(m) if m.contains("4 speakers")));
        let e = sample_batch(&ds, 2, 3, &WindowPolicy::default(), &mut rng).unwrap_err();
        assert!(matches!(&e, Error::DatasetShape(m) if m.contains("s00 (2)")));
    }

    #[test]
    fn speaker_frequencies_are_uniform() {
        // Q=2 of 10 speakers: each speaker appears with probability 1/5 per draw
        let ds = toy_dataset(10, 1, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws = 10_000;
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            for (s, _) in sample_batch(&ds, 2, 1, &WindowPolicy::default(), &mut rng).unwrap().picks {
                counts[s] += 1;
            }
        }
        let p = 0.2;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn clipping_rule() {
        let mut g = ModelParams::zeros(&toy_model()).zeros_like();
        g.proj.set(0, 0, 6.0);
        let before = clip_gradients(&mut g, 3.0, ClipMode::Global);
        assert_eq!(before, 6.0);
        assert!((g.norm() - 3.0).abs() <= 1e-9);

        let mut g = ModelParams::zeros(&toy_model()).zeros_like();
        g.proj.set(0, 0, 2.0);
        g.w1.set(0, 0, 2.0);
        clip_gradients(&mut g, 3.0, ClipMode::PerTensor);
        assert_eq!((g.proj.get(0, 0), g.w1.get(0, 0)), (2.0, 2.0));
        clip_gradients(&mut g, 1.0, ClipMode::PerTensor);
        assert_eq!((g.proj.get(0, 0), g.w1.get(0, 0)), (1.0, 1.0));
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ModelParams::init(&toy_model(), &mut rng).unwrap();
        let before = p.clone();
        let mut adam = AdamState {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        };
        adam_update(&mut p, &mut adam, &before.zeros_like(), 1e-3, &AdamConfig::default());
        assert_eq!(p, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        // f(x) = x², gradient 2x
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(&toy_model(), &mut rng).unwrap();
        p.scale(0.0);
        p.sim_w = 1.0;
        let mut adam = AdamState {
            m: p.zeros_like(),
            v: p.zeros_like(),
            t: 0,
        };
        let mut reached = None;
        for step in 1..=500 {
            let mut g = p.zeros_like();
            g.sim_w = 2.0 * p.sim_w;
            adam_update(&mut p, &mut adam, &g, 0.01, &AdamConfig::default());
            if p.sim_w.abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some(), "x = {}", p.sim_w);
    }

    #[test]
    fn decay_schedule() {
        let cfg = TrainConfig::default();
        let mut state = TrainerState::new(&toy_model(), &cfg).unwrap();
        for m in [0.5, 0.4, 0.3, 0.2] {
            assert!(!schedule(&mut state, m, &cfg));
        }
        assert_eq!(state.lr, 1e-3);

        let mut lrs = Vec::new();
        for _ in 0..30 {
            if schedule(&mut state, 0.9, &cfg) {
                lrs.push(state.lr);
            }
        }
        // simulate: halve from 1e-3 every third stagnant validation, floor 1e-5
        let mut expected = Vec::new();
        let mut lr: f64 = 1e-3;
        for _ in 0..10 {
            lr = (lr * 0.5).max(1e-5);
            expected.push(lr);
        }
        assert_eq!(lrs, expected);
        assert_eq!(lrs[0], 5e-4);
        assert_eq!(lrs[1], 2.5e-4);
        assert_eq!(*lrs.last().unwrap(), 1e-5);
    }

    #[test]
    fn training_reduces_loss_and_keeps_invariants() {
        let cfg = TrainConfig {
            max_batches: 150,
            lr: 0.01,
            ..toy_cfg()
        };
        let ds = toy_dataset(4, 4, 3);
        let mut state = TrainerState::new(&toy_model(), &cfg).unwrap();
        struct Rec(Vec<StepMetrics>);
        impl TrainObserver for Rec {
            fn on_step(&mut self, s: &TrainerState, m: &StepMetrics) -> Result<()> {
                assert!(s.params.sim_w >= 1e-4);
                self.0.push(*m);
                Ok(())
            }
        }
        let mut rec = Rec(Vec::new());
        train(&mut state, &ds, None, &cfg, &mut rec).unwrap();
        assert_eq!(rec.0.len(), 150);
        let first: f64 = rec.0[..10].iter().map(|m| m.loss.total).sum();
        let last: f64 = rec.0[140..].iter().map(|m| m.loss.total).sum();
        assert!(last < 0.5 * first, "{first} → {last}");
    }

    #[test]
    fn w_floor_holds_under_pressure() {
        let cfg = TrainConfig {
            lr: 5.0,
            max_batches: 30,
            ..toy_cfg()
        };
        let ds = toy_dataset(3, 3, 1);
        let mut state = TrainerState::new(&toy_model(), &cfg).unwrap();
        state.params.sim_w = 1e-4;
        train(&mut state, &ds, None, &cfg, &mut ()).unwrap();
        assert!(state.params.sim_w >= 1e-4);
    }

    #[test]
    fn non_finite_loss_leaves_state_unchanged() {
        let cfg = toy_cfg();
        let ds = toy_dataset(2, 2, 1);
        let mut state = TrainerState::new(&toy_model(), &cfg).unwrap();
        state.params.sim_b = f64::INFINITY;
        let (_, batch) = next_batch(&mut state, &ds, &cfg).unwrap();
        let before = state.clone();
        assert!(matches!(train_step(&mut state, &batch, &cfg), Err(Error::Numeric(_))));
        assert_eq!(state, before);
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let cfg = TrainConfig {
            max_batches: 12,
            validate_every: 4,
            decay_patience: 1,
            ..toy_cfg()
        };
        let ds = toy_dataset(3, 3, 5);
        let valid = ValidationSet::new(&toy_dataset(3, 3, 6), 20, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.dsac");

        struct Log(Vec<String>);
        impl TrainObserver for Log {
            fn on_step(&mut self, _: &TrainerState, m: &StepMetrics) -> Result<()> {
                self.0.push(m.log_line());
                Ok(())
            }
        }

        let mut full = TrainerState::new(&toy_model(), &cfg).unwrap();
        let mut full_log = Log(Vec::new());
        train(&mut full, &ds, Some(&valid), &cfg, &mut full_log).unwrap();

        let half = TrainConfig { max_batches: 6, ..cfg.clone() };
        let mut first = TrainerState::new(&toy_model(), &half).unwrap();
        let mut log = Log(Vec::new());
        train(&mut first, &ds, Some(&valid), &half, &mut log).unwrap();
        save_checkpoint(&first, &cfg, "d1", &path).unwrap();

        let mut resumed = load_checkpoint(&path, "d1").unwrap();
        assert_eq!(resumed, first);
        assert!(matches!(load_checkpoint(&path, "d2"), Err(Error::Incompatible(_))));
        train(&mut resumed, &ds, Some(&valid), &cfg, &mut log).unwrap();
        assert_eq!(log.0, full_log.0);
        assert_eq!(resumed, full);

        // re-encoding a loaded checkpoint gives identical bytes
        let bytes = std::fs::read(&path).unwrap();
        let reloaded = load_checkpoint(&path, "d1").unwrap();
        assert_eq!(to_checkpoint(&reloaded, &cfg, "d1").encode(), bytes);

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_checkpoint(&path, "d1"), Err(Error::Format(_))));
    }

    #[test]
    fn metrics_log_truncates_on_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let m = |step| StepMetrics {
            step,
            loss: LossBreakdown::default(),
            grad_norm: 1.0,
            lr: 1e-3,
        };
        let mut log = MetricsLog::open(&path, 0).unwrap();
        for s in 1..=5 {
            log.append(&m(s)).unwrap();
        }
        log.flush().unwrap();
        drop(log);
        let mut log = MetricsLog::open(&path, 3).unwrap();
        log.append(&m(4)).unwrap();
        log.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "1\t0.0\t0.0\t0.0\t0.0\t1.0\t0.001");
    }

    #[test]
    fn validation_trials_are_fixed() {
        let ds = toy_dataset(4, 3, 2);
        let a = ValidationSet::new(&ds, 30, 9).unwrap();
        let b = ValidationSet::new(&ds, 30, 9).unwrap();
        assert_eq!(a.trials, b.trials);
        assert!(a.trials.iter().any(|t| t.0) && a.trials.iter().any(|t| !t.0));
        let cfg = toy_cfg();
        let state = TrainerState::new(&toy_model(), &cfg).unwrap();
        let eer = a.eer(&state.params, &cfg.window).unwrap();
        assert!((0.0..=1.0).contains(&eer));
    }
}
