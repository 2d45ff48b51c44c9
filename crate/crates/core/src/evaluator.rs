//! Cosine trial scoring and equal error rate.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{baseline_average_embed, utterance_embed, ModelParams};
use crate::numcore::cosine;
use crate::segmenter::WindowPolicy;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Attentive,
    Average,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Attentive => "attentive",
            Pooling::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "attentive" => Some(Pooling::Attentive),
            "average" => Some(Pooling::Average),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub a: String,
    pub b: String,
}

/// Cosine similarity of two utterance embeddings.
pub fn score_trial(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// EER by a threshold sweep over `−∞`, the midpoints between adjacent
/// distinct scores, and `+∞`.
///
/// `FAR(t)` is the fraction of nontargets scoring `≥ t`, `FRR(t)` the
/// fraction of targets below `t`. The result is interpolated linearly between
/// the two adjacent thresholds where `FAR − FRR` changes sign; an exact zero
/// is taken at the lowest threshold that reaches it.
pub fn compute_eer(scores: &[f64], targets: &[bool]) -> Result<Eer> {
    if scores.len() != targets.len() {
        return Err(Error::Evaluation(format!(
            "{} scores but {} labels",
            scores.len(),
            targets.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("score {i} is not finite")));
    }
    let n_t = targets.iter().filter(|&&t| t).count();
    let n_n = targets.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Evaluation(format!(
            "EER needs both classes ({n_t} targets, {n_n} nontargets)"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));

    // Walk thresholds upward. Below the first score nothing is rejected.
    let (nt, nn) = (n_t as f64, n_n as f64);
    let mut targets_below = 0usize;
    let mut nontargets_below = 0usize;
    let mut prev = (f64::NEG_INFINITY, 1.0, 0.0);
    let mut i = 0;
    loop {
        let (t, far, frr) = prev;
        let diff = far - frr;
        if diff == 0.0 {
            return Ok(Eer { eer: far, threshold: t });
        }
        // consume the next group of equal scores
        let next = if i < order.len() {
            let s = scores[order[i]];
            while i < order.len() && scores[order[i]] == s {
                if targets[order[i]] {
                    targets_below += 1;
                } else {
                    nontargets_below += 1;
                }
                i += 1;
            }
            let t_next = if i < order.len() {
                (s + scores[order[i]]) / 2.0
            } else {
                f64::INFINITY
            };
            (t_next, (n_n - nontargets_below) as f64 / nn, targets_below as f64 / nt)
        } else {
            unreachable!("FAR − FRR reaches −1 at +∞")
        };
        let next_diff = next.1 - next.2;
        if next_diff < 0.0 {
            let alpha = diff / (diff - next_diff);
            let eer = far + alpha * (next.1 - far);
            let threshold = match (t.is_finite(), next.0.is_finite()) {
                (true, true) => t + alpha * (next.0 - t),
                (false, _) => next.0,
                (true, false) => t,
            };
            return Ok(Eer { eer, threshold });
        }
        prev = next;
    }
}

/// Parse a trial list: one `label<TAB>idA<TAB>idB` per line, label 1 or 0.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |why: &str| Error::format(format!("trial list line {}: {why}", n + 1));
        if fields.len() != 3 {
            return Err(bad("expected `label<TAB>idA<TAB>idB`"));
        }
        let target = match fields[0] {
            "1" => true,
            "0" => false,
            other => return Err(bad(&format!("label {other:?} is not 1 or 0"))),
        };
        if fields[1].is_empty() || fields[2].is_empty() {
            return Err(bad("empty utterance id"));
        }
        out.push(Trial {
            target,
            a: fields[1].to_string(),
            b: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", u8::from(t.target), t.a, t.b))
        .collect()
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trials(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub scores: Vec<ScoredTrial>,
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
    /// Trials dropped because an utterance could not be embedded, with the reason.
    pub excluded: Vec<(Trial, String)>,
}

impl ScoreReport {
    pub fn from_scores(scores: Vec<ScoredTrial>, excluded: Vec<(Trial, String)>) -> Result<Self> {
        let values: Vec<f64> = scores.iter().map(|s| s.score).collect();
        let labels: Vec<bool> = scores.iter().map(|s| s.trial.target).collect();
        let Eer { eer, threshold } = compute_eer(&values, &labels)?;
        let n_target = labels.iter().filter(|&&t| t).count();
        Ok(ScoreReport {
            n_target,
            n_nontarget: labels.len() - n_target,
            scores,
            eer,
            threshold,
            excluded,
        })
    }

    /// Machine-readable `key=value` block.
    pub fn key_values(&self) -> String {
        format!(
            "eer={}\nthreshold={}\nn_target={}\nn_nontarget={}\nn_excluded={}\n",
            self.eer,
            self.threshold,
            self.n_target,
            self.n_nontarget,
            self.excluded.len()
        )
    }

    /// Human-readable summary followed by the key-value block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "EER {:.2}% at threshold {:.4} over {} target / {} nontarget trials",
            100.0 * self.eer,
            self.threshold,
            self.n_target,
            self.n_nontarget
        );
        for (t, why) in &self.excluded {
            let _ = writeln!(out, "excluded {} {}: {why}", t.a, t.b);
        }
        out.push('\n');
        out.push_str(&self.key_values());
        out
    }

    /// Score file: `label<TAB>idA<TAB>idB<TAB>score` per trial, scores written
    /// in shortest round-trip form so the EER can be recomputed exactly.
    pub fn score_file(&self) -> String {
        format_scores(&self.scores)
    }
}

pub fn format_scores(scores: &[ScoredTrial]) -> String {
    scores
        .iter()
        .map(|s| format!("{}\t{}\t{}\t{:?}\n", u8::from(s.trial.target), s.trial.a, s.trial.b, s.score))
        .collect()
}

pub fn parse_scores(text: &str) -> Result<Vec<ScoredTrial>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |why: &str| Error::format(format!("score file line {}: {why}", n + 1));
        let (head, score) = line.rsplit_once('\t').ok_or_else(|| bad("expected four tab-separated fields"))?;
        let trial = parse_trials(head).map_err(|_| bad("expected `label<TAB>idA<TAB>idB<TAB>score`"))?;
        let score: f64 = score.trim().parse().map_err(|_| bad(&format!("score {score:?} is not a number")))?;
        out.push(ScoredTrial {
            trial: trial.into_iter().next().ok_or_else(|| bad("empty trial"))?,
            score,
        });
    }
    Ok(out)
}

/// Embed one utterance with the chosen pooling.
pub fn embed(features: &FeatureMatrix, params: &ModelParams, policy: &WindowPolicy, pooling: Pooling) -> Result<Vec<f64>> {
    match pooling {
        Pooling::Attentive => Ok(utterance_embed(features, params, policy)?.embedding),
        Pooling::Average => baseline_average_embed(features, params, policy),
    }
}

/// Embeddings of every distinct id in `ids`, computed once each and rounded to
/// `f32` exactly as an embedding file stores them, so scoring from files and
/// scoring from a checkpoint agree. Failures are kept per id so callers can
/// report them against the trials that need them.
pub fn embed_all<F>(
    ids: &BTreeSet<String>,
    load: F,
    params: &ModelParams,
    policy: &WindowPolicy,
    pooling: Pooling,
) -> BTreeMap<String, Result<Vec<f64>, String>>
where
    F: Fn(&str) -> Result<FeatureMatrix> + Sync,
{
    let ids: Vec<&String> = ids.iter().collect();
    let embedded: Vec<Result<Vec<f64>, String>> = ids
        .par_iter()
        .map(|id| {
            load(id)
                .and_then(|f| embed(&f, params, policy, pooling))
                .map(|e| e.into_iter().map(|v| v as f32 as f64).collect())
                .map_err(|e| e.to_string())
        })
        .collect();
    ids.into_iter().cloned().zip(embedded).collect()
}

/// Score trials from an embedding table.
pub fn score_trials(trials: &[Trial], embeddings: &BTreeMap<String, Result<Vec<f64>, String>>) -> Result<ScoreReport> {
    let mut scores = Vec::with_capacity(trials.len());
    let mut excluded = Vec::new();
    for t in trials {
        let lookup = |id: &str| match embeddings.get(id) {
            Some(Ok(e)) => Ok(e),
            Some(Err(why)) => Err(format!("{id}: {why}")),
            None => Err(format!("{id}: unknown utterance")),
        };
        match (lookup(&t.a), lookup(&t.b)) {
            (Ok(a), Ok(b)) => match score_trial(a, b) {
                Ok(score) => scores.push(ScoredTrial { trial: t.clone(), score }),
                Err(e) => excluded.push((t.clone(), e.to_string())),
            },
            (Err(why), _) | (_, Err(why)) => excluded.push((t.clone(), why)),
        }
    }
    for (t, why) in &excluded {
        log::warn!("trial {} {} excluded: {why}", t.a, t.b);
    }
    ScoreReport::from_scores(scores, excluded)
}

/// Embed each utterance once, score all trials and compute the EER.
pub fn run_trials<F>(
    params: &ModelParams,
    trials: &[Trial],
    load: F,
    policy: &WindowPolicy,
    pooling: Pooling,
) -> Result<ScoreReport>
where
    F: Fn(&str) -> Result<FeatureMatrix> + Sync,
{
    let ids: BTreeSet<String> = trials.iter().flat_map(|t| [t.a.clone(), t.b.clone()]).collect();
    let embeddings = embed_all(&ids, load, params, policy, pooling);
    score_trials(trials, &embeddings)
}
