//! Joint objective `L = L_u + λs·L_s + λp·L_p`.
//!
//! `L_u` is the GE2E loss over utterance embeddings, `L_s` the same loss over
//! every segment embedding, and `L_p = ‖AᵀA − I‖_F²` the attention diversity
//! penalty. Everything here works on embeddings; chaining into the network
//! weights happens in [`crate::objective`].

use crate::error::{Error, Result};
use crate::numcore::{dot, log_sum_exp, norm, softmax, Matrix, NORM_EPS};

/// Which centroid a segment is compared against for its own speaker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentCentroids {
    /// Mean of all segments of the speaker across its utterances.
    Speaker,
    /// Own-speaker column uses the mean of the segment's own utterance.
    Utterance,
}

impl SegmentCentroids {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentCentroids::Speaker => "speaker",
            SegmentCentroids::Utterance => "utterance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "speaker" => Some(SegmentCentroids::Speaker),
            "utterance" => Some(SegmentCentroids::Utterance),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_s: f64,
    pub lambda_p: f64,
    /// Leave each embedding out of its own speaker's centroid.
    pub exclude_self: bool,
    pub segment_centroids: SegmentCentroids,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_s: 0.2,
            lambda_p: 0.001,
            exclude_self: false,
            segment_centroids: SegmentCentroids::Speaker,
        }
    }
}

/// Embeddings of a `Q × P` batch. Utterance `(j, i)` lives at index `j·P + i`.
#[derive(Clone, Debug)]
pub struct BatchEmbeddings {
    pub speakers: usize,
    pub per_speaker: usize,
    /// `ẽ_ji`, one vector per utterance.
    pub utterances: Vec<Vec<f64>>,
    /// Segment embeddings of each utterance, `N_ji × d_e`.
    pub segments: Vec<Matrix>,
    /// Attention matrices, `N_ji × d_r`.
    pub attention: Vec<Matrix>,
}

impl BatchEmbeddings {
    pub fn validate(&self) -> Result<()> {
        let n = self.speakers * self.per_speaker;
        if self.speakers == 0 || self.per_speaker == 0 {
            return Err(Error::contract("batch needs Q ≥ 1 and P ≥ 1"));
        }
        if self.utterances.len() != n || self.segments.len() != n || self.attention.len() != n {
            return Err(Error::contract(format!(
                "batch grid is incomplete: expected {n} utterances, got {}/{}/{}",
                self.utterances.len(),
                self.segments.len(),
                self.attention.len()
            )));
        }
        for (u, (s, a)) in self.segments.iter().zip(&self.attention).enumerate() {
            if s.rows() == 0 {
                return Err(Error::contract(format!("utterance {u} has no segments")));
            }
            if a.rows() != s.rows() {
                return Err(Error::contract(format!("utterance {u}: attention rows differ from segments")));
            }
        }
        Ok(())
    }

    pub fn speaker_of(&self, utterance: usize) -> usize {
        utterance / self.per_speaker
    }
}

/// `(Q·P) × Q` scaled cosine similarities with the true-speaker column of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Matrix,
    pub labels: Vec<usize>,
}

/// Per-speaker mean of utterance embeddings (no self-exclusion).
pub fn centroids(batch: &BatchEmbeddings) -> Vec<Vec<f64>> {
    (0..batch.speakers)
        .map(|j| {
            let members = &batch.utterances[j * batch.per_speaker..(j + 1) * batch.per_speaker];
            mean(members.iter().map(Vec::as_slice))
        })
        .collect()
}

fn mean<'a>(vectors: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut acc: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for v in vectors {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

/// `S[r][k] = w·cos(x_r, c_k) + b`.
pub fn similarity_matrix(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    centroids: &[Vec<f64>],
    w: f64,
    b: f64,
) -> Result<SimilarityMatrix> {
    if !(w > 0.0) {
        return Err(Error::contract(format!("similarity scale w = {w} must be positive")));
    }
    let mut values = Matrix::zeros(embeddings.len(), centroids.len());
    for (r, x) in embeddings.iter().enumerate() {
        for (k, c) in centroids.iter().enumerate() {
            values.set(r, k, w * crate::numcore::cosine(x, c)? + b);
        }
    }
    Ok(SimilarityMatrix {
        values,
        labels: labels.to_vec(),
    })
}

/// `Σ_r [log Σ_k exp(S_rk) − S_r,label(r)]`.
pub fn ge2e_loss(s: &SimilarityMatrix) -> f64 {
    (0..s.values.rows())
        .map(|r| {
            let row = s.values.row(r);
            log_sum_exp(row) - row[s.labels[r]]
        })
        .sum()
}

/// GE2E over a set of row vectors whose centroids are means of member sets.
///
/// Row `r` is compared against centroid `column_centroid[r][k]` for speaker
/// column `k`; its target column is `labels[r]`.
struct Ge2eProblem<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
    speakers: usize,
    members: Vec<Vec<usize>>,
    column_centroid: Vec<Vec<usize>>,
}

struct Ge2eGrad {
    loss: f64,
    d_rows: Vec<Vec<f64>>,
    d_w: f64,
    d_b: f64,
}

fn cosine_parts(x: &[f64], c: &[f64]) -> Result<(f64, f64, f64)> {
    let nx = norm(x);
    let nc = norm(c);
    if !(nx > NORM_EPS) {
        return Err(Error::DegenerateEmbedding(nx));
    }
    if !(nc > NORM_EPS) {
        return Err(Error::DegenerateEmbedding(nc));
    }
    Ok((dot(x, c) / (nx * nc), nx, nc))
}

impl Ge2eProblem<'_> {
    fn solve(&self, w: f64, b: f64) -> Result<Ge2eGrad> {
        if !(w > 0.0) {
            return Err(Error::contract(format!("similarity scale w = {w} must be positive")));
        }
        let dim = self.rows.first().map_or(0, |r| r.len());
        let centroids: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| mean(m.iter().map(|&i| self.rows[i])))
            .collect();
        let mut d_centroids = vec![vec![0.0; dim]; centroids.len()];
        let mut d_rows = vec![vec![0.0; dim]; self.rows.len()];
        let (mut loss, mut d_w, mut d_b) = (0.0, 0.0, 0.0);

        let mut cos = vec![0.0; self.speakers];
        let mut s = vec![0.0; self.speakers];
        for (r, x) in self.rows.iter().enumerate() {
            for k in 0..self.speakers {
                let c = &centroids[self.column_centroid[r][k]];
                cos[k] = cosine_parts(x, c)?.0;
                s[k] = w * cos[k] + b;
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("row {r}: non-finite similarity {s:?}")));
            }
            let label = self.labels[r];
            loss += log_sum_exp(&s) - s[label];
            let mut d_s = softmax(&s)?;
            d_s[label] -= 1.0;
            for k in 0..self.speakers {
                if d_s[k] == 0.0 {
                    continue;
                }
                let m = self.column_centroid[r][k];
                let c = &centroids[m];
                let (cs, nx, nc) = cosine_parts(x, c)?;
                d_w += d_s[k] * cs;
                d_b += d_s[k];
                let g = d_s[k] * w;
                for d in 0..dim {
                    d_rows[r][d] += g * (c[d] / (nx * nc) - cs * x[d] / (nx * nx));
                    d_centroids[m][d] += g * (x[d] / (nx * nc) - cs * c[d] / (nc * nc));
                }
            }
        }
        for (m, members) in self.members.iter().enumerate() {
            let inv = 1.0 / members.len() as f64;
            for &i in members {
                for d in 0..dim {
                    d_rows[i][d] += d_centroids[m][d] * inv;
                }
            }
        }
        Ok(Ge2eGrad {
            loss,
            d_rows,
            d_w,
            d_b,
        })
    }
}

/// Centroid tables for rows grouped by speaker. `groups[j]` lists the row
/// indices of speaker `j`; `own[r]`, when given, overrides the own-speaker
/// member set of row `r`.
fn build_problem<'a>(
    rows: Vec<&'a [f64]>,
    groups: &[Vec<usize>],
    exclude_self: bool,
    own: Option<&dyn Fn(usize) -> Vec<usize>>,
) -> Result<Ge2eProblem<'a>> {
    let speakers = groups.len();
    let mut labels = vec![0; rows.len()];
    for (j, g) in groups.iter().enumerate() {
        for &r in g {
            labels[r] = j;
        }
    }
    let mut members: Vec<Vec<usize>> = groups.to_vec();
    let mut column_centroid = Vec::with_capacity(rows.len());
    for r in 0..rows.len() {
        let label = labels[r];
        let mut cols: Vec<usize> = (0..speakers).collect();
        let mut own_set = match own {
            Some(f) => f(r),
            None => groups[label].clone(),
        };
        if exclude_self {
            own_set.retain(|&i| i != r);
            if own_set.is_empty() {
                return Err(Error::contract(
                    "centroid self-exclusion needs at least two members per centroid",
                ));
            }
        }
        if own_set != groups[label] {
            members.push(own_set);
            cols[label] = members.len() - 1;
        }
        column_centroid.push(cols);
    }
    Ok(Ge2eProblem {
        rows,
        labels,
        speakers,
        members,
        column_centroid,
    })
}

/// Gradients of the joint objective with respect to the batch embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingGrads {
    pub d_utterances: Vec<Vec<f64>>,
    pub d_segments: Vec<Matrix>,
    pub d_attention: Vec<Matrix>,
    pub d_w: f64,
    pub d_b: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub utterance: f64,
    pub segment: f64,
    pub penalty: f64,
}

impl LossBreakdown {
    pub fn combine(utterance: f64, segment: f64, penalty: f64, cfg: &LossConfig) -> Self {
        LossBreakdown {
            total: utterance + cfg.lambda_s * segment + cfg.lambda_p * penalty,
            utterance,
            segment,
            penalty,
        }
    }
}

fn utterance_problem<'a>(batch: &'a BatchEmbeddings, cfg: &LossConfig) -> Result<Ge2eProblem<'a>> {
    let p = batch.per_speaker;
    let groups: Vec<Vec<usize>> = (0..batch.speakers).map(|j| (j * p..(j + 1) * p).collect()).collect();
    let rows = batch.utterances.iter().map(Vec::as_slice).collect();
    build_problem(rows, &groups, cfg.exclude_self, None)
}

fn segment_problem<'a>(batch: &'a BatchEmbeddings, cfg: &LossConfig) -> Result<(Ge2eProblem<'a>, Vec<usize>)> {
    let mut rows: Vec<&[f64]> = Vec::new();
    let mut offsets = Vec::with_capacity(batch.segments.len());
    let mut utterance_rows: Vec<Vec<usize>> = Vec::with_capacity(batch.segments.len());
    for seg in &batch.segments {
        offsets.push(rows.len());
        let start = rows.len();
        for n in 0..seg.rows() {
            rows.push(seg.row(n));
        }
        utterance_rows.push((start..rows.len()).collect());
    }
    let p = batch.per_speaker;
    let groups: Vec<Vec<usize>> = (0..batch.speakers)
        .map(|j| utterance_rows[j * p..(j + 1) * p].concat())
        .collect();
    let owner: Vec<usize> = utterance_rows
        .iter()
        .enumerate()
        .flat_map(|(u, r)| std::iter::repeat_n(u, r.len()))
        .collect();
    let own = |r: usize| utterance_rows[owner[r]].clone();
    let problem = match cfg.segment_centroids {
        SegmentCentroids::Speaker => build_problem(rows, &groups, cfg.exclude_self, None)?,
        SegmentCentroids::Utterance => build_problem(rows, &groups, cfg.exclude_self, Some(&own))?,
    };
    Ok((problem, offsets))
}

/// Utterance-level GE2E loss `L_u`.
pub fn utterance_ge2e_loss(batch: &BatchEmbeddings, w: f64, b: f64, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    Ok(utterance_problem(batch, cfg)?.solve(w, b)?.loss)
}

/// Segment-level GE2E loss `L_s` over every segment embedding.
pub fn segment_ge2e_loss(batch: &BatchEmbeddings, w: f64, b: f64, cfg: &LossConfig) -> Result<f64> {
    batch.validate()?;
    Ok(segment_problem(batch, cfg)?.0.solve(w, b)?.loss)
}

/// `‖AᵀA − I‖_F²` for one `N × d_r` attention matrix; zero when `d_r = 1`.
pub fn penalty(a: &Matrix) -> f64 {
    if a.cols() <= 1 {
        return 0.0;
    }
    let g = gram_minus_identity(a);
    g.frobenius_sq()
}

fn gram_minus_identity(a: &Matrix) -> Matrix {
    let r = a.cols();
    let mut g = Matrix::zeros(r, r);
    crate::numcore::gemm_tn(a.data(), a.rows(), r, a.data(), r, g.data_mut());
    for i in 0..r {
        g.set(i, i, g.get(i, i) - 1.0);
    }
    g
}

/// `dL_p/dA = 4·A·(AᵀA − I)`; zero when `d_r = 1`.
pub fn penalty_grad(a: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols());
    if a.cols() <= 1 {
        return out;
    }
    let g = gram_minus_identity(a);
    crate::numcore::gemm(a.data(), a.rows(), a.cols(), g.data(), a.cols(), out.data_mut());
    out.scale(4.0);
    out
}

/// Value and embedding-level gradients of the joint objective.
pub fn total_loss(batch: &BatchEmbeddings, w: f64, b: f64, cfg: &LossConfig) -> Result<(LossBreakdown, EmbeddingGrads)> {
    if cfg.lambda_s < 0.0 || cfg.lambda_p < 0.0 {
        return Err(Error::contract("loss weights must be non-negative"));
    }
    batch.validate()?;
    let u = utterance_problem(batch, cfg)?.solve(w, b)?;

    let (seg_loss, d_segments, seg_dw, seg_db) = if cfg.lambda_s > 0.0 {
        let (problem, offsets) = segment_problem(batch, cfg)?;
        let s = problem.solve(w, b)?;
        let d_segments = batch
            .segments
            .iter()
            .zip(&offsets)
            .map(|(seg, &off)| {
                let mut m = Matrix::zeros(seg.rows(), seg.cols());
                for n in 0..seg.rows() {
                    for (dst, g) in m.row_mut(n).iter_mut().zip(&s.d_rows[off + n]) {
                        *dst = cfg.lambda_s * g;
                    }
                }
                m
            })
            .collect();
        (s.loss, d_segments, s.d_w, s.d_b)
    } else {
        let seg_loss = segment_problem(batch, cfg)?.0.solve(w, b)?.loss;
        let zeros = batch.segments.iter().map(|s| Matrix::zeros(s.rows(), s.cols())).collect();
        (seg_loss, zeros, 0.0, 0.0)
    };

    let pen: f64 = batch.attention.iter().map(penalty).sum();
    let d_attention = batch
        .attention
        .iter()
        .map(|a| {
            let mut g = penalty_grad(a);
            g.scale(cfg.lambda_p);
            g
        })
        .collect();

    let breakdown = LossBreakdown::combine(u.loss, seg_loss, pen, cfg);
    Ok((
        breakdown,
        EmbeddingGrads {
            d_utterances: u.d_rows,
            d_segments,
            d_attention,
            d_w: u.d_w + cfg.lambda_s * seg_dw,
            d_b: u.d_b + cfg.lambda_s * seg_db,
        },
    ))
}
