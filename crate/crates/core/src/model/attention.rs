//! Multi-head attention over segment embeddings and attentive pooling.

use super::params::{HeadMerge, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{gemm, gemm_nt, gemm_tn, Axis, Matrix};

/// Forward values of one utterance's attention layer.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    /// `E · W1`, `N × d_a`
    pre_relu: Matrix,
    /// `relu(E · W1)`, `N × d_a`
    hidden: Matrix,
    /// Attention weights `A`, `N × d_r`, each column sums to one.
    pub weights: Matrix,
    /// Per-head pooled vectors `Aᵀ E`, `d_r × d_e`.
    pub pooled: Matrix,
    /// Merged embedding before optional renormalization.
    pub merged: Vec<f64>,
    /// Final utterance embedding.
    pub embedding: Vec<f64>,
}

fn check(e: &Matrix, params: &ModelParams) -> Result<()> {
    if e.rows() == 0 {
        return Err(Error::contract("attention needs at least one segment"));
    }
    if e.cols() != params.w1.rows() {
        return Err(Error::contract(format!(
            "segment embeddings have {} dims, attention expects {}",
            e.cols(),
            params.w1.rows()
        )));
    }
    Ok(())
}

/// `A = softmax_n(relu(E W1) W2)`, returned with the intermediate activations.
fn scores_with_hidden(e: &Matrix, params: &ModelParams) -> Result<(Matrix, Matrix, Matrix)> {
    check(e, params)?;
    let (n, da, dr) = (e.rows(), params.w1.cols(), params.w2.cols());
    let mut pre = Matrix::zeros(n, da);
    gemm(e.data(), n, e.cols(), params.w1.data(), da, pre.data_mut());
    let hidden = pre.map(crate::numcore::Activation::Relu);
    let mut logits = Matrix::zeros(n, dr);
    gemm(hidden.data(), n, da, params.w2.data(), dr, logits.data_mut());
    let weights = logits.softmax(Axis::Cols)?;
    Ok((pre, hidden, weights))
}

/// Attention matrix `N × d_r`; softmax runs over segments independently per head.
pub fn attention_scores(e: &Matrix, params: &ModelParams) -> Result<Matrix> {
    Ok(scores_with_hidden(e, params)?.2)
}

/// Per-head weighted sums `Aᵀ E` (`d_r × d_e`).
pub fn pool_heads(e: &Matrix, a: &Matrix) -> Result<Matrix> {
    if a.rows() != e.rows() {
        return Err(Error::contract(format!(
            "attention has {} rows for {} segments",
            a.rows(),
            e.rows()
        )));
    }
    let mut pooled = Matrix::zeros(a.cols(), e.cols());
    gemm_tn(a.data(), a.rows(), a.cols(), e.data(), e.cols(), pooled.data_mut());
    Ok(pooled)
}

fn merge_heads(pooled: &Matrix, params: &ModelParams) -> Result<Vec<f64>> {
    match params.config.head_merge {
        HeadMerge::Average => {
            let heads = pooled.rows() as f64;
            Ok((0..pooled.cols())
                .map(|k| (0..pooled.rows()).map(|r| pooled.get(r, k)).sum::<f64>() / heads)
                .collect())
        }
        HeadMerge::ConcatProject => {
            let hp = params
                .head_proj
                .as_ref()
                .ok_or_else(|| Error::contract("concat head merge needs attn.head_proj"))?;
            if hp.rows() != pooled.data().len() {
                return Err(Error::contract("attn.head_proj shape does not match heads × d_e"));
            }
            let mut out = vec![0.0; hp.cols()];
            gemm(pooled.data(), 1, hp.rows(), hp.data(), hp.cols(), &mut out);
            Ok(out)
        }
    }
}

fn finish(merged: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    if params.config.renormalize {
        crate::numcore::l2_normalize(merged)
    } else {
        Ok(merged.to_vec())
    }
}

/// Utterance embedding from segment embeddings and an attention matrix.
pub fn attentive_pool(e: &Matrix, a: &Matrix, params: &ModelParams) -> Result<Vec<f64>> {
    let pooled = pool_heads(e, a)?;
    finish(&merge_heads(&pooled, params)?, params)
}

pub fn forward(e: &Matrix, params: &ModelParams) -> Result<AttentionTrace> {
    let (pre_relu, hidden, weights) = scores_with_hidden(e, params)?;
    let pooled = pool_heads(e, &weights)?;
    let merged = merge_heads(&pooled, params)?;
    let embedding = finish(&merged, params)?;
    Ok(AttentionTrace {
        pre_relu,
        hidden,
        weights,
        pooled,
        merged,
        embedding,
    })
}

/// Backward through pooling and attention.
///
/// `d_embedding` is `dL/dẽ`; `d_weights` is any extra `dL/dA` (the diversity
/// penalty). Returns `dL/dE` and accumulates `W1`, `W2` and head-projection
/// gradients into `grad`.
pub fn backward(
    e: &Matrix,
    params: &ModelParams,
    trace: &AttentionTrace,
    d_embedding: &[f64],
    d_weights: Option<&Matrix>,
    grad: &mut ModelParams,
) -> Matrix {
    let (n, de) = (e.rows(), e.cols());
    let (da, dr) = (params.w1.cols(), params.w2.cols());

    let d_merged: Vec<f64> = if params.config.renormalize {
        let norm = trace.merged.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = trace.embedding.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        d_embedding
            .iter()
            .zip(&trace.embedding)
            .map(|(g, u)| (g - u * dot) / norm)
            .collect()
    } else {
        d_embedding.to_vec()
    };

    let mut d_pooled = Matrix::zeros(dr, de);
    match params.config.head_merge {
        HeadMerge::Average => {
            for r in 0..dr {
                for (k, dst) in d_pooled.row_mut(r).iter_mut().enumerate() {
                    *dst = d_merged[k] / dr as f64;
                }
            }
        }
        HeadMerge::ConcatProject => {
            let hp = params.head_proj.as_ref().expect("checked in forward");
            let ghp = grad.head_proj.as_mut().expect("gradient layout mirrors params");
            gemm_tn(trace.pooled.data(), 1, hp.rows(), &d_merged, hp.cols(), ghp.data_mut());
            gemm_nt(&d_merged, 1, hp.cols(), hp.data(), hp.rows(), d_pooled.data_mut());
        }
    }

    // pooled = Aᵀ E
    let a = &trace.weights;
    let mut d_e = Matrix::zeros(n, de);
    gemm(a.data(), n, dr, d_pooled.data(), de, d_e.data_mut());
    let mut d_a = match d_weights {
        Some(extra) => extra.clone(),
        None => Matrix::zeros(n, dr),
    };
    gemm_nt(e.data(), n, de, d_pooled.data(), dr, d_a.data_mut());

    // softmax over segments, per head
    let mut d_logits = Matrix::zeros(n, dr);
    for r in 0..dr {
        let s: f64 = (0..n).map(|m| a.get(m, r) * d_a.get(m, r)).sum();
        for m in 0..n {
            d_logits.set(m, r, a.get(m, r) * (d_a.get(m, r) - s));
        }
    }

    // logits = relu(E W1) W2
    gemm_tn(trace.hidden.data(), n, da, d_logits.data(), dr, grad.w2.data_mut());
    let mut d_hidden = Matrix::zeros(n, da);
    gemm_nt(d_logits.data(), n, dr, params.w2.data(), da, d_hidden.data_mut());
    for (d, &pre) in d_hidden.data_mut().iter_mut().zip(trace.pre_relu.data()) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }
    gemm_tn(e.data(), n, de, d_hidden.data(), da, grad.w1.data_mut());
    gemm_nt(d_hidden.data(), n, da, params.w1.data(), de, d_e.data_mut());
    d_e
}
