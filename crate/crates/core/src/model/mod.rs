//! LSTM segment encoder and multi-head attentive pooling.

pub mod attention;
pub mod checkpoint;
pub mod lstm;
mod params;

pub use attention::{attention_scores, attentive_pool, pool_heads};
pub use params::{HeadMerge, LstmLayer, ModelConfig, ModelParams};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::numcore::Matrix;
use crate::segmenter::{segment, Segment, WindowMode, WindowPolicy};

/// Hidden states of the top layer (`T` entries of `N × H`) and the projected
/// last-frame outputs (`N × d_e`).
pub fn lstm_forward(segments: &[Segment], params: &ModelParams) -> Result<(Vec<Matrix>, Matrix)> {
    let trace = lstm::encode_unnormalized(segments, params)?;
    let h = params.config.hidden;
    let hidden = (0..trace.steps)
        .map(|t| Matrix::from_vec(trace.batch, h, trace.top_hidden(t, h).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((hidden, trace.projected))
}

/// Unit-norm embedding of one segment.
pub fn segment_embed(segment: &Segment, params: &ModelParams) -> Result<Vec<f64>> {
    let trace = lstm::encode(std::slice::from_ref(segment), params)?;
    Ok(trace.embeddings.row(0).to_vec())
}

/// Unit-norm embeddings of equal-length segments, one row each.
pub fn segment_embeddings(segments: &[Segment], params: &ModelParams) -> Result<Matrix> {
    Ok(lstm::encode(segments, params)?.embeddings)
}

#[derive(Clone, Debug)]
pub struct UtteranceOutput {
    pub embedding: Vec<f64>,
    /// `N × d_r`
    pub attention: Matrix,
    /// `N × d_e`
    pub segments: Matrix,
}

fn window_for(policy: &WindowPolicy) -> Result<usize> {
    match policy.mode {
        WindowMode::Test => Ok(policy.test_length),
        WindowMode::Train => Err(Error::contract(
            "whole-utterance embedding needs a test policy (training draws the window per batch)",
        )),
    }
}

/// Segment an utterance with the policy's test window, embed every segment
/// and pool them with attention.
pub fn utterance_embed(features: &FeatureMatrix, params: &ModelParams, policy: &WindowPolicy) -> Result<UtteranceOutput> {
    let length = window_for(policy)?;
    embed_with_window(features, params, policy, length)
}

pub fn embed_with_window(
    features: &FeatureMatrix,
    params: &ModelParams,
    policy: &WindowPolicy,
    length: usize,
) -> Result<UtteranceOutput> {
    let segs = segment(features, length, policy)?;
    let e = segment_embeddings(&segs, params)?;
    let trace = attention::forward(&e, params)?;
    Ok(UtteranceOutput {
        embedding: trace.embedding,
        attention: trace.weights,
        segments: e,
    })
}

/// Mean of the segment embeddings: the averaging baseline.
pub fn baseline_average_embed(features: &FeatureMatrix, params: &ModelParams, policy: &WindowPolicy) -> Result<Vec<f64>> {
    let length = window_for(policy)?;
    let segs = segment(features, length, policy)?;
    let e = segment_embeddings(&segs, params)?;
    Ok(mean_rows(&e))
}

pub fn mean_rows(m: &Matrix) -> Vec<f64> {
    let n = m.rows() as f64;
    (0..m.cols())
        .map(|k| (0..m.rows()).map(|r| m.get(r, k)).sum::<f64>() / n)
        .collect()
}
