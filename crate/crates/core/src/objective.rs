//! Forward and backward pass of the joint objective over one training batch.

use rayon::prelude::*;

use crate::error::Result;
use crate::loss::{total_loss, BatchEmbeddings, LossBreakdown, LossConfig};
use crate::model::{attention, lstm, ModelParams};
use crate::segmenter::Segment;

/// `Q × P` utterances, each already cut into segments of the batch window.
/// Utterance `(j, i)` is `utterances[j·P + i]`.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub speakers: usize,
    pub per_speaker: usize,
    pub utterances: Vec<Vec<Segment>>,
}

struct Forward {
    encoder: lstm::EncoderTrace,
    attention: attention::AttentionTrace,
}

fn forward_all(batch: &SegmentBatch, params: &ModelParams) -> Result<Vec<Forward>> {
    batch
        .utterances
        .par_iter()
        .map(|segs| {
            let encoder = lstm::encode(segs, params)?;
            let attention = attention::forward(&encoder.embeddings, params)?;
            Ok(Forward { encoder, attention })
        })
        .collect()
}

fn embeddings(batch: &SegmentBatch, fwd: &[Forward]) -> BatchEmbeddings {
    BatchEmbeddings {
        speakers: batch.speakers,
        per_speaker: batch.per_speaker,
        utterances: fwd.iter().map(|f| f.attention.embedding.clone()).collect(),
        segments: fwd.iter().map(|f| f.encoder.embeddings.clone()).collect(),
        attention: fwd.iter().map(|f| f.attention.weights.clone()).collect(),
    }
}

/// Loss value only.
pub fn batch_loss(batch: &SegmentBatch, params: &ModelParams, cfg: &LossConfig) -> Result<LossBreakdown> {
    let fwd = forward_all(batch, params)?;
    Ok(total_loss(&embeddings(batch, &fwd), params.sim_w, params.sim_b, cfg)?.0)
}

/// Loss and its gradient with respect to every model parameter.
///
/// Per-utterance gradients are computed in parallel and summed in utterance
/// order, so the result does not depend on the thread count.
pub fn loss_and_grad(batch: &SegmentBatch, params: &ModelParams, cfg: &LossConfig) -> Result<(LossBreakdown, ModelParams)> {
    let fwd = forward_all(batch, params)?;
    let (loss, g) = total_loss(&embeddings(batch, &fwd), params.sim_w, params.sim_b, cfg)?;

    let parts: Vec<ModelParams> = fwd
        .par_iter()
        .enumerate()
        .map(|(u, f)| {
            let mut grad = params.zeros_like();
            let mut d_e = attention::backward(
                &f.encoder.embeddings,
                params,
                &f.attention,
                &g.d_utterances[u],
                Some(&g.d_attention[u]),
                &mut grad,
            );
            d_e.add_assign(&g.d_segments[u]).expect("segment gradient shape");
            lstm::backward(params, &f.encoder, &d_e, &mut grad);
            grad
        })
        .collect();

    let mut grad = params.zeros_like();
    for p in &parts {
        grad.add_assign(p);
    }
    grad.sim_w += g.d_w;
    grad.sim_b += g.d_b;
    Ok((loss, grad))
}
