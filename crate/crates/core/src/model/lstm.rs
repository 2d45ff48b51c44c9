//! Stacked LSTM over a batch of equal-length segments, with backpropagation
//! through time.
//!
//! Sequences are stored time-major: row `t * N + n` holds segment `n` at frame
//! `t`.

use super::params::{LstmLayer, ModelParams};
use crate::error::{Error, Result};
use crate::numcore::{gemm, gemm_nt, gemm_tn, sigmoid, Matrix, NORM_EPS};
use crate::segmenter::Segment;

/// Activations of one layer kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Activated gates, `(T·N) × 4H`: `[i | f | g | o]`.
    gates: Vec<f64>,
    /// Cell states, `(T·N) × H`.
    cells: Vec<f64>,
    /// Hidden outputs, `(T·N) × H`.
    hidden: Vec<f64>,
}

/// Forward state of the encoder for `N` segments of `T` frames.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub steps: usize,
    pub batch: usize,
    input: Vec<f64>,
    layers: Vec<LayerTrace>,
    /// Projected last-frame outputs `f(x_n)`, `N × d_e`.
    pub projected: Matrix,
    /// `‖f(x_n)‖₂` per segment.
    pub norms: Vec<f64>,
    /// L2-normalized segment embeddings `e_n`, `N × d_e`.
    pub embeddings: Matrix,
}

impl EncoderTrace {
    /// Hidden outputs of the top layer at frame `t`, `N × H`.
    pub fn top_hidden(&self, t: usize, hidden: usize) -> &[f64] {
        let top = self.layers.last().expect("at least one layer");
        &top.hidden[t * self.batch * hidden..(t + 1) * self.batch * hidden]
    }
}

/// Gather `N` segments into a time-major `(T·N) × F` buffer.
fn time_major(segments: &[Segment], input_dim: usize) -> Result<(usize, Vec<f64>)> {
    let steps = segments.first().map(Segment::len).unwrap_or(0);
    if steps == 0 {
        return Err(Error::contract("encoder needs at least one non-empty segment"));
    }
    for s in segments {
        if s.len() != steps {
            return Err(Error::contract(format!(
                "segments of a batch must share one length ({} vs {steps})",
                s.len()
            )));
        }
        if s.values.cols() != input_dim {
            return Err(Error::contract(format!(
                "segment has {} feature dims, model expects {input_dim}",
                s.values.cols()
            )));
        }
    }
    let n = segments.len();
    let mut buf = vec![0.0; steps * n * input_dim];
    for (i, s) in segments.iter().enumerate() {
        for t in 0..steps {
            let dst = (t * n + i) * input_dim;
            buf[dst..dst + input_dim].copy_from_slice(s.values.row(t));
        }
    }
    Ok((steps, buf))
}

fn layer_forward(layer: &LstmLayer, input: &[f64], steps: usize, n: usize) -> LayerTrace {
    let h = layer.hidden();
    let g4 = 4 * h;
    let in_dim = layer.input();
    let mut gates = vec![0.0; steps * n * g4];
    for row in gates.chunks_exact_mut(g4) {
        row.copy_from_slice(layer.bias.data());
    }
    gemm(input, steps * n, in_dim, layer.w_x.data(), g4, &mut gates);

    let mut cells = vec![0.0; steps * n * h];
    let mut hidden = vec![0.0; steps * n * h];
    for t in 0..steps {
        let (gate_t, _) = gates[t * n * g4..].split_at_mut(n * g4);
        if t > 0 {
            let prev = &hidden[(t - 1) * n * h..t * n * h];
            gemm(prev, n, h, layer.w_h.data(), g4, gate_t);
        }
        for b in 0..n {
            let g = &mut gate_t[b * g4..(b + 1) * g4];
            for j in 0..h {
                g[j] = sigmoid(g[j]);
                g[h + j] = sigmoid(g[h + j]);
                g[2 * h + j] = g[2 * h + j].tanh();
                g[3 * h + j] = sigmoid(g[3 * h + j]);
            }
            let row = (t * n + b) * h;
            for j in 0..h {
                let c_prev = if t > 0 { cells[row - n * h + j] } else { 0.0 };
                let c = g[h + j] * c_prev + g[j] * g[2 * h + j];
                cells[row + j] = c;
                hidden[row + j] = g[3 * h + j] * c.tanh();
            }
        }
    }
    LayerTrace {
        gates,
        cells,
        hidden,
    }
}

/// Runs the stacked LSTM and the projection over equal-length segments.
///
/// Fails with a degenerate-embedding error when a projected representation
/// has (near) zero norm.
pub fn encode(segments: &[Segment], params: &ModelParams) -> Result<EncoderTrace> {
    let trace = encode_unnormalized(segments, params)?;
    if let Some(&bad) = trace.norms.iter().find(|&&n| !(n > NORM_EPS)) {
        return Err(Error::DegenerateEmbedding(bad));
    }
    Ok(trace)
}

/// Like [`encode`] but leaves degenerate rows of `embeddings` at zero.
pub fn encode_unnormalized(segments: &[Segment], params: &ModelParams) -> Result<EncoderTrace> {
    let cfg = &params.config;
    let (steps, input) = time_major(segments, cfg.input_dim)?;
    let n = segments.len();
    let mut layers: Vec<LayerTrace> = Vec::with_capacity(params.lstm.len());
    for (l, layer) in params.lstm.iter().enumerate() {
        let src: &[f64] = if l == 0 { &input } else { &layers[l - 1].hidden };
        let trace = layer_forward(layer, src, steps, n);
        layers.push(trace);
    }
    let h = cfg.hidden;
    let top = &layers.last().expect("at least one layer").hidden;
    let last = &top[(steps - 1) * n * h..steps * n * h];
    let mut projected = Matrix::zeros(n, cfg.embed_dim);
    gemm(last, n, h, params.proj.data(), cfg.embed_dim, projected.data_mut());
    let mut embeddings = projected.clone();
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = embeddings.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm > NORM_EPS {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Ok(EncoderTrace {
        steps,
        batch: n,
        input,
        layers,
        projected,
        norms,
        embeddings,
    })
}

/// Backward through one layer given `dL/dh` for every step (time-major).
/// Accumulates weight gradients into `grad` and returns `dL/dx` when asked.
fn layer_backward(
    layer: &LstmLayer,
    trace: &LayerTrace,
    input: &[f64],
    d_hidden: &[f64],
    steps: usize,
    n: usize,
    grad: &mut LstmLayer,
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    let h = layer.hidden();
    let g4 = 4 * h;
    let mut d_pre = vec![0.0; steps * n * g4];
    let mut dh_next = vec![0.0; n * h];
    let mut dc_next = vec![0.0; n * h];
    for t in (0..steps).rev() {
        let d_pre_t = &mut d_pre[t * n * g4..(t + 1) * n * g4];
        for b in 0..n {
            let row = (t * n + b) * h;
            let g = &trace.gates[(t * n + b) * g4..(t * n + b + 1) * g4];
            let dp = &mut d_pre_t[b * g4..(b + 1) * g4];
            for j in 0..h {
                let dh = d_hidden[row + j] + dh_next[b * h + j];
                let c = trace.cells[row + j];
                let tc = c.tanh();
                let (gi, gf, gg, go) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                let c_prev = if t > 0 { trace.cells[row - n * h + j] } else { 0.0 };
                let dc = dc_next[b * h + j] + dh * go * (1.0 - tc * tc);
                dp[j] = dc * gg * gi * (1.0 - gi);
                dp[h + j] = dc * c_prev * gf * (1.0 - gf);
                dp[2 * h + j] = dc * gi * (1.0 - gg * gg);
                dp[3 * h + j] = dh * tc * go * (1.0 - go);
                dc_next[b * h + j] = dc * gf;
            }
        }
        dh_next.iter_mut().for_each(|v| *v = 0.0);
        if t > 0 {
            gemm_nt(d_pre_t, n, g4, layer.w_h.data(), h, &mut dh_next);
            let prev = &trace.hidden[(t - 1) * n * h..t * n * h];
            gemm_tn(prev, n, h, d_pre_t, g4, grad.w_h.data_mut());
        }
    }
    let rows = steps * n;
    gemm_tn(input, rows, layer.input(), &d_pre, g4, grad.w_x.data_mut());
    let bias = grad.bias.data_mut();
    for row in d_pre.chunks_exact(g4) {
        bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
    }
    if want_input_grad {
        let mut d_input = vec![0.0; rows * layer.input()];
        gemm_nt(&d_pre, rows, g4, layer.w_x.data(), layer.input(), &mut d_input);
        Some(d_input)
    } else {
        None
    }
}

/// Backpropagate `dL/de_n` (`N × d_e`) through normalization, projection and
/// every LSTM layer, accumulating into `grad`.
pub fn backward(params: &ModelParams, trace: &EncoderTrace, d_embeddings: &Matrix, grad: &mut ModelParams) {
    let cfg = &params.config;
    let (n, steps, h, de) = (trace.batch, trace.steps, cfg.hidden, cfg.embed_dim);

    // through e = f / ‖f‖
    let mut d_proj_out = Matrix::zeros(n, de);
    for i in 0..n {
        let e = trace.embeddings.row(i);
        let g = d_embeddings.row(i);
        let dot: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
        let inv = 1.0 / trace.norms[i];
        for (k, dst) in d_proj_out.row_mut(i).iter_mut().enumerate() {
            *dst = (g[k] - e[k] * dot) * inv;
        }
    }

    // through f = h_T · proj
    let last = trace.top_hidden(steps - 1, h);
    gemm_tn(last, n, h, d_proj_out.data(), de, grad.proj.data_mut());
    let mut d_hidden = vec![0.0; steps * n * h];
    gemm_nt(
        d_proj_out.data(),
        n,
        de,
        params.proj.data(),
        h,
        &mut d_hidden[(steps - 1) * n * h..],
    );

    for l in (0..params.lstm.len()).rev() {
        let input: &[f64] = if l == 0 { &trace.input } else { &trace.layers[l - 1].hidden };
        let d_input = layer_backward(
            &params.lstm[l],
            &trace.layers[l],
            input,
            &d_hidden,
            steps,
            n,
            &mut grad.lstm[l],
            l > 0,
        );
        if let Some(d) = d_input {
            d_hidden = d;
        }
    }
}
