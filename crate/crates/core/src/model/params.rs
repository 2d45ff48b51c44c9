use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Parameterized};

/// How per-head pooled vectors become one utterance embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMerge {
    /// Mean of the `d_r` pooled vectors.
    Average,
    /// Concatenate the pooled vectors and project back to `d_e`.
    ConcatProject,
}

impl HeadMerge {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMerge::Average => "average",
            HeadMerge::ConcatProject => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "average" => Some(HeadMerge::Average),
            "concat" => Some(HeadMerge::ConcatProject),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    /// Segment / utterance embedding size `d_e`.
    pub embed_dim: usize,
    /// Attention hidden size `d_a`.
    pub attn_dim: usize,
    /// Number of attention heads `d_r`.
    pub heads: usize,
    pub head_merge: HeadMerge,
    /// L2-normalize the pooled utterance embedding.
    pub renormalize: bool,
    pub init_w: f64,
    pub init_b: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 40,
            layers: 1,
            hidden: 32,
            embed_dim: 16,
            attn_dim: 16,
            heads: 2,
            head_merge: HeadMerge::Average,
            renormalize: false,
            init_w: 10.0,
            init_b: 5.0,
        }
    }
}

impl ModelConfig {
    /// Three 512-unit layers, 256-dim embeddings, 128-dim attention.
    pub fn full_scale(heads: usize) -> Self {
        ModelConfig {
            layers: 3,
            hidden: 512,
            embed_dim: 256,
            attn_dim: 128,
            heads,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("heads", self.heads),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if !(self.init_w > 0.0) {
            return Err(Error::Config("model.init_w must be positive".into()));
        }
        Ok(())
    }
}

/// Gate blocks are laid out `[input | forget | candidate | output]` along the
/// column axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `in × 4H`
    pub w_x: Matrix,
    /// `H × 4H`
    pub w_h: Matrix,
    /// `1 × 4H`
    pub bias: Matrix,
}

impl LstmLayer {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmLayer {
            w_x: Matrix::zeros(input, 4 * hidden),
            w_h: Matrix::zeros(hidden, 4 * hidden),
            bias: Matrix::zeros(1, 4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.rows()
    }

    pub fn input(&self) -> usize {
        self.w_x.rows()
    }
}

/// Every trainable weight of the encoder, the attention layer and the
/// similarity affine `(w, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub lstm: Vec<LstmLayer>,
    /// `H × d_e`; the segment representation is `h_T · proj`.
    pub proj: Matrix,
    /// `d_e × d_a`
    pub w1: Matrix,
    /// `d_a × d_r`
    pub w2: Matrix,
    /// `(d_r·d_e) × d_e`, only for [`HeadMerge::ConcatProject`].
    pub head_proj: Option<Matrix>,
    pub sim_w: f64,
    pub sim_b: f64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let k = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-k..k)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl ModelParams {
    /// All weights zero; `w`/`b` at their configured initial values.
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut lstm = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let input = if l == 0 { config.input_dim } else { config.hidden };
            lstm.push(LstmLayer::zeros(input, config.hidden));
        }
        ModelParams {
            config: config.clone(),
            lstm,
            proj: Matrix::zeros(config.hidden, config.embed_dim),
            w1: Matrix::zeros(config.embed_dim, config.attn_dim),
            w2: Matrix::zeros(config.attn_dim, config.heads),
            head_proj: match config.head_merge {
                HeadMerge::Average => None,
                HeadMerge::ConcatProject => Some(Matrix::zeros(config.heads * config.embed_dim, config.embed_dim)),
            },
            sim_w: config.init_w,
            sim_b: config.init_b,
        }
    }

    /// Uniform(±1/√fan_in) weights, zero biases except forget gates at +1.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ModelParams::zeros(config);
        let h = config.hidden;
        for layer in &mut p.lstm {
            let input = layer.input();
            layer.w_x = uniform(rng, input, 4 * h, input);
            layer.w_h = uniform(rng, h, 4 * h, h);
            for j in h..2 * h {
                layer.bias.set(0, j, 1.0);
            }
        }
        p.proj = uniform(rng, h, config.embed_dim, h);
        p.w1 = uniform(rng, config.embed_dim, config.attn_dim, config.embed_dim);
        p.w2 = uniform(rng, config.attn_dim, config.heads, config.attn_dim);
        if let Some(hp) = &mut p.head_proj {
            *hp = uniform(rng, hp.rows(), hp.cols(), hp.rows());
        }
        Ok(p)
    }

    /// Same layout, all zeros (including `w` and `b`).
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for (_, t) in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    pub fn add_assign(&mut self, other: &ModelParams) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Tensor names and shapes in storage order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, layer) in self.lstm.iter().enumerate() {
            out.push((format!("lstm.{l}.w_x"), vec![layer.w_x.rows(), layer.w_x.cols()]));
            out.push((format!("lstm.{l}.w_h"), vec![layer.w_h.rows(), layer.w_h.cols()]));
            out.push((format!("lstm.{l}.bias"), vec![layer.bias.cols()]));
        }
        out.push(("proj".into(), vec![self.proj.rows(), self.proj.cols()]));
        out.push(("attn.w1".into(), vec![self.w1.rows(), self.w1.cols()]));
        out.push(("attn.w2".into(), vec![self.w2.rows(), self.w2.cols()]));
        if let Some(hp) = &self.head_proj {
            out.push(("attn.head_proj".into(), vec![hp.rows(), hp.cols()]));
        }
        out.push(("sim.w".into(), vec![]));
        out.push(("sim.b".into(), vec![]));
        out
    }
}

impl Parameterized for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let names = self.shapes().into_iter().map(|(n, _)| n);
        let mut slices: Vec<&[f64]> = Vec::new();
        for layer in &self.lstm {
            slices.push(layer.w_x.data());
            slices.push(layer.w_h.data());
            slices.push(layer.bias.data());
        }
        slices.push(self.proj.data());
        slices.push(self.w1.data());
        slices.push(self.w2.data());
        if let Some(hp) = &self.head_proj {
            slices.push(hp.data());
        }
        slices.push(std::slice::from_ref(&self.sim_w));
        slices.push(std::slice::from_ref(&self.sim_b));
        names.zip(slices).collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let names: Vec<String> = self.shapes().into_iter().map(|(n, _)| n).collect();
        let mut slices: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.lstm {
            slices.push(layer.w_x.data_mut());
            slices.push(layer.w_h.data_mut());
            slices.push(layer.bias.data_mut());
        }
        slices.push(self.proj.data_mut());
        slices.push(self.w1.data_mut());
        slices.push(self.w2.data_mut());
        if let Some(hp) = &mut self.head_proj {
            slices.push(hp.data_mut());
        }
        slices.push(std::slice::from_mut(&mut self.sim_w));
        slices.push(std::slice::from_mut(&mut self.sim_b));
        names.into_iter().zip(slices).collect()
    }
}
