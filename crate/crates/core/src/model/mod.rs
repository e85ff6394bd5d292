//! Decoder-only next-node predictor: linear embedding, stacked gated-attention
//! blocks with ReZero residuals, and a masked output head.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use forward::{forward, forward_on_tape, size_scale, BoundParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("no available node in construction state")]
    NoAvailableNode,
    #[error(transparent)]
    Tape(#[from] crate::autodiff::TapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub qkv_dim: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_true")]
    pub gated_attention: bool,
    #[serde(default = "default_true")]
    pub rezero: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(depth: usize, width: usize, heads: usize, qkv_dim: usize, ffn_dim: usize) -> Self {
        Self { depth, width, heads, qkv_dim, ffn_dim, gated_attention: true, rezero: true }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth == 0 || self.width == 0 || self.heads == 0 || self.qkv_dim == 0 {
            return Err(ModelError::InvalidConfig("all extents must be positive".into()));
        }
        if self.heads * self.qkv_dim != self.width {
            return Err(ModelError::InvalidConfig(format!(
                "heads ({}) x qkv_dim ({}) must equal width ({})",
                self.heads, self.qkv_dim, self.width
            )));
        }
        Ok(())
    }

    /// The published grid keeps ffn_dim == 4 * width; other values are
    /// accepted but flagged.
    pub fn is_canonical_ffn(&self) -> bool {
        self.ffn_dim == 4 * self.width
    }
}

/// A dense linear map `rows -> cols` stored row-major, with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (rows as f64).sqrt();
        let w = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { rows, cols, w, b: vec![0.0; cols] }
    }

    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; cols] }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub wg: Linear,
    pub ffn1: Linear,
    pub ffn2: Linear,
    /// ReZero residual scalars; both zero right after initialization.
    pub alpha1: f64,
    pub alpha2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embed_all: Linear,
    pub embed_start: Linear,
    pub embed_current: Linear,
    pub layers: Vec<LayerParams>,
    pub head: Linear,
}

impl ModelParams {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                wq: Linear::init(w, w, &mut rng),
                wk: Linear::init(w, w, &mut rng),
                wv: Linear::init(w, w, &mut rng),
                wo: Linear::init(w, w, &mut rng),
                wg: Linear::init(w, w, &mut rng),
                ffn1: Linear::init(w, config.ffn_dim, &mut rng),
                ffn2: Linear::init(config.ffn_dim, w, &mut rng),
                alpha1: 0.0,
                alpha2: 0.0,
            })
            .collect();
        Ok(Self {
            config,
            embed_all: Linear::init(2, w, &mut rng),
            embed_start: Linear::init(2, w, &mut rng),
            embed_current: Linear::init(2, w, &mut rng),
            layers,
            head: Linear::init(w, 1, &mut rng),
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let w = config.width;
        let layers = (0..config.depth)
            .map(|_| LayerParams {
                wq: Linear::zeros(w, w),
                wk: Linear::zeros(w, w),
                wv: Linear::zeros(w, w),
                wo: Linear::zeros(w, w),
                wg: Linear::zeros(w, w),
                ffn1: Linear::zeros(w, config.ffn_dim),
                ffn2: Linear::zeros(config.ffn_dim, w),
                alpha1: 0.0,
                alpha2: 0.0,
            })
            .collect();
        Ok(Self {
            config,
            embed_all: Linear::zeros(2, w),
            embed_start: Linear::zeros(2, w),
            embed_current: Linear::zeros(2, w),
            layers,
            head: Linear::zeros(w, 1),
        })
    }

    /// Flat views over every parameter buffer in checkpoint order.
    /// `decay` marks tensors subject to weight decay (weights only; biases
    /// and ReZero scalars are exempt).
    pub fn tensors(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<ParamView<'a>>, name: &str, l: &'a Linear) {
            out.push(ParamView { name: format!("{name}.w"), values: FlatRef::Slice(&l.w), decay: true });
            out.push(ParamView { name: format!("{name}.b"), values: FlatRef::Slice(&l.b), decay: false });
        }
        lin(&mut out, "embed_all", &self.embed_all);
        lin(&mut out, "embed_start", &self.embed_start);
        lin(&mut out, "embed_current", &self.embed_current);
        for (i, layer) in self.layers.iter().enumerate() {
            lin(&mut out, &format!("layer{i}.wq"), &layer.wq);
            lin(&mut out, &format!("layer{i}.wk"), &layer.wk);
            lin(&mut out, &format!("layer{i}.wv"), &layer.wv);
            lin(&mut out, &format!("layer{i}.wo"), &layer.wo);
            lin(&mut out, &format!("layer{i}.wg"), &layer.wg);
            lin(&mut out, &format!("layer{i}.ffn1"), &layer.ffn1);
            lin(&mut out, &format!("layer{i}.ffn2"), &layer.ffn2);
            out.push(ParamView {
                name: format!("layer{i}.alpha1"),
                values: FlatRef::Scalar(layer.alpha1),
                decay: false,
            });
            out.push(ParamView {
                name: format!("layer{i}.alpha2"),
                values: FlatRef::Scalar(layer.alpha2),
                decay: false,
            });
        }
        lin(&mut out, "head", &self.head);
        out
    }

    /// Total parameter scalars in checkpoint order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(param_count(&self.config));
        for t in self.tensors() {
            match t.values {
                FlatRef::Slice(s) => out.extend_from_slice(s),
                FlatRef::Scalar(v) => out.push(v),
            }
        }
        out
    }

    /// Inverse of `flatten`; lengths must match exactly.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != param_count(&self.config) {
            return Err(ModelError::InvalidConfig(format!(
                "flat length {} vs param_count {}",
                flat.len(),
                param_count(&self.config)
            )));
        }
        fn take(flat: &[f64], pos: &mut usize, len: usize) -> Vec<f64> {
            let s = flat[*pos..*pos + len].to_vec();
            *pos += len;
            s
        }
        fn fill(flat: &[f64], pos: &mut usize, l: &mut Linear) {
            l.w = take(flat, pos, l.rows * l.cols);
            l.b = take(flat, pos, l.cols);
        }
        let mut pos = 0;
        fill(flat, &mut pos, &mut self.embed_all);
        fill(flat, &mut pos, &mut self.embed_start);
        fill(flat, &mut pos, &mut self.embed_current);
        for layer in self.layers.iter_mut() {
            fill(flat, &mut pos, &mut layer.wq);
            fill(flat, &mut pos, &mut layer.wk);
            fill(flat, &mut pos, &mut layer.wv);
            fill(flat, &mut pos, &mut layer.wo);
            fill(flat, &mut pos, &mut layer.wg);
            fill(flat, &mut pos, &mut layer.ffn1);
            fill(flat, &mut pos, &mut layer.ffn2);
            layer.alpha1 = take(flat, &mut pos, 1)[0];
            layer.alpha2 = take(flat, &mut pos, 1)[0];
        }
        fill(flat, &mut pos, &mut self.head);
        Ok(())
    }
}

pub enum FlatRef<'a> {
    Slice(&'a [f64]),
    Scalar(f64),
}

pub struct ParamView<'a> {
    pub name: String,
    pub values: FlatRef<'a>,
    pub decay: bool,
}

impl ParamView<'_> {
    pub fn len(&self) -> usize {
        match self.values {
            FlatRef::Slice(s) => s.len(),
            FlatRef::Scalar(_) => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Exact scalar count of `ModelParams` for this config.
pub fn param_count(config: &ModelConfig) -> usize {
    let w = config.width;
    let f = config.ffn_dim;
    let embed = 3 * (2 * w + w);
    let per_layer = 5 * (w * w + w) + (w * f + f) + (f * w + w) + 2;
    let head = w + 1;
    embed + config.depth * per_layer + head
}

/// The `c` of the N ~ c * D * W^2 approximation, least-squares fitted over the
/// supplied configs.
pub fn dw2_constant(configs: &[ModelConfig]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in configs {
        let x = (c.depth * c.width * c.width) as f64;
        num += x * param_count(c) as f64;
        den += x * x;
    }
    num / den
}

/// Approximate count via the fitted `c`.
pub fn param_count_approx(config: &ModelConfig, c: f64) -> f64 {
    c * (config.depth * config.width * config.width) as f64
}

/// Per-step construction context: start node, current node, visited mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstructionState {
    pub start: usize,
    pub current: usize,
    pub visited: Vec<bool>,
    pub step: usize,
}

impl ConstructionState {
    pub fn initial(n: usize, start: usize) -> Self {
        let mut visited = vec![false; n];
        visited[start] = true;
        Self { start, current: start, visited, step: 0 }
    }

    pub fn visit(&mut self, node: usize) {
        debug_assert!(!self.visited[node]);
        self.visited[node] = true;
        self.current = node;
        self.step += 1;
    }

    pub fn available(&self) -> Vec<usize> {
        (0..self.visited.len()).filter(|&i| !self.visited[i]).collect()
    }

    pub fn is_terminal(&self) -> bool {
        self.visited.iter().all(|&v| v)
    }
}
