//! The forecaster: segment embedding, adaptive fusion with prompt
//! embeddings, a small causal transformer backbone, a softmax-gated mixture of
//! linear experts and an output projection back to segment space.
//!
//! Every position predicts the segment that follows it. Gradients are written
//! out by hand in [`backward`]; [`gradcheck`] verifies them against central
//! finite differences.

pub mod backward;
pub mod forward;
pub mod gradcheck;

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use backward::{backward, backward_batch};
pub use forward::{
    backbone_forward, forward, forward_batch, forward_from_fused, fuse, fuse_grad_theta,
    moe_forward, predict_segment, segment_embed, BlockTrace, ForwardTrace, GateMatrix,
    HeadOutput, SeqInput,
};

/// How segment and prompt embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `α = sigmoid(θ)` with θ trained.
    Adaptive,
    /// `α = 1`: only the segment embedding passes, θ is never updated.
    SeriesOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub segment_len: usize,
    pub hidden_dim: usize,
    pub experts: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub fusion: FusionMode,
    /// When false the prompt embedding is replaced by a zero vector.
    pub text_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segment_len: 96,
            hidden_dim: 128,
            experts: 4,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
            fusion: FusionMode::Adaptive,
            text_context: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.segment_len < 2 {
            return bad(format!("segment_len must be >= 2, got {}", self.segment_len));
        }
        if self.hidden_dim == 0 || self.experts == 0 || self.ffn_mult == 0 {
            return bad("hidden_dim, experts and ffn_mult must be positive".into());
        }
        if self.layers > 0 && (self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads)) {
            return bad(format!(
                "hidden_dim {} must be divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn has_gate(&self) -> bool {
        self.experts > 1
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub norm1: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub norm2: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    pub w: Mat,
    pub b: Mat,
}

/// All learnable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub seg_w: Mat,
    pub seg_b: Mat,
    pub theta: Mat,
    pub blocks: Vec<BlockParams>,
    pub experts: Vec<Mat>,
    pub gate: Option<GateParams>,
    pub out_w: Mat,
    pub out_b: Mat,
}

fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn ones(n: usize) -> Mat {
    Mat::from_vec(1, n, vec![1.0; n])
}

impl Params {
    /// Seeded init: weights uniform in ±1/√fan_in, biases zero, norm scales
    /// one, θ = 0.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, d, f) = (cfg.segment_len, cfg.hidden_dim, cfg.ffn_dim());
        let seg_w = uniform_mat(&mut rng, s, d);
        let blocks = (0..cfg.layers)
            .map(|_| BlockParams {
                norm1: ones(d),
                wq: uniform_mat(&mut rng, d, d),
                wk: uniform_mat(&mut rng, d, d),
                wv: uniform_mat(&mut rng, d, d),
                wo: uniform_mat(&mut rng, d, d),
                norm2: ones(d),
                w1: uniform_mat(&mut rng, d, f),
                b1: Mat::zeros(1, f),
                w2: uniform_mat(&mut rng, f, d),
                b2: Mat::zeros(1, d),
            })
            .collect();
        let experts = (0..cfg.experts)
            .map(|_| uniform_mat(&mut rng, d, d))
            .collect();
        let gate = cfg.has_gate().then(|| GateParams {
            w: uniform_mat(&mut rng, d, cfg.experts),
            b: Mat::zeros(1, cfg.experts),
        });
        let out_w = uniform_mat(&mut rng, d, s);
        Ok(Self {
            seg_w,
            seg_b: Mat::zeros(1, d),
            theta: Mat::zeros(1, 1),
            blocks,
            experts,
            gate,
            out_w,
            out_b: Mat::zeros(1, s),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(|_, m| m.fill(0.0));
        z
    }

    pub fn theta(&self) -> f64 {
        self.theta.data[0]
    }

    /// Visits every block in canonical order with its checkpoint name.
    pub fn visit(&self, mut f: impl FnMut(&str, &Mat)) {
        f("seg_W", &self.seg_w);
        f("seg_b", &self.seg_b);
        f("theta", &self.theta);
        for (l, b) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{l}.norm1"), &b.norm1);
            f(&format!("blocks.{l}.wq"), &b.wq);
            f(&format!("blocks.{l}.wk"), &b.wk);
            f(&format!("blocks.{l}.wv"), &b.wv);
            f(&format!("blocks.{l}.wo"), &b.wo);
            f(&format!("blocks.{l}.norm2"), &b.norm2);
            f(&format!("blocks.{l}.w1"), &b.w1);
            f(&format!("blocks.{l}.b1"), &b.b1);
            f(&format!("blocks.{l}.w2"), &b.w2);
            f(&format!("blocks.{l}.b2"), &b.b2);
        }
        for (k, w) in self.experts.iter().enumerate() {
            f(&format!("experts.{k}"), w);
        }
        if let Some(g) = &self.gate {
            f("gate_W", &g.w);
            f("gate_b", &g.b);
        }
        f("out_W", &self.out_w);
        f("out_b", &self.out_b);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Mat)) {
        f("seg_W", &mut self.seg_w);
        f("seg_b", &mut self.seg_b);
        f("theta", &mut self.theta);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("blocks.{l}.norm1"), &mut b.norm1);
            f(&format!("blocks.{l}.wq"), &mut b.wq);
            f(&format!("blocks.{l}.wk"), &mut b.wk);
            f(&format!("blocks.{l}.wv"), &mut b.wv);
            f(&format!("blocks.{l}.wo"), &mut b.wo);
            f(&format!("blocks.{l}.norm2"), &mut b.norm2);
            f(&format!("blocks.{l}.w1"), &mut b.w1);
            f(&format!("blocks.{l}.b1"), &mut b.b1);
            f(&format!("blocks.{l}.w2"), &mut b.w2);
            f(&format!("blocks.{l}.b2"), &mut b.b2);
        }
        for (k, w) in self.experts.iter_mut().enumerate() {
            f(&format!("experts.{k}"), w);
        }
        if let Some(g) = &mut self.gate {
            f("gate_W", &mut g.w);
            f("gate_b", &mut g.b);
        }
        f("out_W", &mut self.out_w);
        f("out_b", &mut self.out_b);
    }

    pub fn blocks(&self) -> Vec<&Mat> {
        let mut out = vec![&self.seg_w, &self.seg_b, &self.theta];
        for b in &self.blocks {
            out.extend([
                &b.norm1, &b.wq, &b.wk, &b.wv, &b.wo, &b.norm2, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend(self.experts.iter());
        if let Some(g) = &self.gate {
            out.extend([&g.w, &g.b]);
        }
        out.extend([&self.out_w, &self.out_b]);
        out
    }

    /// Mutable blocks in the same order as [`Params::visit`].
    pub fn blocks_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.seg_w, &mut self.seg_b, &mut self.theta];
        for b in &mut self.blocks {
            out.extend([
                &mut b.norm1,
                &mut b.wq,
                &mut b.wk,
                &mut b.wv,
                &mut b.wo,
                &mut b.norm2,
                &mut b.w1,
                &mut b.b1,
                &mut b.w2,
                &mut b.b2,
            ]);
        }
        out.extend(self.experts.iter_mut());
        if let Some(g) = &mut self.gate {
            out.extend([&mut g.w, &mut g.b]);
        }
        out.extend([&mut self.out_w, &mut self.out_b]);
        out
    }

    /// Elementwise `self += other`; both must share a configuration.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.add_assign(b);
        }
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n.to_string()));
        names
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, m| n += m.len());
        n
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|_, m| ok &= m.data.iter().all(|x| x.is_finite()));
        ok
    }

    /// Checks that every block has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let template = Params::init(cfg, 0)?;
        let mut expected = Vec::new();
        template.visit(|n, m| expected.push((n.to_string(), m.shape())));
        let mut actual = Vec::new();
        self.visit(|n, m| actual.push((n.to_string(), m.shape())));
        if expected != actual {
            return Err(Error::Shape(format!(
                "parameter blocks {actual:?} do not match config {expected:?}"
            )));
        }
        Ok(())
    }
}

/// A model is its configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Params::init(&config, seed)?;
        Ok(Self { config, params })
    }

    /// `α` as used in the forward pass.
    pub fn alpha(&self) -> f64 {
        match self.config.fusion {
            FusionMode::Adaptive => crate::tensor::sigmoid(self.params.theta()),
            FusionMode::SeriesOnly => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// JSON checkpoint. Floats are written as shortest round-trip decimals, so a
/// save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    pub blocks: Vec<CheckpointBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

pub const CHECKPOINT_FORMAT: &str = "segmoe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, metadata: Option<serde_json::Value>) -> Self {
        let mut blocks = Vec::new();
        model.params.visit(|name, m| {
            blocks.push(CheckpointBlock {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
                values: m.data.clone(),
            })
        });
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            seed,
            blocks,
            metadata,
        }
    }

    pub fn has_block(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut params = Params::init(&self.config, 0)?;
        let mut blocks = self.blocks.iter();
        let mut err = None;
        params.visit_mut(|name, m| {
            if err.is_some() {
                return;
            }
            match blocks.next() {
                Some(b)
                    if b.name == name
                        && (b.rows, b.cols) == m.shape()
                        && b.values.len() == m.len() =>
                {
                    m.data.copy_from_slice(&b.values)
                }
                Some(b) => {
                    err = Some(Error::Checkpoint(format!(
                        "block {} ({}x{}) where {} {:?} expected",
                        b.name,
                        b.rows,
                        b.cols,
                        name,
                        m.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing block {name}"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = blocks.next() {
            return Err(Error::Checkpoint(format!("unexpected block {}", extra.name)));
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Model {
            config: self.config.clone(),
            params,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            segment_len: 4,
            hidden_dim: 8,
            experts: 2,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = Params::init(&tiny(), 9).unwrap();
        let b = Params::init(&tiny(), 9).unwrap();
        let c = Params::init(&tiny(), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.theta(), 0.0);
        assert!(a.seg_w.data.iter().all(|x| x.abs() <= 0.5));
        assert!(a.seg_b.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_expert_has_no_gate() {
        let cfg = ModelConfig {
            experts: 1,
            ..tiny()
        };
        let p = Params::init(&cfg, 1).unwrap();
        assert!(p.gate.is_none());
        assert!(!p.block_names().iter().any(|n| n.starts_with("gate")));
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = ModelConfig {
            heads: 3,
            ..tiny()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_rejects_wrong_shape() {
        let model = Model::new(tiny(), 3).unwrap();
        let mut ck = Checkpoint::from_model(&model, 3, None);
        ck.blocks[0].rows += 1;
        assert!(matches!(ck.to_model(), Err(Error::Checkpoint(_))));
        let mut ck = Checkpoint::from_model(&model, 3, None);
        ck.blocks.pop();
        assert!(ck.to_model().is_err());
    }
}
