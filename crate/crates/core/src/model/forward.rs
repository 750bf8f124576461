use crate::error::{Error, Result};
use crate::tensor::{gelu, sigmoid, softmax_in_place, Mat};

use super::{BlockParams, FusionMode, Model, Params};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// One sequence of `N` segments with their prompt embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqInput {
    /// N×S normalized segment values.
    pub segments: Mat,
    /// N×D prompt embeddings.
    pub text: Mat,
}

/// Row-stochastic expert weights and the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub logits: Mat,
    pub g: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub input: Mat,
    pub rms1: Vec<f64>,
    pub normed1: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per head, N×N causal attention weights.
    pub attn: Vec<Mat>,
    pub context: Mat,
    pub mid: Mat,
    pub rms2: Vec<f64>,
    pub normed2: Mat,
    pub hidden_pre: Mat,
    pub hidden: Mat,
}

/// Everything the backward pass needs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub segments: Mat,
    pub seg_pre: Mat,
    pub se: Mat,
    pub te: Mat,
    pub alpha: f64,
    pub e: Mat,
    pub blocks: Vec<BlockTrace>,
    pub e_hat: Mat,
    pub gate: GateMatrix,
    pub expert_out: Vec<Mat>,
    pub s_hat: Mat,
    pub pred: Mat,
}

/// `GeLU(x·seg_W + seg_b)`; returns the pre-activation too.
pub fn segment_embed(segments: &Mat, params: &Params) -> Result<(Mat, Mat)> {
    if segments.cols != params.seg_w.rows {
        return Err(Error::Shape(format!(
            "segment length {} but embedding expects {}",
            segments.cols, params.seg_w.rows
        )));
    }
    let mut pre = segments.matmul(&params.seg_w);
    pre.add_row(&params.seg_b);
    let mut se = pre.clone();
    se.data.iter_mut().for_each(|x| *x = gelu(*x));
    Ok((pre, se))
}

/// `E = α·SE + (1−α)·TE`.
pub fn fuse(se: &Mat, te: &Mat, alpha: f64) -> Mat {
    assert_eq!(se.shape(), te.shape(), "fuse shape");
    let data = se
        .data
        .iter()
        .zip(&te.data)
        .map(|(s, t)| alpha * s + (1.0 - alpha) * t)
        .collect();
    Mat::from_vec(se.rows, se.cols, data)
}

/// `∂E/∂θ = σ(θ)(1−σ(θ))(SE − TE)`.
pub fn fuse_grad_theta(se: &[f64], te: &[f64], theta: f64) -> Vec<f64> {
    let a = sigmoid(theta);
    se.iter().zip(te).map(|(s, t)| a * (1.0 - a) * (s - t)).collect()
}

fn rms_norm(x: &Mat, scale: &Mat) -> (Mat, Vec<f64>) {
    let d = x.cols as f64;
    let mut out = x.clone();
    let mut rms = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let rr = (ms + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(&scale.data) {
            *v = *v / rr * g;
        }
        rms.push(rr);
    }
    (out, rms)
}

fn block_forward(x: &Mat, p: &BlockParams, heads: usize) -> BlockTrace {
    let n = x.rows;
    let d = x.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (normed1, rms1) = rms_norm(x, &p.norm1);
    let q = normed1.matmul(&p.wq);
    let k = normed1.matmul(&p.wk);
    let v = normed1.matmul(&p.wv);
    let mut context = Mat::zeros(n, d);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut a = Mat::zeros(n, n);
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let row = &mut a.row_mut(i)[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = crate::tensor::dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            softmax_in_place(row);
            for j in 0..=i {
                let w = a.at(i, j);
                let vj = &v.row(j)[cols.clone()];
                for (c, vv) in context.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                    *c += w * vv;
                }
            }
        }
        attn.push(a);
    }
    let mut mid = context.matmul(&p.wo);
    mid.add_assign(x);
    let (normed2, rms2) = rms_norm(&mid, &p.norm2);
    let mut hidden_pre = normed2.matmul(&p.w1);
    hidden_pre.add_row(&p.b1);
    let mut hidden = hidden_pre.clone();
    hidden.data.iter_mut().for_each(|v| *v = gelu(*v));
    BlockTrace {
        input: x.clone(),
        rms1,
        normed1,
        q,
        k,
        v,
        attn,
        context,
        mid,
        rms2,
        normed2,
        hidden_pre,
        hidden,
    }
}

fn block_output(t: &BlockTrace, p: &BlockParams) -> Mat {
    let mut out = t.hidden.matmul(&p.w2);
    out.add_row(&p.b2);
    out.add_assign(&t.mid);
    out
}

/// Runs the pre-norm causal blocks. With no blocks the output is the input.
pub fn backbone_forward(e: &Mat, params: &Params, heads: usize) -> (Vec<BlockTrace>, Mat) {
    let mut h = e.clone();
    let mut traces = Vec::with_capacity(params.blocks.len());
    for p in &params.blocks {
        let t = block_forward(&h, p, heads);
        h = block_output(&t, p);
        traces.push(t);
    }
    (traces, h)
}

/// Gate, expert projections and their gated sum. Without gate parameters
/// (a single expert) every row weight is exactly one.
pub fn moe_forward(e_hat: &Mat, params: &Params) -> (Mat, GateMatrix, Vec<Mat>) {
    let kx = params.experts.len();
    let (logits, g) = match &params.gate {
        Some(gate) => {
            let mut logits = e_hat.matmul(&gate.w);
            logits.add_row(&gate.b);
            let mut g = logits.clone();
            for r in 0..g.rows {
                softmax_in_place(g.row_mut(r));
            }
            (logits, g)
        }
        None => {
            let mut g = Mat::zeros(e_hat.rows, kx);
            g.fill(1.0 / kx as f64);
            (Mat::zeros(e_hat.rows, kx), g)
        }
    };
    let expert_out: Vec<Mat> = params.experts.iter().map(|w| e_hat.matmul(w)).collect();
    let mut s_hat = Mat::zeros(e_hat.rows, e_hat.cols);
    for (k, h) in expert_out.iter().enumerate() {
        for r in 0..s_hat.rows {
            let w = g.at(r, k);
            for (o, x) in s_hat.row_mut(r).iter_mut().zip(h.row(r)) {
                *o += w * x;
            }
        }
    }
    (s_hat, GateMatrix { logits, g }, expert_out)
}

/// `Ŝ·out_W + out_b`, one predicted segment per row.
pub fn predict_segment(s_hat: &Mat, params: &Params) -> Mat {
    let mut pred = s_hat.matmul(&params.out_w);
    pred.add_row(&params.out_b);
    pred
}

pub fn forward(model: &Model, input: &SeqInput) -> Result<ForwardTrace> {
    let cfg = &model.config;
    let params = &model.params;
    let n = input.segments.rows;
    if n == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    if input.text.shape() != (n, cfg.hidden_dim) {
        return Err(Error::Shape(format!(
            "text embeddings {:?}, expected ({n}, {})",
            input.text.shape(),
            cfg.hidden_dim
        )));
    }
    let (seg_pre, se) = segment_embed(&input.segments, params)?;
    let te = if cfg.text_context {
        input.text.clone()
    } else {
        Mat::zeros(n, cfg.hidden_dim)
    };
    let alpha = match cfg.fusion {
        FusionMode::Adaptive => sigmoid(params.theta()),
        FusionMode::SeriesOnly => 1.0,
    };
    let e = fuse(&se, &te, alpha);
    let head = forward_from_fused(model, &e);
    Ok(ForwardTrace {
        segments: input.segments.clone(),
        seg_pre,
        se,
        te,
        alpha,
        e,
        blocks: head.blocks,
        e_hat: head.e_hat,
        gate: head.gate,
        expert_out: head.expert_out,
        s_hat: head.s_hat,
        pred: head.pred,
    })
}

/// The part of the forward pass downstream of fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub blocks: Vec<BlockTrace>,
    pub e_hat: Mat,
    pub gate: GateMatrix,
    pub expert_out: Vec<Mat>,
    pub s_hat: Mat,
    pub pred: Mat,
}

/// Backbone, experts and output projection applied to fused embeddings.
pub fn forward_from_fused(model: &Model, e: &Mat) -> HeadOutput {
    let params = &model.params;
    let (blocks, e_hat) = backbone_forward(e, params, model.config.heads);
    let (s_hat, gate, expert_out) = moe_forward(&e_hat, params);
    let pred = predict_segment(&s_hat, params);
    HeadOutput {
        blocks,
        e_hat,
        gate,
        expert_out,
        s_hat,
        pred,
    }
}

pub fn forward_batch(model: &Model, inputs: &[SeqInput]) -> Result<Vec<ForwardTrace>> {
    inputs.iter().map(|x| forward(model, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn zero_embedding_weights() {
        let cfg = ModelConfig {
            segment_len: 3,
            hidden_dim: 4,
            experts: 1,
            layers: 0,
            ..ModelConfig::default()
        };
        let mut p = Params::init(&cfg, 0).unwrap();
        p.seg_w.fill(0.0);
        let x = Mat::from_vec(1, 3, vec![1.0, -2.0, 5.0]);
        let (_, se) = segment_embed(&x, &p).unwrap();
        assert!(se.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_embedding_at_three() {
        let cfg = ModelConfig {
            segment_len: 4,
            hidden_dim: 4,
            experts: 1,
            layers: 0,
            ..ModelConfig::default()
        };
        let mut p = Params::init(&cfg, 0).unwrap();
        p.seg_w = Mat::identity(4);
        let (_, se) = segment_embed(&Mat::from_vec(1, 4, vec![3.0; 4]), &p).unwrap();
        for v in se.data {
            assert!((v - 2.995_950_3).abs() < 1e-6);
        }
    }

    #[test]
    fn embedding_shape_mismatch() {
        let cfg = ModelConfig {
            segment_len: 4,
            hidden_dim: 4,
            experts: 1,
            layers: 0,
            ..ModelConfig::default()
        };
        let p = Params::init(&cfg, 0).unwrap();
        assert!(matches!(
            segment_embed(&Mat::zeros(1, 3), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn pre_activation_is_linear() {
        let cfg = ModelConfig {
            segment_len: 3,
            hidden_dim: 5,
            experts: 1,
            layers: 0,
            ..ModelConfig::default()
        };
        let p = Params::init(&cfg, 4).unwrap();
        let x = Mat::from_vec(1, 3, vec![0.3, -1.1, 0.8]);
        let x2 = Mat::from_vec(1, 3, vec![0.6, -2.2, 1.6]);
        let (a, _) = segment_embed(&x, &p).unwrap();
        let (b, _) = segment_embed(&x2, &p).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((2.0 * u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_midpoint_and_equal_inputs() {
        let se = Mat::from_vec(1, 3, vec![1.0, 2.0, -4.0]);
        let te = Mat::from_vec(1, 3, vec![3.0, 0.0, 4.0]);
        assert_eq!(fuse(&se, &te, sigmoid(0.0)).data, vec![2.0, 1.0, 0.0]);
        for theta in [-7.0, 0.3, 12.0] {
            assert_eq!(fuse(&se, &se, sigmoid(theta)).data, se.data);
        }
    }

    #[test]
    fn fuse_grad_at_zero() {
        let g = fuse_grad_theta(&[2.0, -1.0], &[1.0, 1.0], 0.0);
        assert_eq!(g, vec![0.25, -0.5]);
        assert_eq!(fuse_grad_theta(&[0.4, 0.1], &[0.4, 0.1], 3.0), vec![0.0, 0.0]);
    }

    #[test]
    fn hand_set_moe() {
        let cfg = ModelConfig {
            segment_len: 2,
            hidden_dim: 2,
            experts: 2,
            layers: 0,
            ..ModelConfig::default()
        };
        let mut p = Params::init(&cfg, 0).unwrap();
        p.experts[0] = Mat::identity(2);
        p.experts[1] = Mat::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let gate = p.gate.as_mut().unwrap();
        gate.w.fill(0.0);
        gate.b.fill(0.0);
        let (s_hat, g, _) = moe_forward(&Mat::from_vec(1, 2, vec![1.0, 0.0]), &p);
        assert_eq!(g.g.data, vec![0.5, 0.5]);
        assert_eq!(s_hat.data, vec![1.5, 0.0]);
    }

    #[test]
    fn output_projection_cases() {
        let cfg = ModelConfig {
            segment_len: 3,
            hidden_dim: 3,
            experts: 1,
            layers: 0,
            ..ModelConfig::default()
        };
        let mut p = Params::init(&cfg, 0).unwrap();
        let s_hat = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.0, 3.0, 1.0]);
        p.out_w.fill(0.0);
        p.out_b.fill(0.7);
        assert!(predict_segment(&s_hat, &p).data.iter().all(|&v| v == 0.7));
        p.out_w = Mat::identity(3);
        p.out_b.fill(0.0);
        assert_eq!(predict_segment(&s_hat, &p).data, s_hat.data);
    }

    #[test]
    fn single_position_is_finite() {
        let cfg = ModelConfig {
            segment_len: 4,
            hidden_dim: 8,
            experts: 2,
            layers: 2,
            heads: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 2).unwrap();
        let input = SeqInput {
            segments: Mat::from_vec(1, 4, vec![0.1, 0.2, -0.3, 0.4]),
            text: Mat::from_vec(1, 8, vec![0.05; 8]),
        };
        let t = forward(&model, &input).unwrap();
        assert!(t.pred.data.iter().all(|v| v.is_finite()));
        // one position attends only to itself
        assert!(t.blocks.iter().all(|b| b.attn.iter().all(|a| a.data == vec![1.0])));
    }
}
