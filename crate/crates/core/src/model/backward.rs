//! Reverse-mode gradients for [`super::forward`].

use crate::error::{Error, Result};
use crate::tensor::{dot, gelu_grad, Mat};

use super::forward::{fuse_grad_theta, BlockTrace, ForwardTrace};
use super::{BlockParams, FusionMode, Model, Params};

fn rms_norm_backward(
    x: &Mat,
    rms: &[f64],
    scale: &Mat,
    dy: &Mat,
    dx: &mut Mat,
    dscale: &mut Mat,
) {
    let d = x.cols as f64;
    for r in 0..x.rows {
        let rr = rms[r];
        let xr = x.row(r);
        let dyr = dy.row(r);
        let mut proj = 0.0;
        for j in 0..x.cols {
            dscale.data[j] += dyr[j] * xr[j] / rr;
            proj += scale.data[j] * dyr[j] * xr[j];
        }
        let coeff = proj / (d * rr * rr * rr);
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o += scale.data[j] * dyr[j] / rr - xr[j] * coeff;
        }
    }
}

fn block_backward(
    t: &BlockTrace,
    p: &BlockParams,
    g: &mut BlockParams,
    heads: usize,
    dout: &Mat,
) -> Mat {
    let n = dout.rows;
    let d = dout.cols;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // feed-forward residual branch
    let mut dmid = dout.clone();
    t.hidden.t_matmul_into(dout, &mut g.w2);
    dout.col_sum_into(&mut g.b2);
    let mut dhidden = dout.matmul_t(&p.w2);
    for (dv, pre) in dhidden.data.iter_mut().zip(&t.hidden_pre.data) {
        *dv *= gelu_grad(*pre);
    }
    t.normed2.t_matmul_into(&dhidden, &mut g.w1);
    dhidden.col_sum_into(&mut g.b1);
    let dnormed2 = dhidden.matmul_t(&p.w1);
    rms_norm_backward(&t.mid, &t.rms2, &p.norm2, &dnormed2, &mut dmid, &mut g.norm2);

    // attention residual branch
    let mut dinput = dmid.clone();
    t.context.t_matmul_into(&dmid, &mut g.wo);
    let dcontext = dmid.matmul_t(&p.wo);
    let mut dq = Mat::zeros(n, d);
    let mut dk = Mat::zeros(n, d);
    let mut dv = Mat::zeros(n, d);
    let mut da = vec![0.0; n];
    for (h, a) in t.attn.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let dci = &dcontext.row(i)[cols.clone()];
            for (j, slot) in da.iter_mut().enumerate().take(i + 1) {
                *slot = dot(dci, &t.v.row(j)[cols.clone()]);
                let w = a.at(i, j);
                for (o, c) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                    *o += w * c;
                }
            }
            let mean: f64 = (0..=i).map(|j| a.at(i, j) * da[j]).sum();
            for j in 0..=i {
                let ds = a.at(i, j) * (da[j] - mean) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &t.k.row(j)[cols.clone()];
                for (o, kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                let qi = &t.q.row(i)[cols.clone()];
                for (o, qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    t.normed1.t_matmul_into(&dq, &mut g.wq);
    t.normed1.t_matmul_into(&dk, &mut g.wk);
    t.normed1.t_matmul_into(&dv, &mut g.wv);
    let mut dnormed1 = dq.matmul_t(&p.wq);
    dnormed1.add_assign(&dk.matmul_t(&p.wk));
    dnormed1.add_assign(&dv.matmul_t(&p.wv));
    rms_norm_backward(&t.input, &t.rms1, &p.norm1, &dnormed1, &mut dinput, &mut g.norm1);
    dinput
}

fn check_trace(model: &Model, trace: &ForwardTrace, dpred: &Mat, dgate: &Mat) -> Result<()> {
    let p = &model.params;
    let n = trace.pred.rows;
    let mismatch = |m: String| Err(Error::Trace(m));
    if dpred.shape() != trace.pred.shape() {
        return mismatch(format!(
            "loss gradient {:?} vs predictions {:?}",
            dpred.shape(),
            trace.pred.shape()
        ));
    }
    if dgate.shape() != (n, p.experts.len()) {
        return mismatch(format!(
            "gate gradient {:?}, expected ({n}, {})",
            dgate.shape(),
            p.experts.len()
        ));
    }
    if trace.blocks.len() != p.blocks.len()
        || trace.expert_out.len() != p.experts.len()
        || trace.e_hat.cols != p.seg_w.cols
        || trace.segments.cols != p.seg_w.rows
        || trace.pred.cols != p.out_w.cols
    {
        return mismatch("trace was produced by a differently shaped model".into());
    }
    Ok(())
}

/// Accumulates parameter gradients for one sequence into `grads`.
///
/// `dpred` is ∂loss/∂predictions (N×S) and `dgate` is any direct
/// ∂loss/∂G (N×K) from a gate penalty.
pub fn backward(
    model: &Model,
    trace: &ForwardTrace,
    dpred: &Mat,
    dgate: &Mat,
    grads: &mut Params,
) -> Result<()> {
    check_trace(model, trace, dpred, dgate)?;
    let p = &model.params;
    let n = dpred.rows;

    // output projection
    trace.s_hat.t_matmul_into(dpred, &mut grads.out_w);
    dpred.col_sum_into(&mut grads.out_b);
    let ds_hat = dpred.matmul_t(&p.out_w);

    // experts and gate
    let kx = p.experts.len();
    let mut de_hat = Mat::zeros(n, trace.e_hat.cols);
    let mut dg = dgate.clone();
    for k in 0..kx {
        let mut dh = ds_hat.clone();
        for r in 0..n {
            let w = trace.gate.g.at(r, k);
            *dg.at_mut(r, k) += dot(ds_hat.row(r), trace.expert_out[k].row(r));
            dh.row_mut(r).iter_mut().for_each(|x| *x *= w);
        }
        trace.e_hat.t_matmul_into(&dh, &mut grads.experts[k]);
        de_hat.add_assign(&dh.matmul_t(&p.experts[k]));
    }
    if let (Some(gate), Some(ggrad)) = (&p.gate, grads.gate.as_mut()) {
        let gm = &trace.gate.g;
        let mut dlogits = Mat::zeros(n, kx);
        for r in 0..n {
            let mean = dot(gm.row(r), dg.row(r));
            for k in 0..kx {
                *dlogits.at_mut(r, k) = gm.at(r, k) * (dg.at(r, k) - mean);
            }
        }
        trace.e_hat.t_matmul_into(&dlogits, &mut ggrad.w);
        dlogits.col_sum_into(&mut ggrad.b);
        de_hat.add_assign(&dlogits.matmul_t(&gate.w));
    }

    // backbone, last block first
    let mut de = de_hat;
    for ((t, bp), bg) in trace
        .blocks
        .iter()
        .zip(&p.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        de = block_backward(t, bp, bg, model.config.heads, &de);
    }

    // fusion gate
    if model.config.fusion == FusionMode::Adaptive {
        let theta = p.theta();
        let mut dtheta = 0.0;
        for r in 0..n {
            let de_dtheta = fuse_grad_theta(trace.se.row(r), trace.te.row(r), theta);
            dtheta += dot(&de_dtheta, de.row(r));
        }
        grads.theta.data[0] += dtheta;
    }

    // segment embedding
    let mut dpre = de;
    for (x, pre) in dpre.data.iter_mut().zip(&trace.seg_pre.data) {
        *x *= trace.alpha * gelu_grad(*pre);
    }
    trace.segments.t_matmul_into(&dpre, &mut grads.seg_w);
    dpre.col_sum_into(&mut grads.seg_b);
    Ok(())
}

/// Sums per-sequence gradients in input order.
pub fn backward_batch(
    model: &Model,
    traces: &[ForwardTrace],
    dpreds: &[Mat],
    dgates: &[Mat],
) -> Result<Params> {
    if traces.len() != dpreds.len() || traces.len() != dgates.len() {
        return Err(Error::Trace(format!(
            "{} traces, {} prediction gradients, {} gate gradients",
            traces.len(),
            dpreds.len(),
            dgates.len()
        )));
    }
    let mut grads = model.params.zeros_like();
    for ((t, dp), dg) in traces.iter().zip(dpreds).zip(dgates) {
        backward(model, t, dp, dg, &mut grads)?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig, SeqInput};

    fn setup() -> (Model, SeqInput) {
        let cfg = ModelConfig {
            segment_len: 4,
            hidden_dim: 8,
            experts: 2,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, 11).unwrap();
        let seg: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let te: Vec<f64> = (0..24).map(|i| (i as f64 * 0.11).cos() * 0.2).collect();
        let input = SeqInput {
            segments: Mat::from_vec(3, 4, seg),
            text: Mat::from_vec(3, 8, te),
        };
        (model, input)
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (model, input) = setup();
        let t = forward(&model, &input).unwrap();
        let mut g = model.params.zeros_like();
        backward(&model, &t, &Mat::zeros(3, 4), &Mat::zeros(3, 2), &mut g).unwrap();
        g.visit(|name, m| assert!(m.data.iter().all(|&x| x == 0.0), "{name}"));
    }

    #[test]
    fn equal_modalities_zero_theta_gradient() {
        let (model, mut input) = setup();
        let t0 = forward(&model, &input).unwrap();
        input.text = t0.se.clone();
        let t = forward(&model, &input).unwrap();
        let mut g = model.params.zeros_like();
        let dpred = Mat::from_vec(3, 4, (0..12).map(|i| i as f64 - 5.0).collect());
        backward(&model, &t, &dpred, &Mat::zeros(3, 2), &mut g).unwrap();
        assert_eq!(g.theta(), 0.0);
    }

    #[test]
    fn mismatched_trace_rejected() {
        let (model, input) = setup();
        let t = forward(&model, &input).unwrap();
        let mut g = model.params.zeros_like();
        let err = backward(&model, &t, &Mat::zeros(2, 4), &Mat::zeros(3, 2), &mut g);
        assert!(matches!(err, Err(Error::Trace(_))));
        let other = Model::new(
            ModelConfig {
                layers: 2,
                ..model.config.clone()
            },
            1,
        )
        .unwrap();
        let err = backward(&other, &t, &Mat::zeros(3, 4), &Mat::zeros(3, 2), &mut g);
        assert!(matches!(err, Err(Error::Trace(_))));
    }
}
