//! AdamW with decoupled weight decay. The fusion gate θ is never decayed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Params,
    pub v: Params,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &Params) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

const NO_DECAY: &str = "theta";

fn check_finite(grads: &Params) -> Result<()> {
    let mut bad = None;
    grads.visit(|name, m| {
        if bad.is_none() {
            if let Some(i) = m.data.iter().position(|x| !x.is_finite()) {
                bad = Some(Error::NonFiniteGradient {
                    block: name.to_string(),
                    index: i,
                    value: m.data[i],
                });
            }
        }
    });
    bad.map_or(Ok(()), Err)
}

pub fn adamw_step(
    params: &mut Params,
    grads: &Params,
    state: &mut OptState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    check_finite(grads)?;
    let names = params.block_names();
    let grads = grads.blocks();
    let mut ps = params.blocks_mut();
    let mut ms = state.m.blocks_mut();
    let mut vs = state.v.blocks_mut();
    let sizes_match = ps.len() == grads.len()
        && ps.len() == ms.len()
        && ps.len() == vs.len()
        && ps
            .iter()
            .zip(&grads)
            .zip(ms.iter().zip(vs.iter()))
            .all(|((p, g), (m, v))| p.len() == g.len() && p.len() == m.len() && p.len() == v.len());
    if !sizes_match {
        return Err(Error::Shape(
            "gradients or optimizer state do not match parameters".into(),
        ));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (b, name) in names.iter().enumerate() {
        let decay = if name == NO_DECAY { 0.0 } else { lr * cfg.weight_decay };
        let (p, g) = (&mut ps[b].data, &grads[b].data);
        let (m, v) = (&mut ms[b].data, &mut vs[b].data);
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn params() -> Params {
        Params::init(
            &ModelConfig {
                segment_len: 2,
                hidden_dim: 2,
                experts: 2,
                layers: 0,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = params();
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = OptState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, 1e-2, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // fresh state: m̂ = g, v̂ = g², so the step is lr·g/(|g| + ε)
        let mut p = params();
        let mut g = p.zeros_like();
        g.out_b.data[0] = -0.3;
        let start = p.out_b.data[0];
        let mut st = OptState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, 1e-3, &cfg).unwrap();
        let moved = p.out_b.data[0] - start;
        assert!(moved > 0.0);
        assert!((moved - 1e-3 * 0.3 / (0.3 + 1e-8)).abs() < 1e-15);
        // every other entry had zero gradient and stays put
        assert_eq!(p.out_b.data[1], 0.0);
    }

    #[test]
    fn theta_is_not_decayed() {
        let mut p = params();
        p.theta.data[0] = 2.0;
        p.out_b.data[0] = 2.0;
        let g = p.zeros_like();
        let mut st = OptState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert_eq!(p.theta(), 2.0);
        assert!((p.out_b.data[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = params();
        let before = p.clone();
        let mut g = p.zeros_like();
        g.seg_w.data[1] = f64::NAN;
        let mut st = OptState::new(&p);
        let err = adamw_step(&mut p, &g, &mut st, 1e-3, &AdamWConfig::default()).unwrap_err();
        match err {
            Error::NonFiniteGradient { block, index, .. } => {
                assert_eq!(block, "seg_W");
                assert_eq!(index, 1);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }
}
