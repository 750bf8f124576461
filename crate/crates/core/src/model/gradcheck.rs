//! Finite-difference verification of the hand-written gradients.
//!
//! The oracle only ever calls the forward pass and the loss, so it is
//! independent of [`super::backward`].

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::tensor::Mat;
use crate::train::loss::{compute_loss, loss_grad, SparsityMode};

use super::{backward_batch, forward, forward_from_fused, fuse, fuse_grad_theta, Model, ModelConfig, SeqInput};

/// The configuration used for gradient checks: S=4, D=8, K=2, L=1, H=1.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        segment_len: 4,
        hidden_dim: 8,
        experts: 2,
        layers: 1,
        heads: 1,
        ffn_mult: 4,
        ..ModelConfig::default()
    }
}

/// A model with every parameter block randomized, plus a batch of inputs and
/// targets. Biases, norm scales and θ are moved off their init values so no
/// block is checked at a degenerate point.
pub struct Problem {
    pub model: Model,
    pub inputs: Vec<SeqInput>,
    pub targets: Vec<Mat>,
    pub lambda: f64,
    pub mode: SparsityMode,
}

impl Problem {
    pub fn random(
        config: ModelConfig,
        seq_len: usize,
        batch: usize,
        seed: u64,
        lambda: f64,
        mode: SparsityMode,
    ) -> Result<Self> {
        let mut model = Model::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let jitter = Uniform::new(-0.2, 0.2);
        model.params.visit_mut(|name, m| {
            let bias_like = name.ends_with("_b")
                || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.contains("norm")
                || name == "theta";
            if bias_like {
                m.data.iter_mut().for_each(|x| *x += jitter.sample(&mut rng));
            }
        });
        model.params.theta.data[0] = 0.35;
        let unit = Uniform::new(-1.0, 1.0);
        let (s, d) = (model.config.segment_len, model.config.hidden_dim);
        let mut mat = |r: usize, c: usize, scale: f64| {
            Mat::from_vec(r, c, (0..r * c).map(|_| scale * unit.sample(&mut rng)).collect())
        };
        let inputs: Vec<SeqInput> = (0..batch)
            .map(|_| SeqInput {
                segments: mat(seq_len, s, 1.0),
                text: mat(seq_len, d, 0.5),
            })
            .collect();
        let targets = (0..batch).map(|_| mat(seq_len, s, 1.0)).collect();
        Ok(Self {
            model,
            inputs,
            targets,
            lambda,
            mode,
        })
    }

    fn stacked(&self, preds: &[Mat], gates: &[Mat]) -> (Mat, Mat, Mat) {
        (Mat::vstack(&self.targets), Mat::vstack(preds), Mat::vstack(gates))
    }

    /// Loss of `model` on the problem's batch.
    pub fn loss(&self, model: &Model) -> Result<f64> {
        let traces: Vec<_> = self
            .inputs
            .iter()
            .map(|x| forward(model, x))
            .collect::<Result<_>>()?;
        let preds: Vec<Mat> = traces.iter().map(|t| t.pred.clone()).collect();
        let gates: Vec<Mat> = traces.iter().map(|t| t.gate.g.clone()).collect();
        let (t, p, g) = self.stacked(&preds, &gates);
        Ok(compute_loss(&t, &p, &g, self.lambda, self.mode)?.total)
    }

    /// Analytic gradients via the backward pass.
    pub fn analytic(&self) -> Result<super::Params> {
        let traces: Vec<_> = self
            .inputs
            .iter()
            .map(|x| forward(&self.model, x))
            .collect::<Result<_>>()?;
        let preds: Vec<Mat> = traces.iter().map(|t| t.pred.clone()).collect();
        let gates: Vec<Mat> = traces.iter().map(|t| t.gate.g.clone()).collect();
        let (t, p, g) = self.stacked(&preds, &gates);
        let (dp, dg) = loss_grad(&t, &p, &g, self.lambda, self.mode)?;
        let rows: Vec<usize> = traces.iter().map(|t| t.pred.rows).collect();
        backward_batch(&self.model, &traces, &dp.split_rows(&rows), &dg.split_rows(&rows))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub size: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub blocks: Vec<BlockCheck>,
    /// |backward θ-gradient − Σ⟨∂L/∂E, σ(θ)(1−σ(θ))(SE−TE)⟩| with ∂L/∂E
    /// from a fourth-order difference through the post-fusion network.
    pub theta_closed_form_error: f64,
    /// Largest deviation of the closed-form ∂E/∂θ from a fourth-order
    /// difference of the fusion map itself.
    pub fuse_closed_form_error: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }

    pub fn passes(&self, rel_tol: f64, closed_form_tol: f64) -> bool {
        self.max_rel_error() <= rel_tol
            && self.theta_closed_form_error <= closed_form_tol
            && self.fuse_closed_form_error <= closed_form_tol
    }
}

/// Relative error with a small absolute floor so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

pub fn check(problem: &Problem, step: f64) -> Result<GradCheckReport> {
    let analytic = problem.analytic()?;
    let mut analytic_blocks = Vec::new();
    analytic.visit(|name, m| analytic_blocks.push((name.to_string(), m.clone())));

    let mut blocks = Vec::new();
    for (b, (name, grad)) in analytic_blocks.iter().enumerate() {
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for i in 0..grad.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut m = problem.model.clone();
                let mut idx = 0;
                m.params.visit_mut(|_, blk| {
                    if idx == b {
                        blk.data[i] += delta;
                    }
                    idx += 1;
                });
                problem.loss(&m)
            };
            let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
            max_abs = max_abs.max((grad.data[i] - numeric).abs());
            max_rel = max_rel.max(relative_error(grad.data[i], numeric));
        }
        blocks.push(BlockCheck {
            name: name.clone(),
            size: grad.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }

    let theta = problem.model.params.theta();
    let theta_closed_form_error = if problem.model.config.fusion == super::FusionMode::Adaptive {
        let traces: Vec<_> = problem
            .inputs
            .iter()
            .map(|x| forward(&problem.model, x))
            .collect::<Result<_>>()?;
        // ∂L/∂E by differences through everything downstream of fusion.
        let loss_from_fused = |fused: &[Mat]| -> Result<f64> {
            let heads: Vec<_> = fused
                .iter()
                .map(|e| forward_from_fused(&problem.model, e))
                .collect();
            let preds: Vec<Mat> = heads.iter().map(|h| h.pred.clone()).collect();
            let gates: Vec<Mat> = heads.iter().map(|h| h.gate.g.clone()).collect();
            let (t, p, g) = problem.stacked(&preds, &gates);
            Ok(compute_loss(&t, &p, &g, problem.lambda, problem.mode)?.total)
        };
        let base: Vec<Mat> = traces.iter().map(|t| t.e.clone()).collect();
        let mut closed = 0.0;
        for (s, tr) in traces.iter().enumerate() {
            for r in 0..tr.e.rows {
                let de_dtheta = fuse_grad_theta(tr.se.row(r), tr.te.row(r), theta);
                for (c, &w) in de_dtheta.iter().enumerate() {
                    // a failed evaluation yields NaN, which fails the check
                    let dl_de = five_point(
                        |delta| {
                            let mut fused = base.clone();
                            *fused[s].at_mut(r, c) += delta;
                            loss_from_fused(&fused).unwrap_or(f64::NAN)
                        },
                        1e-3,
                    );
                    closed += dl_de * w;
                }
            }
        }
        (analytic.theta() - closed).abs()
    } else {
        0.0
    };

    let mut fuse_closed_form_error: f64 = 0.0;
    for tr in problem
        .inputs
        .iter()
        .map(|x| forward(&problem.model, x))
        .collect::<Result<Vec<_>>>()?
    {
        let closed: Vec<f64> = (0..tr.se.rows)
            .flat_map(|r| fuse_grad_theta(tr.se.row(r), tr.te.row(r), theta))
            .collect();
        for (i, c) in closed.iter().enumerate() {
            let numeric = five_point(
                |delta| fuse(&tr.se, &tr.te, crate::tensor::sigmoid(theta + delta)).data[i],
                1e-3,
            );
            fuse_closed_form_error = fuse_closed_form_error.max((numeric - c).abs());
        }
    }

    Ok(GradCheckReport {
        step,
        blocks,
        theta_closed_form_error,
        fuse_closed_form_error,
    })
}

/// The standard check: tiny config, N=3 positions, B=3 sequences, entropy
/// penalty so the gate receives a gradient from both loss terms.
pub fn run_standard(seed: u64) -> Result<GradCheckReport> {
    let problem = Problem::random(tiny_config(), 3, 3, seed, 0.1, SparsityMode::Entropy)?;
    check(&problem, 1e-5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_check_passes() {
        let report = run_standard(7).unwrap();
        for b in &report.blocks {
            assert!(b.max_rel_error <= 1e-4, "{} {}", b.name, b.max_rel_error);
        }
        assert!(report.theta_closed_form_error <= 1e-10, "{}", report.theta_closed_form_error);
        assert!(report.fuse_closed_form_error <= 1e-10, "{}", report.fuse_closed_form_error);
    }

    #[test]
    fn literal_mode_and_single_expert() {
        let cfg = ModelConfig {
            experts: 1,
            ..tiny_config()
        };
        let problem = Problem::random(cfg, 3, 2, 3, 0.5, SparsityMode::Literal).unwrap();
        let report = check(&problem, 1e-5).unwrap();
        assert!(report.passes(1e-4, 1e-10), "{report:?}");
        assert!(report.blocks.iter().all(|b| !b.name.starts_with("gate")));
    }
}
