//! Seeded, deterministic training with best-validation checkpointing and
//! grid search over learning rate and gate penalty weight.

pub mod adamw;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{backward, forward, ForwardTrace, Model, Params, SeqInput};
use crate::tensor::Mat;

pub use adamw::{adamw_step, AdamWConfig, OptState};
pub use loss::{compute_loss, loss_grad, row_entropy, LossParts, SparsityMode};

pub const LR_GRID: [f64; 3] = [1e-2, 1e-3, 5e-4];
pub const LAMBDA_GRID: [f64; 3] = [0.01, 0.1, 0.5];

/// Sequences per gradient chunk. Chunks are reduced in a fixed order, so the
/// result does not depend on the number of worker threads.
const GRAD_CHUNK: usize = 4;

/// One training sequence: N input segments with their prompt embeddings and
/// the N segments that follow each position.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub channel: usize,
    /// Row index of the first input value.
    pub offset: usize,
    pub input: SeqInput,
    pub targets: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub sparsity_mode: SparsityMode,
    pub adamw: AdamWConfig,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lambda: 0.01,
            epochs: 10,
            batch: 32,
            seed: 0,
            sparsity_mode: SparsityMode::Literal,
            adamw: AdamWConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be at least 1");
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return bad("adam eps must be positive and weight_decay non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
    pub mean_gate_entropy: f64,
    pub alpha: f64,
}

/// Next-segment error of the final position plus gate statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValMetrics {
    pub mse: f64,
    pub mae: f64,
    pub mean_gate_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub steps: usize,
}

/// The JSON run record written after training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: serde_json::Value,
    pub seed: u64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn record(&self, config: serde_json::Value, seed: u64) -> RunRecord {
        RunRecord {
            config,
            seed,
            best_epoch: self.best_epoch,
            epochs: self.history.clone(),
        }
    }
}

pub fn validation_metrics(model: &Model, examples: &[Example]) -> Result<ValMetrics> {
    if examples.is_empty() {
        return Err(Error::Config("no validation examples".into()));
    }
    let per: Vec<(f64, f64, f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let trace = forward(model, &ex.input)?;
            let last = trace.pred.rows - 1;
            let (mut se, mut ae) = (0.0, 0.0);
            for (p, t) in trace.pred.row(last).iter().zip(ex.targets.row(last)) {
                se += (p - t) * (p - t);
                ae += (p - t).abs();
            }
            let h: f64 = (0..trace.gate.g.rows)
                .map(|r| row_entropy(trace.gate.g.row(r)))
                .sum();
            Ok((se, ae, h, trace.gate.g.rows))
        })
        .collect::<Result<_>>()?;
    let values = examples.len() * examples[0].targets.cols;
    let (se, ae, h, rows) = per
        .iter()
        .fold((0.0, 0.0, 0.0, 0), |a, x| (a.0 + x.0, a.1 + x.1, a.2 + x.2, a.3 + x.3));
    Ok(ValMetrics {
        mse: se / values as f64,
        mae: ae / values as f64,
        mean_gate_entropy: h / rows as f64,
    })
}

/// Loss and gradient of one batch.
pub fn batch_gradient(
    model: &Model,
    batch: &[&Example],
    lambda: f64,
    mode: SparsityMode,
) -> Result<(LossParts, Params)> {
    let traces: Vec<ForwardTrace> = batch
        .par_iter()
        .map(|ex| forward(model, &ex.input))
        .collect::<Result<_>>()?;
    let preds: Vec<Mat> = traces.iter().map(|t| t.pred.clone()).collect();
    let gates: Vec<Mat> = traces.iter().map(|t| t.gate.g.clone()).collect();
    let targets: Vec<Mat> = batch.iter().map(|ex| ex.targets.clone()).collect();
    let (t, p, g) = (Mat::vstack(&targets), Mat::vstack(&preds), Mat::vstack(&gates));
    let parts = compute_loss(&t, &p, &g, lambda, mode)?;
    if mode == SparsityMode::Literal {
        debug_assert!((parts.exp - lambda * g.rows as f64).abs() <= 1e-9 * g.rows.max(1) as f64);
    }
    let (dp, dg) = loss_grad(&t, &p, &g, lambda, mode)?;
    let rows: Vec<usize> = traces.iter().map(|t| t.pred.rows).collect();
    let (dps, dgs) = (dp.split_rows(&rows), dg.split_rows(&rows));

    let chunks: Vec<Params> = (0..traces.len())
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| {
            let mut acc = model.params.zeros_like();
            for &i in idx {
                backward(model, &traces[i], &dps[i], &dgs[i], &mut acc)?;
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut chunks = chunks.into_iter();
    let mut grads = chunks.next().unwrap_or_else(|| model.params.zeros_like());
    for c in chunks {
        grads.add_assign(&c);
    }
    Ok((parts, grads))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

pub fn train(
    mut model: Model,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let mut state = OptState::new(&model.params);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Params)> = None;
    let mut steps = 0;

    for epoch in 1..=cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let (parts, grads) = batch_gradient(&model, &batch, cfg.lambda, cfg.sparsity_mode)?;
            adamw_step(&mut model.params, &grads, &mut state, cfg.lr, &cfg.adamw)?;
            loss_sum += parts.total;
            batches += 1;
            steps += 1;
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
        }
        let val = validation_metrics(&model, val_set)?;
        history.push(EpochRecord {
            epoch,
            steps,
            train_loss: loss_sum / batches as f64,
            val_mse: val.mse,
            val_mae: val.mae,
            mean_gate_entropy: val.mean_gate_entropy,
            alpha: model.alpha(),
        });
        if best.as_ref().is_none_or(|b| val.mse < b.0) {
            best = Some((val.mse, epoch, model.params.clone()));
        }
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }

    let (best_val_mse, best_epoch, params) = best.expect("at least one epoch runs");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_mse,
        steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Trial {
    pub lr: f64,
    pub lambda: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub lr: f64,
    pub lambda: f64,
    pub val_mse: f64,
    /// Every grid point in lr-major order.
    pub trials: Vec<Trial>,
}

/// Runs `evaluate` on every (lr, λ) pair and returns the lowest validation
/// MSE, ties going to the smaller lr and then the smaller λ.
pub fn select_hyperparams<F>(lrs: &[f64], lambdas: &[f64], evaluate: F) -> Result<Selection>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    if lrs.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("hyperparameter grids must be non-empty".into()));
    }
    let points: Vec<(f64, f64)> = lrs
        .iter()
        .flat_map(|&lr| lambdas.iter().map(move |&l| (lr, l)))
        .collect();
    let trials: Vec<Trial> = points
        .par_iter()
        .map(|&(lr, lambda)| {
            Ok(Trial {
                lr,
                lambda,
                val_mse: evaluate(lr, lambda)?,
            })
        })
        .collect::<Result<_>>()?;
    let key = |t: &Trial| if t.val_mse.is_nan() { f64::INFINITY } else { t.val_mse };
    let best = trials
        .iter()
        .min_by(|a, b| {
            key(a)
                .total_cmp(&key(b))
                .then(a.lr.total_cmp(&b.lr))
                .then(a.lambda.total_cmp(&b.lambda))
        })
        .copied()
        .expect("grid is non-empty");
    Ok(Selection {
        lr: best.lr,
        lambda: best.lambda,
        val_mse: best.val_mse,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy(n: usize, value: f64) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                channel: 0,
                offset: i,
                input: SeqInput {
                    segments: Mat::from_vec(2, 2, vec![value; 4]),
                    text: Mat::zeros(2, 4),
                },
                targets: Mat::from_vec(2, 2, vec![value; 4]),
            })
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            segment_len: 2,
            hidden_dim: 4,
            experts: 2,
            layers: 1,
            heads: 1,
            ffn_mult: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn tie_break_prefers_smaller_lr_then_lambda() {
        let sel = select_hyperparams(&[1e-2, 1e-3], &[0.1, 0.01], |lr, l| {
            Ok(if l == 0.1 { 0.5 } else { 0.7 + lr })
        })
        .unwrap();
        assert_eq!((sel.lr, sel.lambda), (1e-3, 0.1));
        assert_eq!(sel.trials.len(), 4);
    }

    #[test]
    fn single_point_grid() {
        let sel = select_hyperparams(&[5e-4], &[0.5], |_, _| Ok(3.0)).unwrap();
        assert_eq!((sel.lr, sel.lambda, sel.val_mse), (5e-4, 0.5, 3.0));
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(select_hyperparams(&[], &[0.1], |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn chunked_gradient_matches_sequential() {
        let model = Model::new(small(), 2).unwrap();
        let data: Vec<Example> = (0..7)
            .map(|i| {
                let mut ex = toy(1, 0.1 * i as f64).remove(0);
                ex.targets.data[1] = -0.3;
                ex
            })
            .collect();
        let refs: Vec<&Example> = data.iter().collect();
        let (_, g) = batch_gradient(&model, &refs, 0.1, SparsityMode::Entropy).unwrap();
        let traces: Vec<_> = data.iter().map(|e| forward(&model, &e.input).unwrap()).collect();
        let t = Mat::vstack(&data.iter().map(|e| e.targets.clone()).collect::<Vec<_>>());
        let p = Mat::vstack(&traces.iter().map(|t| t.pred.clone()).collect::<Vec<_>>());
        let gm = Mat::vstack(&traces.iter().map(|t| t.gate.g.clone()).collect::<Vec<_>>());
        let (dp, dg) = loss_grad(&t, &p, &gm, 0.1, SparsityMode::Entropy).unwrap();
        let rows = vec![2; 7];
        let seq = crate::model::backward_batch(&model, &traces, &dp.split_rows(&rows), &dg.split_rows(&rows)).unwrap();
        for (a, b) in g.blocks().iter().zip(seq.blocks()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn series_only_keeps_theta() {
        let cfg = ModelConfig {
            fusion: crate::model::FusionMode::SeriesOnly,
            ..small()
        };
        let model = Model::new(cfg, 0).unwrap();
        let data = toy(8, 0.4);
        let out = train(
            model,
            &data,
            &data,
            &TrainConfig {
                epochs: 2,
                batch: 4,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.model.params.theta(), 0.0);
        assert_eq!(out.history.len(), 2);
        assert!(out.history.iter().all(|e| e.alpha == 1.0));
    }

    #[test]
    fn max_steps_stops_mid_epoch() {
        let data = toy(10, 0.2);
        let out = train(
            Model::new(small(), 0).unwrap(),
            &data,
            &data,
            &TrainConfig {
                epochs: 5,
                batch: 2,
                max_steps: Some(7),
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert_eq!(out.steps, 7);
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.history[1].steps, 7);
    }

    #[test]
    fn invalid_config_rejected() {
        for cfg in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { lambda: -1.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }
}
