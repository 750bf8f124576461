//! Compound objective: next-segment MSE plus a gate penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Which gate penalty is added to the MSE term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityMode {
    /// `λ·Σ|G|`. On a row-stochastic gate this equals `λ·rows` and has zero
    /// gradient with respect to the logits.
    Literal,
    /// `λ·Σ_rows H(G_row)`, pushing each row toward one-hot.
    Entropy,
    None,
}

impl std::str::FromStr for SparsityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "entropy" => Ok(Self::Entropy),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "sparsity_mode must be literal, entropy or none, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for SparsityMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::Entropy => "entropy",
            Self::None => "none",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub exp: f64,
}

const LOG_FLOOR: f64 = 1e-300;

pub fn row_entropy(row: &[f64]) -> f64 {
    -row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Loss over `R` prediction rows. `gate` is the R×K gate matrix.
pub fn compute_loss(
    targets: &Mat,
    predictions: &Mat,
    gate: &Mat,
    lambda: f64,
    mode: SparsityMode,
) -> Result<LossParts> {
    if targets.shape() != predictions.shape() {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.shape(),
            predictions.shape()
        )));
    }
    if gate.rows != targets.rows {
        return Err(Error::Shape(format!(
            "gate has {} rows, predictions {}",
            gate.rows, targets.rows
        )));
    }
    let count = targets.len() as f64;
    let mse = targets
        .data
        .iter()
        .zip(&predictions.data)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / count;
    let exp = match mode {
        SparsityMode::Literal => lambda * gate.data.iter().map(|g| g.abs()).sum::<f64>(),
        SparsityMode::Entropy => {
            lambda * (0..gate.rows).map(|r| row_entropy(gate.row(r))).sum::<f64>()
        }
        SparsityMode::None => 0.0,
    };
    Ok(LossParts {
        total: mse + exp,
        mse,
        exp,
    })
}

/// ∂loss/∂predictions and ∂loss/∂G for [`compute_loss`].
pub fn loss_grad(
    targets: &Mat,
    predictions: &Mat,
    gate: &Mat,
    lambda: f64,
    mode: SparsityMode,
) -> Result<(Mat, Mat)> {
    compute_loss(targets, predictions, gate, lambda, mode)?;
    let scale = 2.0 / targets.len() as f64;
    let dpred = Mat::from_vec(
        targets.rows,
        targets.cols,
        predictions
            .data
            .iter()
            .zip(&targets.data)
            .map(|(p, t)| scale * (p - t))
            .collect(),
    );
    let dgate = Mat::from_vec(
        gate.rows,
        gate.cols,
        gate.data
            .iter()
            .map(|&g| match mode {
                SparsityMode::Literal => lambda * if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 },
                SparsityMode::Entropy => -lambda * (g.max(LOG_FLOOR).ln() + 1.0),
                SparsityMode::None => 0.0,
            })
            .collect(),
    );
    Ok((dpred, dgate))
}
