use serde::{Deserialize, Serialize};

use super::{NnError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Supervision for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

/// Mean of squared differences over all elements.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Mean negative log-softmax probability of each row's label.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    Ok(tape.cross_entropy(logits, labels)?)
}

impl Loss {
    /// Loss of `pred` (one row per example) against per-example targets.
    pub fn apply(self, tape: &mut Tape, pred: Var, targets: &[Target]) -> Result<Var> {
        match self {
            Loss::Mse => {
                let mut data = Vec::new();
                for t in targets {
                    match t {
                        Target::Values(v) => data.extend_from_slice(v),
                        Target::Class(_) => return Err(NnError::Input("mse loss needs value targets".into())),
                    }
                }
                let shape = tape.value(pred).shape().to_vec();
                let target = Tensor::new(shape, data)?;
                let target = tape.constant(target);
                mse_loss(tape, pred, target)
            }
            Loss::CrossEntropy => {
                let labels = targets
                    .iter()
                    .map(|t| match t {
                        Target::Class(c) => Ok(*c),
                        Target::Values(_) => Err(NnError::Input("cross-entropy needs class targets".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                cross_entropy_loss(tape, pred, &labels)
            }
        }
    }
}
