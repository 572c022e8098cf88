//! Sequence cross-entropy, Jensen-Shannon regularizer and the composite
//! self-learning objective. All losses are recorded on a [`Graph`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::corpus::PAD;
use crate::mixup::{check_stochastic, MixError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("distribution check failed: {0}")]
    Distribution(#[from] MixError),
    #[error("{expected} target tokens expected, got {actual}")]
    TargetLength { expected: usize, actual: usize },
    #[error("loss weights must be finite and non-negative, got ({0}, {1})")]
    Weights(f64, f64),
    #[error("weight {0} is positive but its loss term was not computed")]
    MissingTerm(&'static str),
}

/// Weights of the mixed-branch cross-entropy and of the JSD term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self, LossError> {
        let w = Self { lambda1, lambda2 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(self.lambda1) && ok(self.lambda2) {
            Ok(())
        } else {
            Err(LossError::Weights(self.lambda1, self.lambda2))
        }
    }

    /// Both regularizers disabled: the mixed branch is not needed at all.
    pub fn uni_only(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0
    }
}

/// `-sum_t log p_t(target_t)` over the rows of `probs`, skipping PAD targets.
pub fn cross_entropy(g: &mut Graph, probs: Var, targets: &[usize]) -> Result<Var, LossError> {
    let (rows, vocab) = {
        let p = g.value(probs);
        (p.rows(), p.cols())
    };
    if targets.len() != rows {
        return Err(LossError::TargetLength {
            expected: rows,
            actual: targets.len(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(AutodiffError::IndexOutOfRange {
            op: "cross_entropy",
            index: bad,
            bound: vocab,
        }
        .into());
    }
    let picked = g.pick(probs, targets)?;
    let logs = g.log(picked);
    let kept = if targets.contains(&PAD) {
        let mask: Vec<f64> = targets.iter().map(|&t| if t == PAD { 0.0 } else { 1.0 }).collect();
        let mask = g.constant(Tensor::matrix(rows, 1, mask));
        g.mul(logs, mask)?
    } else {
        logs
    };
    let total = g.sum_all(kept);
    Ok(g.scale(total, -1.0))
}

/// `sum_t JSD(P_t || Q_t)` in nats, differentiable in both arguments.
pub fn jsd_loss(g: &mut Graph, p_mix: Var, p_uni: Var) -> Result<Var, LossError> {
    if g.shape(p_mix) != g.shape(p_uni) {
        return Err(AutodiffError::ShapeMismatch {
            op: "jsd_loss",
            left: g.shape(p_mix).to_vec(),
            right: g.shape(p_uni).to_vec(),
        }
        .into());
    }
    check_stochastic(g.value(p_mix))?;
    check_stochastic(g.value(p_uni))?;
    // 0.5 * sum p log p + 0.5 * sum q log q - sum m log m, m = (p + q) / 2
    let sum_pq = g.add(p_mix, p_uni)?;
    let m = g.scale(sum_pq, 0.5);
    let plogp = entropy_term(g, p_mix)?;
    let qlogq = entropy_term(g, p_uni)?;
    let mlogm = entropy_term(g, m)?;
    let pq = g.add(plogp, qlogq)?;
    let half = g.scale(pq, 0.5);
    Ok(g.sub(half, mlogm)?)
}

/// `sum x log x` as a scalar node.
fn entropy_term(g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
    let lx = g.log(x);
    let xlx = g.mul(x, lx)?;
    Ok(g.sum_all(xlx))
}

/// `ce_uni + lambda1 * ce_mix + lambda2 * jsd`. Zero-weight terms are left
/// out of the graph entirely.
pub fn total_loss(
    g: &mut Graph,
    ce_uni: Var,
    ce_mix: Option<Var>,
    jsd: Option<Var>,
    weights: &LossWeights,
) -> Result<Var, LossError> {
    weights.validate()?;
    let mut total = ce_uni;
    for (name, weight, term) in [("lambda1", weights.lambda1, ce_mix), ("lambda2", weights.lambda2, jsd)] {
        if weight == 0.0 {
            continue;
        }
        let term = term.ok_or(LossError::MissingTerm(name))?;
        let scaled = if weight == 1.0 { term } else { g.scale(term, weight) };
        total = g.add(total, scaled)?;
    }
    Ok(total)
}
