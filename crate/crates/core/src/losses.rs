//! Training objectives: L1 reconstruction and the pixel-wise contrastive loss.
//!
//! The contrastive loss treats prior queries of a degraded image as anchors.
//! For a sampled token position `i`, the clean-image query at the same position
//! is the positive and clean-image queries at other positions are negatives:
//!
//! ```text
//! ℓ_i = -log( exp(q_i^d·q_i^gt / τ) / (exp(q_i^d·q_i^gt / τ) + Σ_k exp(q_i^d·q_{j_k}^gt / τ)) )
//! L   = Σ over sampled i of ℓ_i
//! ```

use crate::error::{dim_err, Error, Result};
use crate::ops::loss::NceRow;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    /// Anchor positions sampled per image (clamped to the token count).
    pub samples: usize,
    /// Negatives per anchor (clamped to token count − 1).
    pub negatives: usize,
    pub tau: f64,
    /// L2-normalize query rows before taking dot products.
    pub normalize: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            samples: 256,
            negatives: 256,
            tau: 0.07,
            normalize: true,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("contrastive.samples: must be at least 1".into()));
        }
        if self.negatives == 0 {
            return Err(Error::Config("contrastive.negatives: must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("contrastive.tau: must be positive".into()));
        }
        Ok(())
    }

    /// Effective `(samples, negatives)` for `n` tokens.
    pub fn effective(&self, n: usize) -> (usize, usize) {
        (self.samples.min(n), self.negatives.min(n.saturating_sub(1)))
    }
}

/// Mean absolute error between equally shaped tensors.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    tape.l1(pred, target)
}

/// Draws anchors without replacement and, for each anchor, distinct
/// negatives uniformly from the other positions.
pub fn sample_nce_rows<R: Rng + ?Sized>(
    n: usize,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Vec<NceRow>> {
    if n < 2 {
        return Err(Error::Usage(format!(
            "contrastive loss needs at least 2 tokens for negatives, got {n}"
        )));
    }
    cfg.validate()?;
    let (t, m) = cfg.effective(n);
    let anchors = sample(rng, n, t).into_vec();
    Ok(anchors
        .into_iter()
        .map(|i| {
            let negatives = sample(rng, n - 1, m)
                .into_iter()
                .map(|j| if j >= i { j + 1 } else { j });
            NceRow {
                row: i,
                columns: std::iter::once(i).chain(negatives).collect(),
            }
        })
        .collect())
}

/// Contrastive loss over explicitly chosen anchor/negative sets.
pub fn contrastive_loss_with_rows<T: Scalar>(
    tape: &mut Tape<T>,
    q_degraded: Var,
    q_clean: Var,
    cfg: &ContrastiveConfig,
    rows: Vec<NceRow>,
) -> Result<Var> {
    if tape.shape(q_degraded) != tape.shape(q_clean) || tape.shape(q_clean).len() != 2 {
        return dim_err(format!(
            "contrastive loss needs matching [N, D] queries, got {:?} and {:?}",
            tape.shape(q_degraded),
            tape.shape(q_clean)
        ));
    }
    cfg.validate()?;
    let (a, b) = if cfg.normalize {
        (tape.normalize_rows(q_degraded)?, tape.normalize_rows(q_clean)?)
    } else {
        (q_degraded, q_clean)
    };
    let sims = tape.matmul(a, b, true)?;
    let logits = tape.scale(sims, T::one() / T::of(cfg.tau));
    tape.sampled_nce(logits, rows)
}

/// Contrastive loss between prior queries of a degraded image and of its
/// clean counterpart, with anchors and negatives sampled from `rng`.
pub fn contrastive_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    q_degraded: Var,
    q_clean: Var,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Var> {
    let n = tape.shape(q_clean).first().copied().unwrap_or(0);
    let rows = sample_nce_rows(n, cfg, rng)?;
    contrastive_loss_with_rows(tape, q_degraded, q_clean, cfg, rows)
}

/// Terms of the pre-training objective.
#[derive(Clone, Copy, Debug)]
pub struct PretrainLoss {
    pub total: Var,
    pub l1: Var,
    pub contrastive: Var,
}

/// `l1(pred, target) + lambda · contrastive(q_degraded, q_clean)`.
#[allow(clippy::too_many_arguments)]
pub fn combined_pretrain_loss<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    q_degraded: Var,
    q_clean: Var,
    lambda: f64,
    cfg: &ContrastiveConfig,
    rng: &mut R,
) -> Result<PretrainLoss> {
    let l1 = tape.l1(pred, target)?;
    let contrastive = contrastive_loss(tape, q_degraded, q_clean, cfg, rng)?;
    let weighted = tape.scale(contrastive, T::of(lambda));
    let total = tape.add(l1, weighted)?;
    Ok(PretrainLoss {
        total,
        l1,
        contrastive,
    })
}
