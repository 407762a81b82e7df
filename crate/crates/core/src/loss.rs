//! Training objectives built from tape primitives.

use crate::autodiff::{Tape, Var};
use crate::error::Result;

pub const DEFAULT_MARGIN: f64 = 0.2;

/// Batch-all triplet loss (mean over positive hinges) on `[B×D]` embeddings,
/// or the mean over parts of the per-part loss on `[B×N×D]`.
pub fn triplet(tape: &mut Tape, embeddings: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let d = tape.pairwise_dist(embeddings)?;
    tape.batch_all_triplet(d, labels, margin)
}

/// `Σ w_i · term_i`.
pub fn weighted_sum(tape: &mut Tape, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let scaled = if w == 1.0 { v } else { tape.scale(v, w) };
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    Ok(acc.expect("at least one loss term"))
}

/// Skeleton pretraining objective: weighted branch triplet losses plus
/// cross-entropy on the deepest branch's logits.
pub struct PretrainLoss {
    pub total: Var,
    pub triplets: Vec<Var>,
    pub ce: Var,
}

pub fn msgg_pretrain_loss(
    tape: &mut Tape,
    embeddings: &[Var],
    weights: &[f64],
    logits: Var,
    labels: &[usize],
    margin: f64,
) -> Result<PretrainLoss> {
    assert_eq!(embeddings.len(), weights.len(), "one loss weight per branch");
    let mut triplets = Vec::with_capacity(embeddings.len());
    for &e in embeddings {
        triplets.push(triplet(tape, e, labels, margin)?);
    }
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let mut terms: Vec<(f64, Var)> = weights.iter().copied().zip(triplets.iter().copied()).collect();
    terms.push((1.0, ce));
    let total = weighted_sum(tape, &terms)?;
    Ok(PretrainLoss { total, triplets, ce })
}

/// Global objective: silhouette-side triplet + skeleton triplet + skeleton CE.
pub struct GlobalLoss {
    pub total: Var,
    pub sil_tp: Var,
    pub ske_tp: Var,
    pub ske_ce: Var,
}

/// `sil_features` is `[B×N×D]` (fused or raw parts); `e_body` is `[B×c3]`.
pub fn global_loss(
    tape: &mut Tape,
    sil_features: Var,
    e_body: Var,
    logits: Var,
    labels: &[usize],
    margin: f64,
) -> Result<GlobalLoss> {
    let sil_tp = triplet(tape, sil_features, labels, margin)?;
    let ske_tp = triplet(tape, e_body, labels, margin)?;
    let ske_ce = tape.softmax_cross_entropy(logits, labels)?;
    let total = weighted_sum(tape, &[(1.0, sil_tp), (1.0, ske_tp), (1.0, ske_ce)])?;
    Ok(GlobalLoss { total, sil_tp, ske_tp, ske_ce })
}
