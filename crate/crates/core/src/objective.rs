//! Relation scores and tuple losses.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::EntityId;
use crate::linalg::{axpy, dot};
use crate::sampler::RelationTuple;

/// Scores of one tuple: the positive first, then the `k` negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleScores {
    pub positive: f64,
    pub negatives: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    InfoNce { temperature: f64 },
    /// Pairwise hinge summed over the negatives.
    Hinge { margin: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::InfoNce { temperature: 1.0 }
    }
}

/// Dot-product relation score.
pub fn score(h_u: &[f64], h_w: &[f64]) -> Result<f64> {
    if h_u.len() != h_w.len() {
        return Err(Error::Shape(format!(
            "score of embeddings with lengths {} and {}",
            h_u.len(),
            h_w.len()
        )));
    }
    Ok(dot(h_u, h_w))
}

/// `−ln softmax(z/τ)[positive]` and its gradient w.r.t. the raw scores
/// (positive first).
pub fn infonce(scores: &TupleScores, temperature: f64) -> (f64, Vec<f64>) {
    let inv_t = 1.0 / temperature;
    let logits: Vec<f64> = std::iter::once(scores.positive)
        .chain(scores.negatives.iter().copied())
        .map(|z| z * inv_t)
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let loss = (total.ln() + max - logits[0]).max(0.0);
    let mut grad: Vec<f64> = exps.iter().map(|e| e / total * inv_t).collect();
    grad[0] -= inv_t;
    (loss, grad)
}

/// `Σ_j max(0, γ + z⁻_j − z⁺)`; the subgradient at the kink is 0.
pub fn hinge(scores: &TupleScores, margin: f64) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; scores.negatives.len() + 1];
    let mut loss = 0.0;
    for (j, &zn) in scores.negatives.iter().enumerate() {
        let slack = margin + zn - scores.positive;
        if slack > 0.0 {
            loss += slack;
            grad[0] -= 1.0;
            grad[j + 1] += 1.0;
        }
    }
    (loss, grad)
}

pub fn tuple_loss(scores: &TupleScores, kind: LossKind) -> (f64, Vec<f64>) {
    match kind {
        LossKind::InfoNce { temperature } => infonce(scores, temperature),
        LossKind::Hinge { margin } => hinge(scores, margin),
    }
}

/// Scores of a tuple from its entity embeddings.
pub fn tuple_scores(
    tuple: &RelationTuple,
    embeddings: &BTreeMap<EntityId, Vec<f64>>,
) -> Result<TupleScores> {
    let get = |e: EntityId| {
        embeddings
            .get(&e)
            .ok_or_else(|| Error::InvalidParameter(format!("no embedding for entity {e}")))
    };
    let hu = get(tuple.anchor)?;
    Ok(TupleScores {
        positive: score(hu, get(tuple.partner())?)?,
        negatives: tuple
            .negatives
            .iter()
            .map(|&v| score(hu, get(v)?))
            .collect::<Result<_>>()?,
    })
}

/// Tuple loss plus `dℓ/dh` for every distinct entity of the tuple.
///
/// The anchor collects `Σ (dℓ/dz)·h_other` over all `k+1` relations; every
/// other endpoint receives `(dℓ/dz)·h_anchor`.
pub fn tuple_loss_grads(
    tuple: &RelationTuple,
    embeddings: &BTreeMap<EntityId, Vec<f64>>,
    kind: LossKind,
) -> Result<(f64, BTreeMap<EntityId, Vec<f64>>)> {
    let scores = tuple_scores(tuple, embeddings)?;
    let (loss, dz) = tuple_loss(&scores, kind);
    let hu = &embeddings[&tuple.anchor];
    let dim = hu.len();
    let mut grads: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    let others = std::iter::once(tuple.partner()).chain(tuple.negatives.iter().copied());
    let mut anchor_grad = vec![0.0; dim];
    for (other, &c) in others.zip(&dz) {
        axpy(&mut anchor_grad, c, &embeddings[&other]);
        let g = grads.entry(other).or_insert_with(|| vec![0.0; dim]);
        axpy(g, c, hu);
    }
    grads.insert(tuple.anchor, anchor_grad);
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(p: f64, n: &[f64]) -> TupleScores {
        TupleScores {
            positive: p,
            negatives: n.to_vec(),
        }
    }

    #[test]
    fn score_examples() {
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(score(&[1.0], &[1.0, 2.0]).is_err());
        for i in 0..3 {
            for j in 0..3 {
                let mut a = [0.0; 3];
                let mut b = [0.0; 3];
                a[i] = 1.0;
                b[j] = 1.0;
                assert_eq!(score(&a, &b).unwrap(), if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn infonce_symmetric_pair_is_ln2() {
        let (l, _) = infonce(&ts(0.3, &[0.3]), 1.0);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn infonce_saturates() {
        let (l, g) = infonce(&ts(100.0, &[0.0, 0.0, 0.0]), 1.0);
        assert!(l < 1e-6);
        assert!(g.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn infonce_matches_scalar_softmax_and_finite_differences() {
        let z = [0.5, -0.2, 0.1];
        let (l, g) = infonce(&ts(z[0], &z[1..]), 1.0);
        // Independent scalar evaluation.
        let denom = z[0].exp() + z[1].exp() + z[2].exp();
        let expected = -(z[0].exp() / denom).ln();
        assert!((l - expected).abs() < 1e-12);
        let p: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        assert!((g[0] - (p[0] - 1.0)).abs() < 1e-12);
        assert!((g[1] - p[1]).abs() < 1e-12 && (g[2] - p[2]).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..3 {
            let mut up = z;
            let mut dn = z;
            up[i] += h;
            dn[i] -= h;
            let fd = (infonce(&ts(up[0], &up[1..]), 1.0).0 - infonce(&ts(dn[0], &dn[1..]), 1.0).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn infonce_temperature_scales_gradient() {
        let (_, g1) = infonce(&ts(0.4, &[0.1]), 1.0);
        let (l2, g2) = infonce(&ts(0.8, &[0.2]), 2.0);
        let (l1, _) = infonce(&ts(0.4, &[0.1]), 1.0);
        assert!((l1 - l2).abs() < 1e-15);
        assert!((g1[0] - 2.0 * g2[0]).abs() < 1e-15);
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge(&ts(2.0, &[0.5]), 1.0).0, 0.0);
        assert_eq!(hinge(&ts(0.5, &[0.5]), 1.0).0, 1.0);
        let (l, g) = hinge(&ts(0.0, &[0.5, -2.0]), 1.0);
        // 1 + 0.5 - 0 = 1.5 active; 1 - 2 - 0 = -1 inactive.
        assert_eq!(l, 1.5);
        assert_eq!(g, vec![-1.0, 1.0, 0.0]);
        // Exactly at the kink the subgradient is zero.
        assert_eq!(hinge(&ts(1.0, &[0.0]), 1.0), (0.0, vec![0.0, 0.0]));
    }
}
