//! Mini-batch construction.
//!
//! The private path uses Poisson subsampling of positive relations plus
//! decoupled negatives: a tuple's negatives are a function of its positive
//! relation, the step and the global seed only, so adding or removing one
//! training relation changes at most the tuple built on that relation.
//! Inclusion draws are keyed per relation for the same reason.
//!
//! [`sample_negatives_inbatch`] builds negatives from the other positives of
//! the batch. It is kept for diagnostics and the non-private baseline; it
//! couples tuples together and must never feed the private path.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::graph::{EntityId, GraphSplit, Relation};
use crate::rng;

/// One positive relation plus `k` negatives sharing its anchor end.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationTuple {
    pub positive: Relation,
    /// The smaller endpoint of `positive`.
    pub anchor: EntityId,
    pub negatives: Vec<EntityId>,
    pub tuple_seed: u64,
}

impl RelationTuple {
    /// Endpoint of the positive that is not the anchor.
    pub fn partner(&self) -> EntityId {
        if self.positive.lo() == self.anchor {
            self.positive.hi()
        } else {
            self.positive.lo()
        }
    }

    /// Distinct entities in slot order: anchor, partner, negatives.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut out = Vec::with_capacity(self.negatives.len() + 2);
        out.push(self.anchor);
        out.push(self.partner());
        for &v in &self.negatives {
            if !out.contains(&v) {
                out.push(v);
            }
        }
        out
    }

    pub fn k(&self) -> usize {
        self.negatives.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub tuples: Vec<RelationTuple>,
    /// Poisson inclusion probability `q = b / |E_train|`.
    pub sampling_ratio: f64,
}

/// Per-tuple seed from `(seed, step, canonical positive)`.
pub fn tuple_seed(seed: u64, step: u64, positive: Relation) -> u64 {
    rng::derive_key(
        seed,
        "tuple",
        &[step, u64::from(positive.lo()), u64::from(positive.hi())],
    )
}

/// Samples `k` distinct entities outside the positive's endpoints, without
/// reading anything but the arguments.
pub fn sample_negatives_decoupled(
    positive: Relation,
    k: usize,
    n_entities: usize,
    tuple_seed: u64,
) -> Result<Vec<EntityId>> {
    if n_entities < k + 2 {
        return Err(invalid(format!(
            "cannot draw {k} distinct negatives from {n_entities} entities"
        )));
    }
    let mut rng = rng::stream(tuple_seed, "negatives", &[]);
    let excluded = |v: u32| positive.has(v);
    let eligible = n_entities - 2;
    if 4 * k <= eligible {
        // Rejection sampling: every slot is uniform over the remaining
        // eligible entities.
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            let v = rng.gen_range(0..n_entities) as u32;
            if !excluded(v) && !out.contains(&v) {
                out.push(v);
            }
        }
        Ok(out)
    } else {
        let mut pool: Vec<u32> = (0..n_entities as u32).filter(|&v| !excluded(v)).collect();
        for i in 0..k {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(k);
        Ok(pool)
    }
}

/// Builds the decoupled tuple for one positive relation.
pub fn decoupled_tuple(
    positive: Relation,
    k: usize,
    n_entities: usize,
    seed: u64,
    step: u64,
) -> Result<RelationTuple> {
    let ts = tuple_seed(seed, step, positive);
    Ok(RelationTuple {
        positive,
        anchor: positive.lo(),
        negatives: sample_negatives_decoupled(positive, k, n_entities, ts)?,
        tuple_seed: ts,
    })
}

/// Poisson-subsampled batch with an explicit inclusion probability `q`.
///
/// Each relation's inclusion is a keyed draw on `(seed, step, relation)`, so
/// the decision for one relation does not depend on which other relations
/// are present.
pub fn sample_batch_with_ratio(
    train: &[Relation],
    n_entities: usize,
    step: u64,
    sampling_ratio: f64,
    k: usize,
    seed: u64,
) -> Result<Batch> {
    if !(0.0..=1.0).contains(&sampling_ratio) {
        return Err(invalid("sampling ratio must lie in [0, 1]"));
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if n_entities < k + 2 {
        return Err(invalid(format!(
            "k + 2 = {} exceeds the {n_entities} entities",
            k + 2
        )));
    }
    let mut tuples = Vec::new();
    for &rel in train {
        let u = rng::keyed_uniform(
            seed,
            "sampling",
            &[step, u64::from(rel.lo()), u64::from(rel.hi())],
        );
        if u < sampling_ratio {
            tuples.push(decoupled_tuple(rel, k, n_entities, seed, step)?);
        }
    }
    Ok(Batch {
        step,
        tuples,
        sampling_ratio,
    })
}

/// Poisson-subsampled batch with `q = b / |E_train|`.
pub fn sample_batch(
    split: &GraphSplit,
    n_entities: usize,
    step: u64,
    expected_batch: usize,
    k: usize,
    seed: u64,
) -> Result<Batch> {
    let n_train = split.train.len();
    if expected_batch == 0 || expected_batch > n_train {
        return Err(invalid(format!(
            "expected batch {expected_batch} must lie in 1..={n_train}"
        )));
    }
    let q = expected_batch as f64 / n_train as f64;
    sample_batch_with_ratio(&split.train, n_entities, step, q, k, seed)
}

/// In-batch negatives: tuple `i` pairs its anchor with every entity of the
/// other positives in the batch (excluding its own endpoints).
pub fn sample_negatives_inbatch(batch_positives: &[Relation]) -> Result<Vec<Vec<EntityId>>> {
    if batch_positives.len() < 2 {
        return Err(invalid("in-batch negatives need at least two positives"));
    }
    Ok(batch_positives
        .iter()
        .enumerate()
        .map(|(i, pos)| {
            let mut negs = Vec::new();
            for (j, other) in batch_positives.iter().enumerate() {
                if i == j {
                    continue;
                }
                for v in [other.lo(), other.hi()] {
                    if !pos.has(v) && !negs.contains(&v) {
                        negs.push(v);
                    }
                }
            }
            negs
        })
        .collect())
}
