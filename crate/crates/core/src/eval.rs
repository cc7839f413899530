//! Relation-prediction ranking metrics and the few-shot linear probe.
//!
//! Ranking uses in-batch candidates: every query in a batch is scored
//! against every target of the same batch. That is fine here because
//! evaluation has no privacy requirement; training must not couple tuples
//! this way.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::graph::{EntityId, Relation, TextAttributedGraph};
use crate::linalg::dot;
use crate::rng;

pub const DEFAULT_EVAL_BATCH: usize = 256;

/// Query/target embedding pairs; pair `i` is the true match.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingBatch {
    pub queries: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

/// 1-based rank of the true target for every query. Ties go to the lower
/// target index.
pub fn ranks(batch: &RankingBatch) -> Result<Vec<usize>> {
    let n = batch.queries.len();
    if n < 2 || batch.targets.len() != n {
        return Err(invalid("ranking batch needs at least two aligned pairs"));
    }
    let dim = batch.queries[0].len();
    if batch.queries.iter().chain(&batch.targets).any(|v| v.len() != dim) {
        return Err(Error::Shape("ranking embeddings differ in dimension".into()));
    }
    Ok(batch
        .queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let scores: Vec<f64> = batch.targets.iter().map(|t| dot(q, t)).collect();
            let own = scores[i];
            1 + scores
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

/// `(PREC@1, MRR)` from 1-based ranks.
pub fn metrics_from_ranks(ranks: &[usize]) -> (f64, f64) {
    let n = ranks.len() as f64;
    let prec1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / n;
    let mrr = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
    (prec1, mrr)
}

pub fn rank_metrics(batch: &RankingBatch) -> Result<(f64, f64)> {
    Ok(metrics_from_ranks(&ranks(batch)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub prec1: f64,
    pub mrr: f64,
    pub queries: usize,
    pub batches: usize,
    pub batch_size: usize,
}

/// Embeddings of every entity.
pub fn embed_all(params: &EncoderParams, graph: &TextAttributedGraph) -> Result<Vec<Vec<f64>>> {
    (0..graph.n_entities() as u32)
        .map(|e| encode(params, graph.attributes(e)).map(|(h, _)| h))
        .collect()
}

/// Ranks held-out relations in seeded batches of `batch_size`. The query is
/// the smaller endpoint, the target the larger. A trailing partial batch is
/// dropped whenever at least one full batch exists.
pub fn evaluate_relations(
    embeddings: &[Vec<f64>],
    relations: &[Relation],
    batch_size: usize,
    seed: u64,
) -> Result<RankingReport> {
    if batch_size < 2 {
        return Err(invalid("evaluation batch size must be at least 2"));
    }
    let mut order = relations.to_vec();
    order.shuffle(&mut rng::stream(seed, "eval", &[]));
    let mut chunks: Vec<&[Relation]> = order.chunks(batch_size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < batch_size) {
        chunks.pop();
    }
    let mut all = Vec::new();
    for chunk in &chunks {
        let batch = RankingBatch {
            queries: chunk.iter().map(|r| embeddings[r.lo() as usize].clone()).collect(),
            targets: chunk.iter().map(|r| embeddings[r.hi() as usize].clone()).collect(),
        };
        all.extend(ranks(&batch)?);
    }
    if all.is_empty() {
        return Err(invalid("no relations to evaluate"));
    }
    let (prec1, mrr) = metrics_from_ranks(&all);
    Ok(RankingReport {
        prec1,
        mrr,
        queries: all.len(),
        batches: chunks.len(),
        batch_size,
    })
}

/// `(macro F1, micro F1)` for single-label predictions. Undefined precision
/// or recall counts as 0; macro averages over `0..n_classes`.
pub fn f1_scores(truth: &[usize], pred: &[usize], n_classes: usize) -> (f64, f64) {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let f1 = |tp: usize, fp: usize, fn_: usize| {
        let prec = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rec = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
        if prec + rec == 0.0 {
            0.0
        } else {
            2.0 * prec * rec / (prec + rec)
        }
    };
    let macro_f1 = (0..n_classes).map(|c| f1(tp[c], fp[c], fn_[c])).sum::<f64>() / n_classes as f64;
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    (macro_f1, micro_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Labeled training and validation entities per class.
    pub shots: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            shots: 8,
            epochs: 200,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub n_classes: usize,
    pub test_size: usize,
    pub best_epoch: usize,
}

struct Softmax {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Softmax {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.w.iter().zip(&self.b).map(|(w, b)| dot(w, x) + b).collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }
}

/// Trains a linear softmax classifier on `shots` entities per class by plain
/// full-batch gradient descent, keeps the epoch with the best validation
/// accuracy (another `shots` per class), and reports F1 on the rest.
pub fn linear_probe(
    embeddings: &[Vec<f64>],
    labels: &BTreeMap<EntityId, u32>,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if cfg.shots == 0 {
        return Err(invalid("shots must be at least 1"));
    }
    let classes: Vec<u32> = {
        let mut c: Vec<u32> = labels.values().copied().collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    if classes.len() < 2 {
        return Err(invalid("probe needs at least two classes"));
    }
    let class_index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut rng = rng::stream(cfg.seed, "eval", &[1]);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for &c in &classes {
        let mut members: Vec<EntityId> = labels
            .iter()
            .filter(|(_, &l)| l == c)
            .map(|(&e, _)| e)
            .collect();
        if members.len() < 2 * cfg.shots {
            return Err(Error::Insufficient(format!(
                "class {c} has {} labeled entities; need {} for {} shots",
                members.len(),
                2 * cfg.shots,
                cfg.shots
            )));
        }
        members.shuffle(&mut rng);
        let ci = class_index[&c];
        for (i, &e) in members.iter().enumerate() {
            if e as usize >= embeddings.len() {
                return Err(invalid(format!("label for unknown entity {e}")));
            }
            let slot = if i < cfg.shots {
                &mut train
            } else if i < 2 * cfg.shots {
                &mut val
            } else {
                &mut test
            };
            slot.push((e as usize, ci));
        }
    }
    if test.is_empty() {
        return Err(Error::Insufficient("no held-out entities left for testing".into()));
    }
    let n_classes = classes.len();
    let dim = embeddings[0].len();
    let mut model = Softmax {
        w: vec![vec![0.0; dim]; n_classes],
        b: vec![0.0; n_classes],
    };
    let accuracy = |m: &Softmax, set: &[(usize, usize)]| {
        set.iter().filter(|&&(e, c)| m.predict(&embeddings[e]) == c).count()
    };
    let mut best = (accuracy(&model, &val), 0, model.w.clone(), model.b.clone());
    let n = train.len() as f64;
    for epoch in 1..=cfg.epochs {
        let mut gw = vec![vec![0.0; dim]; n_classes];
        let mut gb = vec![0.0; n_classes];
        for &(e, c) in &train {
            let x = &embeddings[e];
            let l = model.logits(x);
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for k in 0..n_classes {
                let d = exps[k] / z - if k == c { 1.0 } else { 0.0 };
                gb[k] += d;
                for (g, xi) in gw[k].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        for k in 0..n_classes {
            model.b[k] -= cfg.learning_rate * gb[k] / n;
            for (w, g) in model.w[k].iter_mut().zip(&gw[k]) {
                *w -= cfg.learning_rate * g / n;
            }
        }
        let acc = accuracy(&model, &val);
        if acc > best.0 {
            best = (acc, epoch, model.w.clone(), model.b.clone());
        }
    }
    let model = Softmax { w: best.2, b: best.3 };
    let truth: Vec<usize> = test.iter().map(|&(_, c)| c).collect();
    let pred: Vec<usize> = test.iter().map(|&(e, _)| model.predict(&embeddings[e])).collect();
    let (macro_f1, micro_f1) = f1_scores(&truth, &pred, n_classes);
    Ok(ProbeReport {
        macro_f1,
        micro_f1,
        n_classes,
        test_size: test.len(),
        best_epoch: best.1,
    })
}
