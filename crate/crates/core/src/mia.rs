//! Membership-inference audit: cosine scores of relation endpoints, TPR at
//! fixed false-positive rates, and a one-sided Wilcoxon signed-rank test of
//! member against non-member scores.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::encoder::{encode, EncoderParams};
use crate::error::{invalid, Error, Result};
use crate::graph::{EntityId, Relation, TextAttributedGraph};
use crate::linalg::dot;
use crate::rng;

pub const DEFAULT_FPR_LEVELS: [f64; 3] = [0.01, 0.05, 0.1];
pub const DEFAULT_MIA_PAIRS: usize = 2000;
/// Largest sample size for which the exact null distribution is used.
pub const WILCOXON_EXACT_MAX: usize = 20;

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine score of each relation's endpoints. Every entity is encoded once.
pub fn mia_scores(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    pairs: &[Relation],
) -> Result<Vec<f64>> {
    let mut cache: BTreeMap<EntityId, Vec<f64>> = BTreeMap::new();
    for r in pairs {
        for e in [r.lo(), r.hi()] {
            if !cache.contains_key(&e) {
                cache.insert(e, encode(params, graph.attributes(e))?.0);
            }
        }
    }
    Ok(pairs
        .iter()
        .map(|r| cosine(&cache[&r.lo()], &cache[&r.hi()]))
        .collect())
}

/// TPR at each FPR level. The threshold for level `f` is the smallest observed
/// score (or +inf) at which at most a fraction `f` of non-members score at or
/// above it.
pub fn tpr_at_fpr(members: &[f64], nonmembers: &[f64], levels: &[f64]) -> Result<Vec<(f64, f64)>> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(invalid("tpr_at_fpr needs member and non-member scores"));
    }
    if members.iter().chain(nonmembers).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attack score".into()));
    }
    let mut non = nonmembers.to_vec();
    non.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = members.iter().chain(nonmembers).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(f64::INFINITY);
    let at_or_above = |sorted: &[f64], t: f64| sorted.len() - sorted.partition_point(|&s| s < t);
    let n_non = non.len() as f64;
    let n_mem = members.len() as f64;
    Ok(levels
        .iter()
        .map(|&f| {
            let t = candidates
                .iter()
                .copied()
                .find(|&t| at_or_above(&non, t) as f64 <= f * n_non + 1e-9)
                .unwrap_or(f64::INFINITY);
            let hits = members.iter().filter(|&&s| s >= t).count() as f64;
            (f, hits / n_mem)
        })
        .collect())
}

/// Signed ranks with zeros dropped: `(doubled ranks, doubled W+, tie sizes)`.
/// Doubling keeps averaged tie ranks integral.
fn signed_ranks(diffs: &[f64]) -> Result<(Vec<u64>, u64, Vec<usize>)> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired difference".into()));
    }
    let mut nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(invalid("all paired differences are zero"));
    }
    nz.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    let mut ranks = Vec::with_capacity(nz.len());
    let mut ties = Vec::new();
    let mut w_plus = 0u64;
    let mut i = 0;
    while i < nz.len() {
        let mut j = i;
        while j + 1 < nz.len() && nz[j + 1].abs() == nz[i].abs() {
            j += 1;
        }
        // Positions i..=j hold 1-based ranks i+1..=j+1; their doubled mean is i+j+2.
        let doubled = (i + j + 2) as u64;
        for d in &nz[i..=j] {
            ranks.push(doubled);
            if *d > 0.0 {
                w_plus += doubled;
            }
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    Ok((ranks, w_plus, ties))
}

/// Null distribution of the doubled W+ statistic: entry `s` is the probability
/// that the positive-sign doubled ranks sum to `s` under independent fair signs.
pub fn wilcoxon_exact_distribution(doubled_ranks: &[u64]) -> Vec<f64> {
    let total: u64 = doubled_ranks.iter().sum();
    let mut dist = vec![0.0f64; total as usize + 1];
    dist[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled_ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let p = dist[s] * 0.5;
            dist[s] = p;
            dist[s + r] += p;
        }
        reach += r;
    }
    dist
}

/// Exact one-sided p-value `P(W+ >= observed)` by the full sign distribution.
pub fn wilcoxon_exact_p(diffs: &[f64]) -> Result<f64> {
    let (ranks, w_plus, _) = signed_ranks(diffs)?;
    let dist = wilcoxon_exact_distribution(&ranks);
    Ok(dist[w_plus as usize..].iter().sum::<f64>().min(1.0))
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal_p(diffs: &[f64]) -> Result<f64> {
    let (ranks, w_plus, ties) = signed_ranks(diffs)?;
    let n = ranks.len() as f64;
    let w = w_plus as f64 / 2.0;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (w - mean - 0.5) / var.sqrt();
    Ok((0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(f64::MIN_POSITIVE, 1.0))
}

/// One-sided test of members scoring higher than their paired non-members.
/// Exact for up to 20 non-zero differences, normal approximation above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<f64> {
    let nonzero = diffs.iter().filter(|&&d| d != 0.0).count();
    if nonzero == 0 {
        return Err(invalid("all paired differences are zero"));
    }
    if nonzero < 5 {
        return Err(Error::Insufficient(format!(
            "Wilcoxon test needs at least 5 non-zero differences, got {nonzero}"
        )));
    }
    if nonzero <= WILCOXON_EXACT_MAX {
        wilcoxon_exact_p(diffs)
    } else {
        wilcoxon_normal_p(diffs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub n_pairs: usize,
    pub member_scores: Vec<f64>,
    pub nonmember_scores: Vec<f64>,
    pub tpr_at_fpr: Vec<(f64, f64)>,
    pub wilcoxon_p: f64,
}

impl MiaReport {
    pub fn tpr_at(&self, level: f64) -> Option<f64> {
        self.tpr_at_fpr
            .iter()
            .find(|(f, _)| (f - level).abs() < 1e-12)
            .map(|&(_, t)| t)
    }
}

/// Seeded audit: draws `n_pairs` members and `n_pairs` non-members without
/// replacement and pairs them by draw index for the signed-rank test.
pub fn audit(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    members: &[Relation],
    nonmembers: &[Relation],
    n_pairs: usize,
    seed: u64,
) -> Result<MiaReport> {
    if n_pairs == 0 {
        return Err(invalid("n_pairs must be positive"));
    }
    if members.len() < n_pairs || nonmembers.len() < n_pairs {
        return Err(Error::Insufficient(format!(
            "audit needs {n_pairs} members and non-members, have {} and {}",
            members.len(),
            nonmembers.len()
        )));
    }
    let mut rng_m = rng::stream(seed, "audit", &[0]);
    let mut rng_n = rng::stream(seed, "audit", &[1]);
    let m: Vec<Relation> = members.choose_multiple(&mut rng_m, n_pairs).copied().collect();
    let n: Vec<Relation> = nonmembers.choose_multiple(&mut rng_n, n_pairs).copied().collect();
    let member_scores = mia_scores(params, graph, &m)?;
    let nonmember_scores = mia_scores(params, graph, &n)?;
    let diffs: Vec<f64> = member_scores
        .iter()
        .zip(&nonmember_scores)
        .map(|(a, b)| a - b)
        .collect();
    let wilcoxon_p = wilcoxon_signed_rank(&diffs)?;
    let tpr_at_fpr = tpr_at_fpr(&member_scores, &nonmember_scores, &DEFAULT_FPR_LEVELS)?;
    Ok(MiaReport {
        n_pairs,
        member_scores,
        nonmember_scores,
        tpr_at_fpr,
        wilcoxon_p,
    })
}

/// Equal-width histogram over `[lo, hi]`; returns `(bin center, count)`.
pub fn histogram(scores: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, usize)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let i = (((s - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + (i as f64 + 0.5) * width, c))
        .collect()
}
