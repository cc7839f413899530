//! Oracles and random draws shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use dprel::encoder::{
    backward_tuple, encode, EncoderArch, EncoderParams, LowRankGradCache, ParamGroups, TrainMode,
};
use dprel::graph::{Relation, TextAttributedGraph, TokenSeq};
use dprel::objective::{tuple_loss, tuple_loss_grads, LossKind, TupleScores};
use dprel::privacy::{tuple_grad_naive, FlatGrad};
use dprel::sampler::{decoupled_tuple, sample_batch_with_ratio, RelationTuple};
use dprel::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Small random architecture with every parameter (adapter `B` included)
/// drawn uniformly, so no gradient block is trivially zero.
pub fn random_params(r: &mut ChaCha20Rng, adapter: bool) -> EncoderParams {
    let vocab = r.gen_range(6..16);
    let embed = r.gen_range(2..5);
    let blocks: Vec<usize> = (0..r.gen_range(1..4)).map(|_| r.gen_range(2..5)).collect();
    let mode = if adapter {
        TrainMode::Adapter {
            rank: r.gen_range(1..3),
            alpha: r.gen_range(0.5..4.0),
        }
    } else {
        TrainMode::Full
    };
    let mut p = EncoderParams::init(EncoderArch::new(vocab, embed, blocks), mode, r.gen()).unwrap();
    p.embed.as_mut_slice().iter_mut().for_each(|x| *x = r.gen_range(-0.8..0.8));
    for b in &mut p.blocks {
        b.weight.as_mut_slice().iter_mut().for_each(|x| *x = r.gen_range(-0.8..0.8));
        b.bias.iter_mut().for_each(|x| *x = r.gen_range(-0.3..0.3));
        if let Some(ad) = &mut b.adapter {
            ad.down.as_mut_slice().iter_mut().for_each(|x| *x = r.gen_range(-0.8..0.8));
            ad.up.as_mut_slice().iter_mut().for_each(|x| *x = r.gen_range(-0.8..0.8));
        }
    }
    p
}

/// Random graph whose attributes may repeat tokens and vary in length.
pub fn random_graph(r: &mut ChaCha20Rng, n: usize, vocab: usize, max_tokens: usize) -> TextAttributedGraph {
    let attrs: Vec<TokenSeq> = (0..n)
        .map(|_| {
            let len = r.gen_range(1..=max_tokens);
            let toks: Vec<u32> = (0..len).map(|_| r.gen_range(1..vocab as u32)).collect();
            TokenSeq::new(&toks, max_tokens).unwrap()
        })
        .collect();
    let mut pairs = vec![(0u32, 1u32)];
    for _ in 0..2 * n {
        let u = r.gen_range(0..n as u32);
        let v = r.gen_range(0..n as u32);
        if u != v {
            pairs.push((u, v));
        }
    }
    TextAttributedGraph::new(attrs, pairs, vocab).unwrap()
}

pub fn random_tuple(r: &mut ChaCha20Rng, graph: &TextAttributedGraph, k: usize) -> RelationTuple {
    let rels = graph.relations();
    let pos = rels[r.gen_range(0..rels.len())];
    decoupled_tuple(pos, k, graph.n_entities(), r.gen(), r.gen_range(1..100)).unwrap()
}

pub fn random_loss(r: &mut ChaCha20Rng) -> LossKind {
    if r.gen_bool(0.5) {
        LossKind::InfoNce {
            temperature: r.gen_range(0.3..2.0),
        }
    } else {
        LossKind::Hinge {
            margin: r.gen_range(0.5..3.0),
        }
    }
}

/// Low-rank cache of one tuple, entities encoded once each.
pub fn tuple_cache(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    tuple: &RelationTuple,
    loss: LossKind,
) -> (f64, LowRankGradCache) {
    let mut traces = BTreeMap::new();
    let mut emb = BTreeMap::new();
    for e in tuple.entities() {
        let (h, t) = encode(params, graph.attributes(e)).unwrap();
        emb.insert(e, h);
        traces.insert(e, t);
    }
    let (l, grads) = tuple_loss_grads(tuple, &emb, loss).unwrap();
    (l, backward_tuple(params, tuple, &grads, &traces).unwrap())
}

/// Tuple loss straight from the definitions: every slot encoded separately.
pub fn tuple_loss_value(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    tuple: &RelationTuple,
    loss: LossKind,
) -> f64 {
    let h = |e| encode(params, graph.attributes(e)).unwrap().0;
    let hu = h(tuple.anchor);
    let s = |e| hu.iter().zip(&h(e)).map(|(a, b)| a * b).sum::<f64>();
    let scores = TupleScores {
        positive: s(tuple.partner()),
        negatives: tuple.negatives.iter().map(|&v| s(v)).collect(),
    };
    tuple_loss(&scores, loss).0
}

/// Central finite differences over every trainable coordinate.
pub fn finite_difference(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    tuple: &RelationTuple,
    loss: LossKind,
    step: f64,
) -> FlatGrad {
    let mut p = params.clone();
    let mut groups = Vec::new();
    for g in 0..p.n_groups() {
        let mut out = vec![0.0; p.group(g).len()];
        for (i, o) in out.iter_mut().enumerate() {
            let orig = p.group(g)[i];
            p.group_mut(g)[i] = orig + step;
            let up = tuple_loss_value(&p, graph, tuple, loss);
            p.group_mut(g)[i] = orig - step;
            let down = tuple_loss_value(&p, graph, tuple, loss);
            p.group_mut(g)[i] = orig;
            *o = (up - down) / (2.0 * step);
        }
        groups.push(out);
    }
    FlatGrad::from_groups(groups)
}

/// `max|a−b| / max|b|`, the normwise relative error used throughout.
pub fn rel_err(a: &FlatGrad, b: &FlatGrad) -> f64 {
    a.max_abs_diff(b) / b.max_abs().max(1e-300)
}

/// A non-private reference loop written without the trainer: per-tuple
/// gradients assembled by the naive oracle, summed in plain floating point,
/// optionally rescaled to norm `clip`, averaged over the expected batch, and
/// applied by a hand-written update.
pub fn plain_training_loop(
    graph: &TextAttributedGraph,
    train: &[Relation],
    cfg: &TrainConfig,
    clip: Option<f64>,
    adam: bool,
) -> EncoderParams {
    let mut p = EncoderParams::init(cfg.arch.clone(), cfg.mode, cfg.seed).unwrap();
    let q = cfg.sampling_ratio.unwrap_or(cfg.batch_size as f64 / train.len() as f64);
    let n: usize = (0..p.n_groups()).map(|g| p.group(g).len()).sum();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    for step in 1..=cfg.steps {
        let batch =
            sample_batch_with_ratio(train, graph.n_entities(), step, q, cfg.negatives, cfg.seed).unwrap();
        let mut sum = vec![0.0; n];
        for tuple in &batch.tuples {
            let (_, cache) = tuple_cache(&p, graph, tuple, cfg.loss);
            let g = tuple_grad_naive(&cache).unwrap();
            let factor = clip.map_or(1.0, |c| (c / g.norm()).min(1.0));
            for (s, x) in sum.iter_mut().zip(g.iter()) {
                *s += factor * x;
            }
        }
        let lr = cfg.learning_rate;
        let t = step as i32;
        let mut idx = 0;
        for g in 0..p.n_groups() {
            for x in p.group_mut(g) {
                let grad = sum[idx] / cfg.batch_size as f64;
                if adam {
                    m[idx] = 0.9 * m[idx] + 0.1 * grad;
                    v[idx] = 0.999 * v[idx] + 0.001 * grad * grad;
                    let mh = m[idx] / (1.0 - 0.9f64.powi(t));
                    let vh = v[idx] / (1.0 - 0.999f64.powi(t));
                    *x -= lr * mh / (vh.sqrt() + 1e-8);
                } else {
                    *x -= lr * grad;
                }
                idx += 1;
            }
        }
    }
    p
}

pub fn flat_params(p: &EncoderParams) -> Vec<f64> {
    let mut out: Vec<f64> = p.embed.as_slice().to_vec();
    for b in &p.blocks {
        out.extend_from_slice(b.weight.as_slice());
        out.extend_from_slice(&b.bias);
        if let Some(ad) = &b.adapter {
            out.extend_from_slice(ad.down.as_slice());
            out.extend_from_slice(ad.up.as_slice());
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One-sided relation set `E \ {e}` sharing everything else with `E`.
pub fn without(relations: &[Relation], e: Relation) -> Vec<Relation> {
    relations.iter().copied().filter(|&r| r != e).collect()
}

/// `(q, σ, α, value)` from a 60-digit term-by-term evaluation of the
/// binomial sum.
pub const EXTENDED_PRECISION: [(f64, f64, u32, f64); 11] = [
    (0.01, 1.0, 16, 3.087_850_783_696_244_593_7),
    (0.01, 1.0, 2, 0.000_171_813_422_074_547_930_99),
    (0.1, 2.0, 32, 1.627_202_301_019_435_833_5),
    (0.001, 0.5, 8, 8.105_422_539_095_556_123_3),
    (0.05, 0.8, 64, 46.956_716_420_516_580_578),
    (0.2, 1.5, 256, 55.273_139_455_229_556_748),
    (0.5, 3.0, 128, 6.412_506_828_683_143_106_3),
    (0.000_455_5, 0.362, 40, 144.729_094_042_724_081_47),
    (0.0001, 0.8, 2, 3.770_733_110_875_460_902_9e-8),
    (0.000_01, 2.0, 8, 1.136_122_860_918_376_922_6e-10),
    (0.001, 5.0, 3, 6.121_868_980_535_531_119_3e-8),
];

/// Independent evaluation of `ln(1 + (S − 1))/(α−1)` where
/// `S − 1 = Σ_{j≥2} C(α,j)(1−q)^{α−j} q^j (e^{j(j−1)/2σ²} − 1)` has only
/// positive terms: log-gamma binomials, max-shifted terms and a
/// Neumaier-compensated sum.
pub fn oracle_rdp(q: f64, sigma: f64, alpha: u32) -> f64 {
    let a = f64::from(alpha);
    if q == 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    let terms: Vec<f64> = (2..=alpha)
        .map(|j| {
            let j = f64::from(j);
            let c = j * (j - 1.0) / (2.0 * sigma * sigma);
            let ln_expm1 = if c > 30.0 { c + (-(-c).exp()).ln_1p() } else { c.exp_m1().ln() };
            statrs::function::gamma::ln_gamma(a + 1.0) - statrs::function::gamma::ln_gamma(j + 1.0) - statrs::function::gamma::ln_gamma(a - j + 1.0)
                + (a - j) * (-q).ln_1p()
                + j * q.ln()
                + ln_expm1
        })
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in &terms {
        let x = (t - max).exp();
        let s = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - s) + x } else { (x - s) + sum };
        sum = s;
    }
    let ln_excess = max + (sum + comp).ln();
    let ln_s = if ln_excess < 0.0 {
        ln_excess.exp().ln_1p()
    } else {
        ln_excess + (-ln_excess).exp().ln_1p()
    };
    ln_s / (a - 1.0)
}
