//! Token-sequence encoder with a hand-written backward pass.
//!
//! Architecture: embedding lookup → `L` position-wise dense blocks (tanh on
//! all but the last) → mean pool over non-pad positions. Dense blocks never
//! mix positions, so for a block with weight `W` (p×d) the gradient over a
//! whole relation tuple is `Gᵀ·H` where `H` stacks every token input and `G`
//! every token output-gradient of the tuple. [`backward_tuple`] returns those
//! stacks instead of parameter gradients.
//!
//! Trainable parameter groups, in order:
//!
//! * full mode: `embed`, then `weight_l`, `bias_l` for each block;
//! * adapter mode: `adapter_down_l` (A, r×d), `adapter_up_l` (B, p×r) for
//!   each block. The effective weight is `W + (α/r)·B·A`.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{EntityId, TokenSeq};
use crate::linalg::{axpy, Mat};
use crate::rng;
use crate::sampler::RelationTuple;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Output width of each dense block; the last entry is the embedding
    /// dimension.
    pub block_dims: Vec<usize>,
}

impl EncoderArch {
    pub fn new(vocab_size: usize, embed_dim: usize, block_dims: Vec<usize>) -> Self {
        Self {
            vocab_size,
            embed_dim,
            block_dims,
        }
    }

    /// `(p, d)` of every dense block.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut d = self.embed_dim;
        self.block_dims
            .iter()
            .map(|&p| {
                let dims = (p, d);
                d = p;
                dims
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.block_dims.last().copied().unwrap_or(self.embed_dim)
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        if self.embed_dim == 0 || self.block_dims.is_empty() || self.block_dims.contains(&0) {
            return Err(Error::Shape(
                "embedding and every block need a positive width, with at least one block".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    Adapter { rank: usize, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// A, r×d.
    pub down: Mat,
    /// B, p×r.
    pub up: Mat,
    /// α/r.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBlock {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub adapter: Option<Adapter>,
}

impl DenseBlock {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `W + scale·B·A`.
    pub fn effective_weight(&self) -> Mat {
        let mut w = self.weight.clone();
        if let Some(ad) = &self.adapter {
            let mut delta = ad.up.matmul(&ad.down);
            delta.scale(ad.scale);
            axpy(w.as_mut_slice(), 1.0, delta.as_slice());
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl GroupShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub arch: EncoderArch,
    pub mode: TrainMode,
    pub embed: Mat,
    pub blocks: Vec<DenseBlock>,
}

/// Mutable access to parameter groups; implemented by the encoder and by
/// plain gradient buffers so optimizers can run on either.
pub trait ParamGroups {
    fn n_groups(&self) -> usize;
    fn group(&self, i: usize) -> &[f64];
    fn group_mut(&mut self, i: usize) -> &mut [f64];
}

impl EncoderParams {
    /// Weights `~ N(0, 1/fan_in)`. Embedding rows take `fan_in = 1` (a
    /// one-hot input has a single active entry); biases start at zero; in
    /// adapter mode `B = 0` so the initial model equals the frozen base.
    pub fn init(arch: EncoderArch, mode: TrainMode, seed: u64) -> Result<Self> {
        arch.validate()?;
        if let TrainMode::Adapter { rank, alpha } = mode {
            if rank == 0 {
                return Err(invalid("adapter rank must be at least 1"));
            }
            if !alpha.is_finite() {
                return Err(invalid("adapter alpha must be finite"));
            }
        }
        // Adapters draw from their own stream so the frozen base is identical
        // in both modes.
        let mut base_rng = rng::stream(seed, "init", &[]);
        let mut adapter_rng = rng::stream(seed, "init", &[1]);
        let gaussian = |rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha20Rng| {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Mat::from_vec(rows, cols, data).expect("shape")
        };
        let embed = gaussian(arch.vocab_size, arch.embed_dim, 1, &mut base_rng);
        let mut blocks = Vec::new();
        for (p, d) in arch.layer_dims() {
            let weight = gaussian(p, d, d, &mut base_rng);
            let adapter = match mode {
                TrainMode::Full => None,
                TrainMode::Adapter { rank, alpha } => Some(Adapter {
                    down: gaussian(rank, d, d, &mut adapter_rng),
                    up: Mat::zeros(p, rank),
                    scale: alpha / rank as f64,
                }),
            };
            blocks.push(DenseBlock {
                weight,
                bias: vec![0.0; p],
                adapter,
            });
        }
        Ok(Self {
            arch,
            mode,
            embed,
            blocks,
        })
    }

    pub fn is_adapter(&self) -> bool {
        matches!(self.mode, TrainMode::Adapter { .. })
    }

    pub fn group_shapes(&self) -> Vec<GroupShape> {
        let mut out = Vec::new();
        let shape = |name: String, m: &Mat| GroupShape {
            name,
            rows: m.rows(),
            cols: m.cols(),
        };
        if self.is_adapter() {
            for (l, b) in self.blocks.iter().enumerate() {
                let ad = b.adapter.as_ref().expect("adapter mode");
                out.push(shape(format!("adapter_down_{l}"), &ad.down));
                out.push(shape(format!("adapter_up_{l}"), &ad.up));
            }
        } else {
            out.push(shape("embed".into(), &self.embed));
            for (l, b) in self.blocks.iter().enumerate() {
                out.push(shape(format!("weight_{l}"), &b.weight));
                out.push(GroupShape {
                    name: format!("bias_{l}"),
                    rows: 1,
                    cols: b.bias.len(),
                });
            }
        }
        out
    }

    pub fn n_trainable(&self) -> usize {
        self.group_shapes().iter().map(GroupShape::len).sum()
    }

    /// Group indices `(weight, bias)` for block `l` in full mode.
    pub fn full_groups(l: usize) -> (usize, usize) {
        (1 + 2 * l, 2 + 2 * l)
    }

    /// Group indices `(down, up)` for block `l` in adapter mode.
    pub fn adapter_groups(l: usize) -> (usize, usize) {
        (2 * l, 2 * l + 1)
    }

    pub fn all_finite(&self) -> bool {
        (0..self.n_groups()).all(|i| self.group(i).iter().all(|x| x.is_finite()))
            && self.embed.as_slice().iter().all(|x| x.is_finite())
            && self
                .blocks
                .iter()
                .all(|b| b.weight.as_slice().iter().chain(&b.bias).all(|x| x.is_finite()))
    }
}

impl ParamGroups for EncoderParams {
    fn n_groups(&self) -> usize {
        if self.is_adapter() {
            2 * self.blocks.len()
        } else {
            1 + 2 * self.blocks.len()
        }
    }

    fn group(&self, i: usize) -> &[f64] {
        if self.is_adapter() {
            let ad = self.blocks[i / 2].adapter.as_ref().expect("adapter mode");
            if i % 2 == 0 {
                ad.down.as_slice()
            } else {
                ad.up.as_slice()
            }
        } else if i == 0 {
            self.embed.as_slice()
        } else {
            let b = &self.blocks[(i - 1) / 2];
            if i % 2 == 1 {
                b.weight.as_slice()
            } else {
                &b.bias
            }
        }
    }

    fn group_mut(&mut self, i: usize) -> &mut [f64] {
        if self.is_adapter() {
            let ad = self.blocks[i / 2].adapter.as_mut().expect("adapter mode");
            if i % 2 == 0 {
                ad.down.as_mut_slice()
            } else {
                ad.up.as_mut_slice()
            }
        } else if i == 0 {
            self.embed.as_mut_slice()
        } else {
            let b = &mut self.blocks[(i - 1) / 2];
            if i % 2 == 1 {
                b.weight.as_mut_slice()
            } else {
                &mut b.bias
            }
        }
    }
}

/// Everything the backward pass needs for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub tokens: Vec<u32>,
    pub length: usize,
    /// Input of each block, `M×d_l`.
    pub inputs: Vec<Mat>,
    /// Output of each block after its activation, `M×p_l`.
    pub outputs: Vec<Mat>,
    /// `H·Aᵀ` of each block in adapter mode, `M×r`.
    pub adapter_hidden: Vec<Option<Mat>>,
    pub embedding: Vec<f64>,
}

impl ForwardTrace {
    pub fn max_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// Encodes one token sequence; returns the pooled embedding and its trace.
pub fn encode(params: &EncoderParams, tokens: &TokenSeq) -> Result<(Vec<f64>, ForwardTrace)> {
    let vocab = params.arch.vocab_size;
    if let Some(&t) = tokens.ids().iter().find(|&&t| t as usize >= vocab) {
        return Err(invalid(format!("token id {t} outside vocabulary of size {vocab}")));
    }
    let m = tokens.max_tokens();
    let d0 = params.arch.embed_dim;
    let mut x = Mat::zeros(m, d0);
    for (j, &t) in tokens.ids().iter().enumerate() {
        x.row_mut(j).copy_from_slice(params.embed.row(t as usize));
    }
    let n_blocks = params.blocks.len();
    let mut inputs = Vec::with_capacity(n_blocks);
    let mut outputs = Vec::with_capacity(n_blocks);
    let mut adapter_hidden = Vec::with_capacity(n_blocks);
    // Pad rows stay zero; they never reach the pooled output.
    let len = tokens.len();
    for (l, block) in params.blocks.iter().enumerate() {
        let mut o = x.matmul_t_head(&block.weight, len);
        let hidden = block.adapter.as_ref().map(|ad| {
            let z = x.matmul_t_head(&ad.down, len);
            let mut delta = z.matmul_t_head(&ad.up, len);
            delta.scale(ad.scale);
            axpy(o.as_mut_slice(), 1.0, delta.as_slice());
            z
        });
        for j in 0..len {
            let row = o.row_mut(j);
            axpy(row, 1.0, &block.bias);
            if l + 1 < n_blocks {
                row.iter_mut().for_each(|v| *v = v.tanh());
            }
        }
        inputs.push(x);
        adapter_hidden.push(hidden);
        x = o.clone();
        outputs.push(o);
    }
    let mut h = vec![0.0; x.cols()];
    for j in 0..len {
        axpy(&mut h, 1.0, x.row(j));
    }
    let inv = 1.0 / len as f64;
    h.iter_mut().for_each(|v| *v *= inv);
    let trace = ForwardTrace {
        tokens: tokens.ids().to_vec(),
        length: len,
        inputs,
        outputs,
        adapter_hidden,
        embedding: h.clone(),
    };
    Ok((h, trace))
}

/// Stacked token inputs `h` (T×d) and output-gradients `g` (T×p) of one
/// layer; the layer's gradient is `gᵀ·h`, and when `bias_group` is set the
/// bias gradient is the column sum of `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    pub group: usize,
    pub bias_group: Option<usize>,
    pub h: Mat,
    pub g: Mat,
}

/// Sparse embedding-row gradients, one row per real token occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRows {
    pub group: usize,
    pub ids: Vec<u32>,
    pub grads: Mat,
}

/// Low-rank representation of one tuple's parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankGradCache {
    pub layers: Vec<LayerFactors>,
    pub embedding: Option<EmbeddingRows>,
    /// `(rows, cols)` of every trainable group, in group order.
    pub shapes: Vec<(usize, usize)>,
}

impl LowRankGradCache {
    /// Scalars held by the stacked factors.
    pub fn stored_scalars(&self) -> usize {
        let dense: usize = self
            .layers
            .iter()
            .map(|l| l.h.as_slice().len() + l.g.as_slice().len())
            .sum();
        dense + self.embedding.as_ref().map_or(0, |e| e.grads.as_slice().len())
    }
}

/// Backward pass for explicit `(entity, dℓ/dh)` slots. Entities may repeat;
/// each slot contributes its own stacked rows.
pub fn backward_slots(
    params: &EncoderParams,
    slots: &[(EntityId, &[f64])],
    traces: &BTreeMap<EntityId, ForwardTrace>,
) -> Result<LowRankGradCache> {
    let n_blocks = params.blocks.len();
    let m = match slots.first() {
        Some((e, _)) => traces.get(e).ok_or(Error::MissingTrace(*e))?.max_tokens(),
        None => 0,
    };
    let t_rows = slots.len() * m;
    let dims = params.arch.layer_dims();
    let adapter = params.is_adapter();
    let out_dim = params.arch.output_dim();

    // Per block: stacked inputs and output-gradients.
    let mut hs: Vec<Mat> = dims.iter().map(|&(_, d)| Mat::zeros(t_rows, d)).collect();
    let mut gs: Vec<Mat> = dims.iter().map(|&(p, _)| Mat::zeros(t_rows, p)).collect();
    let mut emb_ids = Vec::new();
    let mut emb_rows: Vec<f64> = Vec::new();

    for (s, &(entity, dh)) in slots.iter().enumerate() {
        let tr = traces.get(&entity).ok_or(Error::MissingTrace(entity))?;
        if tr.max_tokens() != m {
            return Err(Error::Shape("traces disagree on max_tokens".into()));
        }
        if dh.len() != out_dim {
            return Err(Error::Shape(format!(
                "loss gradient for entity {entity} has length {}, expected {out_dim}",
                dh.len()
            )));
        }
        let base = s * m;
        // Gradient w.r.t. the last block's output rows.
        let mut d_out = Mat::zeros(m, out_dim);
        let inv = 1.0 / tr.length as f64;
        for j in 0..tr.length {
            d_out.row_mut(j).iter_mut().zip(dh).for_each(|(o, &g)| *o = g * inv);
        }
        for l in (0..n_blocks).rev() {
            let block = &params.blocks[l];
            let mut g = d_out;
            if l + 1 < n_blocks {
                let act = &tr.outputs[l];
                for (gv, av) in g.as_mut_slice().iter_mut().zip(act.as_slice()) {
                    *gv *= 1.0 - av * av;
                }
            }
            for j in 0..m {
                hs[l].row_mut(base + j).copy_from_slice(tr.inputs[l].row(j));
                gs[l].row_mut(base + j).copy_from_slice(g.row(j));
            }
            let need_input_grad = l > 0 || !adapter;
            if !need_input_grad {
                break;
            }
            let mut dx = g.matmul(&block.weight);
            if let Some(ad) = &block.adapter {
                let mut gb = g.matmul(&ad.up);
                gb.scale(ad.scale);
                axpy(dx.as_mut_slice(), 1.0, gb.matmul(&ad.down).as_slice());
            }
            if l == 0 {
                for j in 0..tr.length {
                    emb_ids.push(tr.tokens[j]);
                    emb_rows.extend_from_slice(dx.row(j));
                }
            }
            d_out = dx;
        }
    }

    let shapes = params
        .group_shapes()
        .iter()
        .map(|s| (s.rows, s.cols))
        .collect();
    let mut layers = Vec::new();
    let mut embedding = None;
    if adapter {
        for (l, (h, g)) in hs.into_iter().zip(gs).enumerate() {
            let ad = params.blocks[l].adapter.as_ref().expect("adapter mode");
            let (down, up) = EncoderParams::adapter_groups(l);
            let mut g_down = g.matmul(&ad.up);
            g_down.scale(ad.scale);
            let z = h.matmul_t(&ad.down);
            let mut g_up = g;
            g_up.scale(ad.scale);
            layers.push(LayerFactors {
                group: down,
                bias_group: None,
                h,
                g: g_down,
            });
            layers.push(LayerFactors {
                group: up,
                bias_group: None,
                h: z,
                g: g_up,
            });
        }
    } else {
        for (l, (h, g)) in hs.into_iter().zip(gs).enumerate() {
            let (w, b) = EncoderParams::full_groups(l);
            layers.push(LayerFactors {
                group: w,
                bias_group: Some(b),
                h,
                g,
            });
        }
        let n = emb_ids.len();
        embedding = Some(EmbeddingRows {
            group: 0,
            ids: emb_ids,
            grads: Mat::from_vec(n, params.arch.embed_dim, emb_rows)?,
        });
    }
    Ok(LowRankGradCache {
        layers,
        embedding,
        shapes,
    })
}

/// Backward pass for one tuple. Every distinct entity is one slot; a shared
/// anchor therefore contributes a single summed gradient through one trace.
pub fn backward_tuple(
    params: &EncoderParams,
    tuple: &RelationTuple,
    loss_grads: &BTreeMap<EntityId, Vec<f64>>,
    traces: &BTreeMap<EntityId, ForwardTrace>,
) -> Result<LowRankGradCache> {
    let entities = tuple.entities();
    let mut slots = Vec::with_capacity(entities.len());
    for e in &entities {
        let g = loss_grads
            .get(e)
            .ok_or_else(|| invalid(format!("no loss gradient for entity {e}")))?;
        slots.push((*e, g.as_slice()));
    }
    backward_slots(params, &slots, traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> EncoderArch {
        EncoderArch::new(20, 4, vec![5, 3])
    }

    #[test]
    fn zero_params_give_zero_embedding() {
        let mut p = EncoderParams::init(arch(), TrainMode::Full, 1).unwrap();
        for i in 0..p.n_groups() {
            p.group_mut(i).iter_mut().for_each(|v| *v = 0.0);
        }
        let (h, _) = encode(&p, &TokenSeq::new(&[3, 4, 5], 6).unwrap()).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_block_returns_embedding_row() {
        let mut p = EncoderParams::init(EncoderArch::new(10, 3, vec![3]), TrainMode::Full, 2).unwrap();
        p.blocks[0].weight = Mat::identity(3);
        let (h, _) = encode(&p, &TokenSeq::new(&[7], 1).unwrap()).unwrap();
        assert_eq!(h, p.embed.row(7).to_vec());
    }

    #[test]
    fn adapter_at_init_matches_frozen_base() {
        let full = EncoderParams::init(arch(), TrainMode::Full, 3).unwrap();
        let ad = EncoderParams::init(arch(), TrainMode::Adapter { rank: 2, alpha: 16.0 }, 3).unwrap();
        assert_eq!(full.embed, ad.embed);
        let toks = TokenSeq::new(&[1, 9, 4], 5).unwrap();
        let (a, _) = encode(&full, &toks).unwrap();
        let (b, _) = encode(&ad, &toks).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = EncoderParams::init(arch(), TrainMode::Full, 11).unwrap();
        let b = EncoderParams::init(arch(), TrainMode::Full, 11).unwrap();
        let c = EncoderParams::init(arch(), TrainMode::Full, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(EncoderParams::init(EncoderArch::new(20, 4, vec![]), TrainMode::Full, 0).is_err());
        assert!(EncoderParams::init(EncoderArch::new(20, 0, vec![3]), TrainMode::Full, 0).is_err());
        assert!(EncoderParams::init(arch(), TrainMode::Adapter { rank: 0, alpha: 1.0 }, 0).is_err());
    }

    #[test]
    fn weight_std_follows_fan_in() {
        let p = EncoderParams::init(EncoderArch::new(4, 64, vec![256]), TrainMode::Full, 5).unwrap();
        let w = p.blocks[0].weight.as_slice();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        assert!((var.sqrt() - 0.125).abs() < 0.1 * 0.125, "std {}", var.sqrt());
    }

    #[test]
    fn out_of_vocab_token_is_rejected() {
        let p = EncoderParams::init(arch(), TrainMode::Full, 1).unwrap();
        assert!(encode(&p, &TokenSeq::new(&[25], 2).unwrap()).is_err());
    }

    #[test]
    fn pads_do_not_change_embedding() {
        let p = EncoderParams::init(arch(), TrainMode::Full, 4).unwrap();
        let s = TokenSeq::new(&[2, 8, 13], 3).unwrap();
        let (a, _) = encode(&p, &s).unwrap();
        let (b, _) = encode(&p, &s.repadded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_trace_is_an_error() {
        let p = EncoderParams::init(arch(), TrainMode::Full, 4).unwrap();
        let g = vec![0.0; 3];
        let err = backward_slots(&p, &[(5, &g)], &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::MissingTrace(5)));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_factors() {
        let p = EncoderParams::init(arch(), TrainMode::Full, 4).unwrap();
        let (_, tr) = encode(&p, &TokenSeq::new(&[2, 3], 4).unwrap()).unwrap();
        let traces = BTreeMap::from([(1u32, tr)]);
        let g = vec![0.0; 3];
        let cache = backward_slots(&p, &[(1, &g)], &traces).unwrap();
        for l in &cache.layers {
            assert!(l.g.as_slice().iter().all(|&v| v == 0.0));
            assert_eq!(l.h.rows(), 4);
        }
    }
}
