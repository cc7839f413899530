//! Per-tuple gradient assembly, clipping and Gaussian noising.
//!
//! A tuple's gradient is assembled from its [`LowRankGradCache`] as one
//! stacked product `Gᵀ·H` per dense layer, column sums of `G` for biases and
//! a sparse scatter of embedding rows. [`tuple_grad_naive`] instantiates
//! every per-token outer product first and exists as a test oracle.
//!
//! Clipped gradients are summed in 2⁻⁶⁴ fixed point ([`ClippedSum`]).
//! Integer addition is associative, so the batch sum does not depend on
//! reduction order, and the sums of two batches that differ by one tuple
//! differ by exactly that tuple's (truncated) clipped gradient.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, LayerFactors, LowRankGradCache, ParamGroups};
use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, Mat};
use crate::memory::MemoryMeter;

/// Layers with `p·d` above this use the Gram-matrix norm path.
pub const DEFAULT_GRAM_THRESHOLD: usize = 1 << 22;

/// One dense block of values per trainable parameter group, in the encoder's
/// group order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatGrad {
    groups: Vec<Vec<f64>>,
}

impl FlatGrad {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        Self {
            groups: shapes.iter().map(|&(r, c)| vec![0.0; r * c]).collect(),
        }
    }

    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            groups: params
                .group_shapes()
                .iter()
                .map(|s| vec![0.0; s.len()])
                .collect(),
        }
    }

    pub fn from_groups(groups: Vec<Vec<f64>>) -> Self {
        Self { groups }
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.groups.iter().flatten()
    }

    /// Euclidean norm over all groups, accumulated in group then index order.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for x in self.iter() {
            acc += x * x;
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.groups.iter_mut().flatten().for_each(|x| *x *= s);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &FlatGrad, s: f64) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            axpy(a, s, b);
        }
        Ok(())
    }

    pub fn sub(&self, other: &FlatGrad) -> Result<FlatGrad> {
        let mut out = self.clone();
        out.add_scaled(other, -1.0)?;
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &FlatGrad) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().map(|x| x.abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    fn check_shape(&self, other: &FlatGrad) -> Result<()> {
        if self.groups.len() != other.groups.len()
            || self.groups.iter().zip(&other.groups).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Shape("gradient group layouts differ".into()));
        }
        Ok(())
    }
}

impl ParamGroups for FlatGrad {
    fn n_groups(&self) -> usize {
        self.groups.len()
    }
    fn group(&self, i: usize) -> &[f64] {
        &self.groups[i]
    }
    fn group_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.groups[i]
    }
}

fn check_cache(cache: &LowRankGradCache) -> Result<()> {
    let n = cache.shapes.len();
    for l in &cache.layers {
        if l.group >= n {
            return Err(Error::Shape(format!("layer group {} out of range", l.group)));
        }
        if l.h.rows() != l.g.rows() {
            return Err(Error::Shape(format!(
                "H has {} rows but G has {}",
                l.h.rows(),
                l.g.rows()
            )));
        }
        if cache.shapes[l.group] != (l.g.cols(), l.h.cols()) {
            return Err(Error::Shape(format!(
                "group {} is {:?} but factors give {}x{}",
                l.group,
                cache.shapes[l.group],
                l.g.cols(),
                l.h.cols()
            )));
        }
        if let Some(b) = l.bias_group {
            if b >= n || cache.shapes[b].0 * cache.shapes[b].1 != l.g.cols() {
                return Err(Error::Shape(format!("bias group {b} does not match G")));
            }
        }
    }
    if let Some(e) = &cache.embedding {
        let (rows, cols) = *cache
            .shapes
            .get(e.group)
            .ok_or_else(|| Error::Shape("embedding group out of range".into()))?;
        if e.grads.cols() != cols || e.grads.rows() != e.ids.len() {
            return Err(Error::Shape("embedding rows do not match the table".into()));
        }
        if e.ids.iter().any(|&i| i as usize >= rows) {
            return Err(Error::Shape("embedding row id out of range".into()));
        }
    }
    Ok(())
}

/// Tuple gradient via one stacked product per layer.
pub fn tuple_grad_outer(cache: &LowRankGradCache) -> Result<FlatGrad> {
    check_cache(cache)?;
    let mut out = FlatGrad::zeros(&cache.shapes);
    for l in &cache.layers {
        l.g.add_tn_into(&l.h, 1.0, &mut out.groups[l.group]);
        if let Some(b) = l.bias_group {
            axpy(&mut out.groups[b], 1.0, &l.g.col_sums());
        }
    }
    if let Some(e) = &cache.embedding {
        let table = &mut out.groups[e.group];
        let cols = e.grads.cols();
        for (t, &id) in e.ids.iter().enumerate() {
            let start = id as usize * cols;
            axpy(&mut table[start..start + cols], 1.0, e.grads.row(t));
        }
    }
    Ok(out)
}

/// [`tuple_grad_outer`] with live-scalar accounting: the cache is live on
/// entry and the output is the only allocation.
pub fn tuple_grad_outer_metered(cache: &LowRankGradCache, meter: &mut MemoryMeter) -> Result<FlatGrad> {
    meter.alloc(cache.stored_scalars());
    let out_len: usize = cache.shapes.iter().map(|(r, c)| r * c).sum();
    meter.alloc(out_len);
    let out = tuple_grad_outer(cache)?;
    meter.free(cache.stored_scalars());
    Ok(out)
}

/// Reference assembly: materializes every per-token outer product `g_t·h_tᵀ`
/// of a layer, then sums them.
pub fn tuple_grad_naive(cache: &LowRankGradCache) -> Result<FlatGrad> {
    tuple_grad_naive_metered(cache, &mut MemoryMeter::default())
}

pub fn tuple_grad_naive_metered(cache: &LowRankGradCache, meter: &mut MemoryMeter) -> Result<FlatGrad> {
    check_cache(cache)?;
    meter.alloc(cache.stored_scalars());
    let mut out = FlatGrad::zeros(&cache.shapes);
    meter.alloc(out.len());
    for l in &cache.layers {
        let (p, d) = (l.g.cols(), l.h.cols());
        let per_token: Vec<Mat> = (0..l.g.rows())
            .map(|t| {
                let mut m = Mat::zeros(p, d);
                for i in 0..p {
                    let gi = l.g[(t, i)];
                    for (j, &hj) in l.h.row(t).iter().enumerate() {
                        m[(i, j)] = gi * hj;
                    }
                }
                m
            })
            .collect();
        let stacked = per_token.len() * p * d;
        meter.alloc(stacked);
        let target = &mut out.groups[l.group];
        for m in &per_token {
            for (o, v) in target.iter_mut().zip(m.as_slice()) {
                *o += v;
            }
        }
        if let Some(b) = l.bias_group {
            for t in 0..l.g.rows() {
                for (o, v) in out.groups[b].iter_mut().zip(l.g.row(t)) {
                    *o += v;
                }
            }
        }
        drop(per_token);
        meter.free(stacked);
    }
    if let Some(e) = &cache.embedding {
        let cols = e.grads.cols();
        for (t, &id) in e.ids.iter().enumerate() {
            for (j, v) in e.grads.row(t).iter().enumerate() {
                out.groups[e.group][id as usize * cols + j] += v;
            }
        }
    }
    meter.free(cache.stored_scalars());
    Ok(out)
}

/// `‖Gᵀ·H‖_F²` without forming the product: `⟨G·Gᵀ, H·Hᵀ⟩`.
pub fn layer_norm_sq_gram(layer: &LayerFactors) -> f64 {
    let gg = layer.g.gram();
    let hh = layer.h.gram();
    // Cancellation can leave a tiny negative residue when the gradient is zero.
    dot(gg.as_slice(), hh.as_slice()).max(0.0)
}

pub fn layer_norm_sq_materialized(layer: &LayerFactors) -> f64 {
    layer.g.t_matmul(&layer.h).frobenius_sq()
}

fn bias_norm_sq(layer: &LayerFactors) -> f64 {
    if layer.bias_group.is_some() {
        layer.g.col_sums().iter().map(|x| x * x).sum()
    } else {
        0.0
    }
}

fn embedding_norm_sq(cache: &LowRankGradCache) -> f64 {
    let Some(e) = &cache.embedding else { return 0.0 };
    let mut rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (t, &id) in e.ids.iter().enumerate() {
        let r = rows.entry(id).or_insert_with(|| vec![0.0; e.grads.cols()]);
        axpy(r, 1.0, e.grads.row(t));
    }
    rows.values().flatten().map(|x| x * x).sum()
}

/// Joint Euclidean norm of a tuple's gradient over every trainable group.
/// Layers with `p·d > gram_threshold` take the Gram path.
pub fn tuple_grad_norm(cache: &LowRankGradCache, gram_threshold: usize) -> f64 {
    let mut sq = embedding_norm_sq(cache);
    for l in &cache.layers {
        let pd = l.g.cols() * l.h.cols();
        sq += if pd > gram_threshold {
            layer_norm_sq_gram(l)
        } else {
            layer_norm_sq_materialized(l)
        };
        sq += bias_norm_sq(l);
    }
    sq.sqrt()
}

/// One trainable group of a materialized tuple gradient.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupGrad {
    Dense {
        group: usize,
        values: Vec<f64>,
    },
    /// Rows of a table group; `ids` strictly ascending.
    Rows {
        group: usize,
        cols: usize,
        ids: Vec<u32>,
        values: Vec<f64>,
    },
}

impl GroupGrad {
    pub fn group(&self) -> usize {
        match self {
            GroupGrad::Dense { group, .. } | GroupGrad::Rows { group, .. } => *group,
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            GroupGrad::Dense { values, .. } | GroupGrad::Rows { values, .. } => values,
        }
    }

    fn values_mut(&mut self) -> &mut [f64] {
        match self {
            GroupGrad::Dense { values, .. } | GroupGrad::Rows { values, .. } => values,
        }
    }
}

/// A tuple gradient that keeps embedding tables sparse. Entries are in group
/// order, so [`TupleGrad::norm`] visits non-zeros in the same order as
/// [`FlatGrad::norm`] on the dense equivalent.
#[derive(Debug, Clone, PartialEq)]
pub struct TupleGrad {
    entries: Vec<GroupGrad>,
    shapes: Vec<(usize, usize)>,
}

impl TupleGrad {
    pub fn from_cache(cache: &LowRankGradCache) -> Result<Self> {
        check_cache(cache)?;
        let mut entries = Vec::new();
        for l in &cache.layers {
            entries.push(GroupGrad::Dense {
                group: l.group,
                values: l.g.t_matmul(&l.h).into_vec(),
            });
            if let Some(b) = l.bias_group {
                entries.push(GroupGrad::Dense {
                    group: b,
                    values: l.g.col_sums(),
                });
            }
        }
        if let Some(e) = &cache.embedding {
            let cols = e.grads.cols();
            let mut rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for (t, &id) in e.ids.iter().enumerate() {
                let r = rows.entry(id).or_insert_with(|| vec![0.0; cols]);
                axpy(r, 1.0, e.grads.row(t));
            }
            entries.push(GroupGrad::Rows {
                group: e.group,
                cols,
                ids: rows.keys().copied().collect(),
                values: rows.into_values().flatten().collect(),
            });
        }
        entries.sort_by_key(GroupGrad::group);
        Ok(Self {
            entries,
            shapes: cache.shapes.clone(),
        })
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for e in &self.entries {
            for x in e.values() {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for e in &mut self.entries {
            e.values_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.values().iter().all(|x| x.is_finite()))
    }

    pub fn to_flat(&self) -> FlatGrad {
        let mut out = FlatGrad::zeros(&self.shapes);
        for e in &self.entries {
            match e {
                GroupGrad::Dense { group, values } => axpy(&mut out.groups[*group], 1.0, values),
                GroupGrad::Rows {
                    group,
                    cols,
                    ids,
                    values,
                } => {
                    for (r, &id) in ids.iter().enumerate() {
                        let start = id as usize * cols;
                        axpy(
                            &mut out.groups[*group][start..start + cols],
                            1.0,
                            &values[r * cols..(r + 1) * cols],
                        );
                    }
                }
            }
        }
        out
    }

    /// Clips in place to norm `c`; `norm_hint` (e.g. from the Gram path)
    /// sets the scale factor when given. Returns the pre-clip norm used.
    pub fn clip(&mut self, c: f64, norm_hint: Option<f64>) -> f64 {
        let norm = norm_hint.unwrap_or_else(|| self.norm());
        let factor = clip_factor(norm, c);
        if factor < 1.0 {
            self.scale(factor);
        }
        while self.norm() > c {
            self.scale(SHRINK);
        }
        norm
    }
}

/// Guard step applied while rounding leaves a clipped norm above `C`.
const SHRINK: f64 = 1.0 - 4.0 * f64::EPSILON;

/// `1 / max(1, norm/C)`.
pub fn clip_factor(norm: f64, c: f64) -> f64 {
    1.0 / (norm / c).max(1.0)
}

/// `g / max(1, ‖g‖/C)`; the computed norm of the result never exceeds `C`
/// and `g` is returned unchanged when `‖g‖ ≤ C`.
pub fn clip(g: &FlatGrad, c: f64) -> Result<FlatGrad> {
    if !(c > 0.0) {
        return Err(invalid("clip threshold must be positive"));
    }
    let mut out = g.clone();
    let factor = clip_factor(g.norm(), c);
    if factor < 1.0 {
        out.scale(factor);
    }
    while out.norm() > c {
        out.scale(SHRINK);
    }
    Ok(out)
}

const FIXED_ONE: f64 = 18_446_744_073_709_551_616.0; // 2^64
const FIXED_LIMIT: f64 = 1_099_511_627_776.0; // 2^40

fn to_fixed(x: f64) -> Result<i128> {
    if !x.is_finite() {
        return Err(Error::NonFinite("gradient component".into()));
    }
    if x.abs() >= FIXED_LIMIT {
        return Err(Error::NonFinite(format!(
            "gradient component {x:e} beyond the accumulator range"
        )));
    }
    // Scaling by a power of two is exact; truncation keeps |q(x)| <= |x|.
    let y = (x * FIXED_ONE).trunc();
    if y.abs() < 9.0e18 {
        Ok(y as i64 as i128)
    } else {
        Ok(y as i128)
    }
}

fn from_fixed(v: i128) -> f64 {
    v as f64 / FIXED_ONE
}

/// Order-independent sum of clipped tuple gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClippedSum {
    groups: Vec<Vec<i128>>,
    count: usize,
}

impl ClippedSum {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            groups: shapes.iter().map(|&(r, c)| vec![0; r * c]).collect(),
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn add_tuple(&mut self, g: &TupleGrad) -> Result<()> {
        for e in &g.entries {
            match e {
                GroupGrad::Dense { group, values } => {
                    for (acc, &v) in self.groups[*group].iter_mut().zip(values) {
                        *acc += to_fixed(v)?;
                    }
                }
                GroupGrad::Rows {
                    group,
                    cols,
                    ids,
                    values,
                } => {
                    let table = &mut self.groups[*group];
                    for (r, &id) in ids.iter().enumerate() {
                        let start = id as usize * cols;
                        for (acc, &v) in table[start..start + cols]
                            .iter_mut()
                            .zip(&values[r * cols..(r + 1) * cols])
                        {
                            *acc += to_fixed(v)?;
                        }
                    }
                }
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn add_flat(&mut self, g: &FlatGrad) -> Result<()> {
        if g.groups.len() != self.groups.len() {
            return Err(Error::Shape("gradient group layouts differ".into()));
        }
        for (acc, vals) in self.groups.iter_mut().zip(&g.groups) {
            if acc.len() != vals.len() {
                return Err(Error::Shape("gradient group layouts differ".into()));
            }
            for (a, &v) in acc.iter_mut().zip(vals) {
                *a += to_fixed(v)?;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn to_flat(&self) -> FlatGrad {
        FlatGrad {
            groups: self
                .groups
                .iter()
                .map(|g| g.iter().map(|&v| from_fixed(v)).collect())
                .collect(),
        }
    }

    /// Exact difference `self − other`, converted to floating point.
    pub fn difference(&self, other: &ClippedSum) -> FlatGrad {
        FlatGrad {
            groups: self
                .groups
                .iter()
                .zip(&other.groups)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| from_fixed(x - y)).collect())
                .collect(),
        }
    }
}

/// Where the Gaussian noise enters the batch sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePlacement {
    /// One draw of `N(0, σ²C²I)` added to the clipped sum.
    #[default]
    Once,
    /// One draw per sampled tuple. Implemented as a single draw with standard
    /// deviation `√n·σC`, which has the same distribution.
    PerTuple,
}

/// Adds Gaussian noise to `sum` and divides by the expected batch size.
pub fn noisy_average<R: Rng + ?Sized>(
    mut sum: FlatGrad,
    n_tuples: usize,
    clip_norm: f64,
    sigma: f64,
    expected_batch: usize,
    placement: NoisePlacement,
    rng: &mut R,
) -> FlatGrad {
    let draws = match placement {
        NoisePlacement::Once => 1.0,
        NoisePlacement::PerTuple => n_tuples as f64,
    };
    let std = sigma * clip_norm * draws.sqrt();
    if std > 0.0 {
        for x in sum.groups.iter_mut().flatten() {
            let z: f64 = rng.sample(StandardNormal);
            *x += std * z;
        }
    }
    sum.scale(1.0 / expected_batch as f64);
    sum
}

/// `(Σ Clip(g_i, C) + N(0, σ²C²I)) / b`. Noise is drawn even for an empty
/// batch; `b` is the expected batch size.
pub fn privatize_batch<R: Rng + ?Sized>(
    tuple_grads: &[FlatGrad],
    shapes: &[(usize, usize)],
    clip_norm: f64,
    sigma: f64,
    expected_batch: usize,
    rng: &mut R,
) -> Result<FlatGrad> {
    if expected_batch == 0 {
        return Err(invalid("expected batch size must be at least 1"));
    }
    if !(sigma >= 0.0) {
        return Err(invalid("noise multiplier must be non-negative"));
    }
    let mut sum = ClippedSum::new(shapes);
    for g in tuple_grads {
        if !g.is_finite() {
            return Err(Error::NonFinite("tuple gradient".into()));
        }
        sum.add_flat(&clip(g, clip_norm)?)?;
    }
    Ok(noisy_average(
        sum.to_flat(),
        tuple_grads.len(),
        clip_norm,
        sigma,
        expected_batch,
        NoisePlacement::Once,
        rng,
    ))
}
