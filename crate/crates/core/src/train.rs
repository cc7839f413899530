//! The private training loop: sample → encode → loss → backward → clip →
//! noise → update, with the accountant tracking ε along the way.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{calibrate_sigma, AccountantState, Segment, ACCOUNTANT_KIND};
use crate::encoder::{backward_tuple, encode, EncoderArch, EncoderParams, ForwardTrace, TrainMode};
use crate::error::{invalid, Error, Result};
use crate::graph::{EntityId, Relation, TextAttributedGraph};
use crate::objective::{tuple_loss_grads, LossKind};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::privacy::{
    noisy_average, tuple_grad_norm, ClippedSum, FlatGrad, NoisePlacement, TupleGrad,
    DEFAULT_GRAM_THRESHOLD,
};
use crate::rng;
use crate::sampler::{sample_batch_with_ratio, Batch};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// Per-tuple clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    pub sigma: Option<f64>,
    pub target_epsilon: Option<f64>,
    /// Defaults to `1/|E_train|`.
    pub delta: Option<f64>,
    #[serde(default)]
    pub noise_placement: NoisePlacement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: EncoderArch,
    pub mode: TrainMode,
    pub loss: LossKind,
    pub negatives: usize,
    /// Expected batch size `b`; also the divisor of the noisy average.
    pub batch_size: usize,
    pub steps: u64,
    pub privacy: PrivacySpec,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub gram_threshold: usize,
    pub seed: u64,
    /// Overrides `q = b/|E_train|`.
    pub sampling_ratio: Option<f64>,
}

impl TrainConfig {
    pub fn new(arch: EncoderArch, seed: u64) -> Self {
        Self {
            arch,
            mode: TrainMode::Full,
            loss: LossKind::default(),
            negatives: 8,
            batch_size: 256,
            steps: 1000,
            privacy: PrivacySpec::default(),
            optimizer: OptimizerKind::default(),
            learning_rate: 1e-3,
            schedule: LrSchedule::Constant,
            gram_threshold: DEFAULT_GRAM_THRESHOLD,
            seed,
            sampling_ratio: None,
        }
    }
}

/// Privacy parameters after defaults and calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPrivacy {
    pub clip: Option<f64>,
    pub sigma: f64,
    pub q: f64,
    pub delta: f64,
    pub noise_placement: NoisePlacement,
}

impl ResolvedPrivacy {
    pub fn resolve(cfg: &TrainConfig, n_train: usize) -> Result<Self> {
        if n_train == 0 {
            return Err(Error::EmptyRelations);
        }
        if cfg.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        let q = match cfg.sampling_ratio {
            Some(q) => q,
            None => cfg.batch_size as f64 / n_train as f64,
        };
        if !(q > 0.0 && q <= 1.0) {
            return Err(invalid(format!(
                "sampling ratio {q} outside (0, 1]; batch size may exceed the training set"
            )));
        }
        let p = &cfg.privacy;
        let delta = p.delta.unwrap_or(1.0 / n_train as f64);
        if !(delta > 0.0 && delta < 1.0) {
            return Err(invalid("delta must lie in (0, 1)"));
        }
        if let Some(c) = p.clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("clip threshold must be positive and finite"));
            }
        }
        let sigma = match (p.sigma, p.target_epsilon) {
            (Some(_), Some(_)) => {
                return Err(invalid("set either sigma or a target epsilon, not both"))
            }
            (Some(s), None) => s,
            (None, Some(eps)) => {
                if p.clip.is_none() {
                    return Err(invalid("a target epsilon requires a clip threshold"));
                }
                if cfg.steps == 0 {
                    0.0
                } else {
                    calibrate_sigma(eps, delta, q, cfg.steps)?
                }
            }
            (None, None) => 0.0,
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid("noise multiplier must be finite and non-negative"));
        }
        if sigma > 0.0 && p.clip.is_none() {
            return Err(invalid("noise requires a clip threshold"));
        }
        Ok(Self {
            clip: p.clip,
            sigma,
            q,
            delta,
            noise_placement: p.noise_placement,
        })
    }

    /// Whether the run carries a finite (ε, δ) guarantee.
    pub fn is_private(&self) -> bool {
        self.clip.is_some() && self.sigma > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub realized_batch: usize,
    /// Mean tuple loss over the realized batch (0 for an empty batch).
    pub loss: f64,
    pub grad_norm_median: f64,
    /// `None` when the run has no finite guarantee.
    pub epsilon_so_far: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub clip: Option<f64>,
    pub sigma: f64,
    pub q: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: Option<f64>,
    pub accountant_kind: String,
}

/// Pre-noise result of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub sum: ClippedSum,
    pub losses: Vec<f64>,
    /// Pre-clip tuple gradient norms.
    pub norms: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Encodes every distinct entity of a batch once.
pub fn encode_entities(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    entities: &[EntityId],
) -> Result<BTreeMap<EntityId, ForwardTrace>> {
    let traces: Vec<(EntityId, ForwardTrace)> = entities
        .par_iter()
        .map(|&e| encode(params, graph.attributes(e)).map(|(_, t)| (e, t)))
        .collect::<Result<_>>()?;
    Ok(traces.into_iter().collect())
}

/// Loss and clipped gradient of every tuple of `batch`, summed in fixed point.
/// With `clip = None` the raw gradients are summed.
pub fn batch_gradient(
    params: &EncoderParams,
    graph: &TextAttributedGraph,
    batch: &Batch,
    loss: LossKind,
    clip: Option<f64>,
    gram_threshold: usize,
) -> Result<BatchGradient> {
    let mut entities: Vec<EntityId> = batch.tuples.iter().flat_map(|t| t.entities()).collect();
    entities.sort_unstable();
    entities.dedup();
    let traces = encode_entities(params, graph, &entities)?;
    let embeddings: BTreeMap<EntityId, Vec<f64>> =
        traces.iter().map(|(&e, t)| (e, t.embedding.clone())).collect();
    let per_tuple: Vec<(f64, f64, TupleGrad)> = batch
        .tuples
        .par_iter()
        .map(|tuple| {
            let (l, grads) = tuple_loss_grads(tuple, &embeddings, loss)?;
            if !l.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {l} at step {} on relation ({}, {})",
                    batch.step,
                    tuple.positive.lo(),
                    tuple.positive.hi()
                )));
            }
            let cache = backward_tuple(params, tuple, &grads, &traces)?;
            let wide = cache
                .layers
                .iter()
                .any(|f| f.g.cols() * f.h.cols() > gram_threshold);
            let mut g = TupleGrad::from_cache(&cache)?;
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient at step {} on relation ({}, {})",
                    batch.step,
                    tuple.positive.lo(),
                    tuple.positive.hi()
                )));
            }
            let hint = wide.then(|| tuple_grad_norm(&cache, gram_threshold));
            let norm = match clip {
                Some(c) => g.clip(c, hint),
                None => hint.unwrap_or_else(|| g.norm()),
            };
            Ok((l, norm, g))
        })
        .collect::<Result<_>>()?;
    let mut sum = ClippedSum::new(&params_shapes(params));
    let mut losses = Vec::with_capacity(per_tuple.len());
    let mut norms = Vec::with_capacity(per_tuple.len());
    for (l, n, g) in &per_tuple {
        sum.add_tuple(g)?;
        losses.push(*l);
        norms.push(*n);
    }
    Ok(BatchGradient { sum, losses, norms })
}

fn params_shapes(params: &EncoderParams) -> Vec<(usize, usize)> {
    params.group_shapes().iter().map(|s| (s.rows, s.cols)).collect()
}

pub struct Trainer<'g> {
    graph: &'g TextAttributedGraph,
    train: Vec<Relation>,
    cfg: TrainConfig,
    privacy: ResolvedPrivacy,
    params: EncoderParams,
    optimizer: Optimizer,
    accountant: AccountantState,
    step_curve: Vec<f64>,
    step: u64,
}

impl<'g> Trainer<'g> {
    pub fn new(graph: &'g TextAttributedGraph, train: &[Relation], cfg: TrainConfig) -> Result<Self> {
        let params = EncoderParams::init(cfg.arch.clone(), cfg.mode, cfg.seed)?;
        Self::with_params(graph, train, cfg, params)
    }

    /// Starts from given parameters instead of a fresh init.
    pub fn with_params(
        graph: &'g TextAttributedGraph,
        train: &[Relation],
        cfg: TrainConfig,
        params: EncoderParams,
    ) -> Result<Self> {
        if params.arch.vocab_size != graph.vocab_size() {
            return Err(Error::Shape(format!(
                "encoder vocabulary {} differs from the graph's {}",
                params.arch.vocab_size,
                graph.vocab_size()
            )));
        }
        if cfg.negatives + 2 > graph.n_entities() {
            return Err(invalid("too few entities for the requested negatives"));
        }
        if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        let privacy = ResolvedPrivacy::resolve(&cfg, train.len())?;
        let accountant = AccountantState::default();
        let step_curve = accountant.step_curve(privacy.q, privacy.sigma)?;
        let optimizer = Optimizer::new(cfg.optimizer, &params);
        Ok(Self {
            graph,
            train: train.to_vec(),
            cfg,
            privacy,
            params,
            optimizer,
            accountant,
            step_curve,
            step: 0,
        })
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn into_params(self) -> EncoderParams {
        self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn privacy(&self) -> &ResolvedPrivacy {
        &self.privacy
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Batch of 1-based step `step`.
    pub fn batch(&self, step: u64) -> Result<Batch> {
        sample_batch_with_ratio(
            &self.train,
            self.graph.n_entities(),
            step,
            self.privacy.q,
            self.cfg.negatives,
            self.cfg.seed,
        )
    }

    /// Pre-noise clipped sum of step `step` under the current parameters.
    pub fn batch_gradient(&self, step: u64) -> Result<BatchGradient> {
        let batch = self.batch(step)?;
        batch_gradient(
            &self.params,
            self.graph,
            &batch,
            self.cfg.loss,
            self.privacy.clip,
            self.cfg.gram_threshold,
        )
    }

    /// The privatized average gradient `(Σ clipped + noise) / b`.
    pub fn private_gradient(&self, step: u64, bg: &BatchGradient) -> FlatGrad {
        let mut noise_rng = rng::stream(self.cfg.seed, "noise", &[step]);
        noisy_average(
            bg.sum.to_flat(),
            bg.sum.count(),
            self.privacy.clip.unwrap_or(1.0),
            self.privacy.sigma,
            self.cfg.batch_size,
            self.privacy.noise_placement,
            &mut noise_rng,
        )
    }

    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let bg = self.batch_gradient(step)?;
        let grad = self.private_gradient(step, &bg);
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!("private gradient at step {step}")));
        }
        let lr = self
            .cfg
            .schedule
            .rate(self.cfg.learning_rate, self.step, self.cfg.steps);
        self.optimizer.step(&mut self.params, &grad, lr)?;
        if !self.params.all_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        self.accountant.compose_curve(
            &self.step_curve,
            Segment {
                q: self.privacy.q,
                sigma: self.privacy.sigma,
                steps: 1,
            },
        )?;
        self.step = step;
        let n = bg.losses.len();
        Ok(StepRecord {
            step,
            realized_batch: n,
            loss: if n == 0 { 0.0 } else { bg.losses.iter().sum::<f64>() / n as f64 },
            grad_norm_median: median(&bg.norms),
            epsilon_so_far: self.epsilon()?,
        })
    }

    /// Runs the remaining configured steps, handing each record to `log`.
    pub fn run(&mut self, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.step < self.cfg.steps {
            let rec = self.step()?;
            log(&rec)?;
        }
        Ok(())
    }

    /// ε spent so far; `None` without a finite guarantee.
    pub fn epsilon(&self) -> Result<Option<f64>> {
        if self.step == 0 {
            return Ok(Some(0.0));
        }
        if !self.privacy.is_private() {
            return Ok(None);
        }
        Ok(Some(self.accountant.to_epsilon(self.privacy.delta)?.0))
    }

    pub fn report(&self) -> Result<PrivacyReport> {
        Ok(PrivacyReport {
            clip: self.privacy.clip,
            sigma: self.privacy.sigma,
            q: self.privacy.q,
            steps: self.step,
            delta: self.privacy.delta,
            epsilon: self.epsilon()?,
            accountant_kind: ACCOUNTANT_KIND.to_string(),
        })
    }
}

/// Trains for the configured number of steps.
pub fn train(
    graph: &TextAttributedGraph,
    train_relations: &[Relation],
    cfg: TrainConfig,
    log: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<(EncoderParams, PrivacyReport)> {
    let mut t = Trainer::new(graph, train_relations, cfg)?;
    t.run(log)?;
    let report = t.report()?;
    Ok((t.into_params(), report))
}
