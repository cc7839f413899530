//! Experiment configuration: a TOML file whose sections mirror the library
//! modules. Every key is also a command-line flag; a flag that disagrees with
//! the file wins and prints a warning.
//!
//! ```toml
//! seed = 7
//!
//! [graph]
//! entities = 2000
//! communities = 20
//! p_in = 0.2
//! p_out = 0.0005
//! vocab_size = 500
//! eval_fraction = 0.1
//!
//! [encoder]
//! embed_dim = 32
//! blocks = [32]
//! mode = "full"          # or "adapter" with adapter_rank / adapter_alpha
//!
//! [sampler]
//! negatives = 8
//! batch_size = 256
//!
//! [objective]
//! loss = "infonce"       # or "hinge"
//! temperature = 1.0
//!
//! [privacy]
//! clip = 1.0
//! epsilon = 10.0         # or sigma, never both
//!
//! [optim]
//! optimizer = "adam"
//! learning_rate = 0.01
//! steps = 2000
//!
//! [evaluation]
//! eval_batch = 256
//! mia_pairs = 2000
//! ```

use std::fmt::Debug;
use std::path::Path;

use anyhow::Context;
use clap::{Args, ValueEnum};
use dprel::encoder::{EncoderArch, TrainMode};
use dprel::eval::{ProbeConfig, DEFAULT_EVAL_BATCH};
use dprel::graph::SynthConfig;
use dprel::mia::DEFAULT_MIA_PAIRS;
use dprel::objective::LossKind;
use dprel::optim::{LrSchedule, OptimizerKind};
use dprel::privacy::NoisePlacement;
use dprel::train::{PrivacySpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{CliError, Category};

/// Copies every flag that is set into the config section, warning when it
/// replaces a different value from the file.
macro_rules! section {
    ($(#[$meta:meta])* $name:ident { $($(#[$fmeta:meta])* $field:ident : $ty:ty),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(#[arg(long)] $(#[$fmeta])* #[serde(default, skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl $name {
            pub fn merge_flags(&mut self, flags: &Self, section: &str) {
                $(overlay(&mut self.$field, &flags.$field, section, stringify!($field));)*
            }
        }
    };
}

fn overlay<T: Clone + PartialEq + Debug>(file: &mut Option<T>, flag: &Option<T>, section: &str, key: &str) {
    if let Some(v) = flag {
        if let Some(old) = file.as_ref().filter(|old| *old != v) {
            eprintln!(
                "warning: --{} {v:?} overrides [{section}] {key} = {old:?} from the config file",
                key.replace('_', "-")
            );
        }
        *file = Some(v.clone());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Infonce,
    Hinge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Linear,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Once,
    PerTuple,
}

section!(GraphSection {
    entities: usize,
    communities: usize,
    p_in: f64,
    p_out: f64,
    vocab_size: usize,
    min_tokens: usize,
    max_tokens: usize,
    topic_weight: f64,
    eval_fraction: f64,
});

section!(EncoderSection {
    embed_dim: usize,
    /// Hidden widths, comma separated.
    #[arg(value_delimiter = ',')]
    blocks: Vec<usize>,
    mode: Mode,
    adapter_rank: usize,
    adapter_alpha: f64,
});

section!(SamplerSection {
    negatives: usize,
    batch_size: usize,
    sampling_ratio: f64,
});

section!(ObjectiveSection {
    loss: Loss,
    temperature: f64,
    margin: f64,
});

section!(PrivacySection {
    clip: f64,
    sigma: f64,
    epsilon: f64,
    delta: f64,
    noise_placement: Placement,
});

section!(OptimSection {
    optimizer: Optimizer,
    learning_rate: f64,
    steps: u64,
    schedule: Schedule,
    gram_threshold: usize,
});

section!(EvaluationSection {
    eval_batch: usize,
    shots: usize,
    probe_epochs: usize,
    probe_lr: f64,
    mia_pairs: usize,
    histogram_bins: usize,
});

section!(AccountantSection {
    q: f64,
    #[arg(id = "account_sigma", long = "sigma")]
    sigma: f64,
    #[arg(id = "account_steps", long = "steps")]
    steps: u64,
    #[arg(id = "account_delta", long = "delta")]
    delta: f64,
    #[arg(id = "account_epsilon", long = "epsilon")]
    epsilon: f64,
});

section!(RrSection {
    #[arg(id = "rr_epsilon", long = "epsilon")]
    epsilon: f64,
    allow_large: bool,
});

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub graph: GraphSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub objective: ObjectiveSection,
    #[serde(default)]
    pub privacy: PrivacySection,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub accountant: AccountantSection,
    #[serde(default)]
    pub rr: RrSection,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        if !path.exists() {
            return Err(CliError::new(Category::Input, format!("config file {} not found", path.display())).into());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| CliError::new(Category::Config, format!("{}: {e}", path.display())).into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn synth(&self) -> SynthConfig {
        let g = &self.graph;
        let mut s = SynthConfig::new(
            g.entities.unwrap_or(2000),
            g.communities.unwrap_or(20),
            g.p_in.unwrap_or(0.2),
            g.p_out.unwrap_or(0.0005),
            g.vocab_size.unwrap_or(500),
            self.seed(),
        );
        s.min_tokens = g.min_tokens.unwrap_or(s.min_tokens);
        s.max_tokens = g.max_tokens.unwrap_or(s.max_tokens);
        s.topic_weight = g.topic_weight.unwrap_or(s.topic_weight);
        s
    }

    pub fn eval_fraction(&self) -> f64 {
        self.graph.eval_fraction.unwrap_or(0.1)
    }

    pub fn train(&self, vocab_size: usize) -> anyhow::Result<TrainConfig> {
        let e = &self.encoder;
        let embed = e.embed_dim.unwrap_or(32);
        let blocks = e.blocks.clone().unwrap_or_else(|| vec![32]);
        let mut cfg = TrainConfig::new(EncoderArch::new(vocab_size, embed, blocks), self.seed());
        cfg.mode = match e.mode.unwrap_or(Mode::Full) {
            Mode::Full => TrainMode::Full,
            Mode::Adapter => TrainMode::Adapter {
                rank: e.adapter_rank.unwrap_or(4),
                alpha: e.adapter_alpha.unwrap_or(8.0),
            },
        };
        let o = &self.objective;
        cfg.loss = match o.loss.unwrap_or(Loss::Infonce) {
            Loss::Infonce => LossKind::InfoNce { temperature: o.temperature.unwrap_or(1.0) },
            Loss::Hinge => LossKind::Hinge { margin: o.margin.unwrap_or(1.0) },
        };
        let s = &self.sampler;
        cfg.negatives = s.negatives.unwrap_or(cfg.negatives);
        cfg.batch_size = s.batch_size.unwrap_or(cfg.batch_size);
        cfg.sampling_ratio = s.sampling_ratio;
        let p = &self.privacy;
        if p.sigma.is_some() && p.epsilon.is_some() {
            return Err(CliError::new(
                Category::Config,
                "privacy: set either sigma or epsilon, not both (check the config file and flags)",
            )
            .into());
        }
        cfg.privacy = PrivacySpec {
            clip: p.clip,
            sigma: p.sigma,
            target_epsilon: p.epsilon,
            delta: p.delta,
            noise_placement: match p.noise_placement.unwrap_or(Placement::Once) {
                Placement::Once => NoisePlacement::Once,
                Placement::PerTuple => NoisePlacement::PerTuple,
            },
        };
        let t = &self.optim;
        cfg.optimizer = match t.optimizer.unwrap_or(Optimizer::Adam) {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam => OptimizerKind::default(),
        };
        cfg.learning_rate = t.learning_rate.unwrap_or(1e-2);
        cfg.steps = t.steps.unwrap_or(cfg.steps);
        cfg.schedule = match t.schedule.unwrap_or(Schedule::Constant) {
            Schedule::Constant => LrSchedule::Constant,
            Schedule::Linear => LrSchedule::Linear,
            Schedule::Cosine => LrSchedule::Cosine,
        };
        cfg.gram_threshold = t.gram_threshold.unwrap_or(cfg.gram_threshold);
        Ok(cfg)
    }

    pub fn eval_batch(&self) -> usize {
        self.evaluation.eval_batch.unwrap_or(DEFAULT_EVAL_BATCH)
    }

    pub fn probe(&self) -> ProbeConfig {
        let d = ProbeConfig::default();
        let e = &self.evaluation;
        ProbeConfig {
            shots: e.shots.unwrap_or(d.shots),
            epochs: e.probe_epochs.unwrap_or(d.epochs),
            learning_rate: e.probe_lr.unwrap_or(d.learning_rate),
            seed: self.seed(),
        }
    }

    pub fn mia_pairs(&self) -> usize {
        self.evaluation.mia_pairs.unwrap_or(DEFAULT_MIA_PAIRS)
    }

    pub fn histogram_bins(&self) -> usize {
        self.evaluation.histogram_bins.unwrap_or(20)
    }
}
