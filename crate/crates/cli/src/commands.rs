//! Subcommand bodies. Each writes line-delimited JSON records to stdout and,
//! when it has an output directory, the same records plus a `manifest.json`
//! describing how to reproduce them.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use dprel::accountant::{calibrate_sigma, epsilon_for, AccountantState};
use dprel::checkpoint::{load_checkpoint, save_checkpoint};
use dprel::encoder::EncoderParams;
use dprel::eval::{embed_all, evaluate_relations, linear_probe};
use dprel::graph::{
    load_graph, load_relation_subset, read_labels, split_relations, synth_graph, write_labels,
    write_relations, EntityFormat, LoadOptions, TextAttributedGraph, Vocab,
};
use dprel::mia::{audit, histogram};
use dprel::rr::{expected_output_size, randomized_response};
use dprel::train::{train, PrivacyReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::Config;
use crate::{Category, CliError};

pub const ENTITIES: &str = "entities.tsv";
pub const RELATIONS: &str = "relations.tsv";
pub const LABELS: &str = "labels.tsv";
pub const TRAIN: &str = "train.tsv";
pub const EVAL: &str = "eval.tsv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct IngestIo {
    #[arg(long)]
    pub entities: PathBuf,
    #[arg(long)]
    pub relations: PathBuf,
    /// Vocabulary file; switches entity parsing to raw text.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OutIo {
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct OptOutIo {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SplitIo {
    /// Directory holding entities.tsv and relations.tsv.
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainIo {
    #[arg(long)]
    pub graph: PathBuf,
    /// Training relations (default: the graph's train.tsv).
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write every n-th step to train_log.jsonl.
    #[arg(long, default_value_t = 1)]
    pub log_every: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalIo {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Held-out relations (default: the graph's eval.tsv).
    #[arg(long)]
    pub relations: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ProbeIo {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Entity labels (default: the graph's labels.tsv).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AttackIo {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Training relations (default: the graph's train.tsv).
    #[arg(long)]
    pub members: Option<PathBuf>,
    /// Relations never trained on (default: the graph's eval.tsv).
    #[arg(long)]
    pub nonmembers: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RrIo {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", content = "io", rename_all = "kebab-case")]
pub enum Job {
    Ingest(IngestIo),
    Synth(OutIo),
    Split(SplitIo),
    Train(TrainIo),
    Eval(EvalIo),
    Probe(ProbeIo),
    Attack(AttackIo),
    Account(OptOutIo),
    Calibrate(OptOutIo),
    RrBaseline(RrIo),
}

impl Job {
    fn out(&self) -> Option<&Path> {
        match self {
            Job::Ingest(io) => Some(&io.out),
            Job::Synth(io) => Some(&io.out),
            Job::Split(io) => Some(&io.out),
            Job::Train(io) => Some(&io.out),
            Job::RrBaseline(io) => Some(&io.out),
            Job::Eval(io) => io.out.as_deref(),
            Job::Probe(io) => io.out.as_deref(),
            Job::Attack(io) => io.out.as_deref(),
            Job::Account(io) | Job::Calibrate(io) => io.out.as_deref(),
        }
    }

    fn set_out(&mut self, dir: PathBuf) {
        match self {
            Job::Ingest(io) => io.out = dir,
            Job::Synth(io) => io.out = dir,
            Job::Split(io) => io.out = dir,
            Job::Train(io) => io.out = dir,
            Job::RrBaseline(io) => io.out = dir,
            Job::Eval(io) => io.out = Some(dir),
            Job::Probe(io) => io.out = Some(dir),
            Job::Attack(io) => io.out = Some(dir),
            Job::Account(io) | Job::Calibrate(io) => io.out = Some(dir),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Job::Ingest(_) => "ingest",
            Job::Synth(_) => "synth",
            Job::Split(_) => "split",
            Job::Train(_) => "train",
            Job::Eval(_) => "eval",
            Job::Probe(_) => "probe",
            Job::Attack(_) => "attack",
            Job::Account(_) => "account",
            Job::Calibrate(_) => "calibrate",
            Job::RrBaseline(_) => "rr-baseline",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub job: Job,
    /// Fully merged configuration (file plus flags).
    pub config: Config,
    pub seed: u64,
    pub privacy: Option<PrivacyReport>,
    pub outputs: Vec<String>,
}

/// What a finished command leaves behind.
#[derive(Default)]
struct Outcome {
    records: Vec<Value>,
    privacy: Option<PrivacyReport>,
    files: Vec<String>,
}

fn fail(category: Category, msg: impl Into<String>) -> anyhow::Error {
    CliError::new(category, msg).into()
}

fn require(path: &Path) -> anyhow::Result<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(fail(Category::Input, format!("input file {} not found", path.display())))
    }
}

fn required<T: Copy>(value: Option<T>, key: &str) -> anyhow::Result<T> {
    value.ok_or_else(|| fail(Category::Config, format!("missing --{key} (or its config key)")))
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_graph_dir(dir: &Path) -> anyhow::Result<TextAttributedGraph> {
    let g = load_graph(
        require(&dir.join(ENTITIES))?,
        require(&dir.join(RELATIONS))?,
        &LoadOptions::default(),
    )?;
    Ok(g)
}

fn load_model(path: &Path, graph: &TextAttributedGraph) -> anyhow::Result<EncoderParams> {
    let (params, _) = load_checkpoint(require(path)?)?;
    if params.arch.vocab_size < graph.vocab_size() {
        return Err(fail(
            Category::Data,
            format!(
                "checkpoint vocabulary {} is smaller than the graph's {}",
                params.arch.vocab_size,
                graph.vocab_size()
            ),
        ));
    }
    Ok(params)
}

fn or_default(path: &Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    path.clone().unwrap_or_else(|| dir.join(name))
}

pub fn execute(job: &Job, cfg: &Config) -> anyhow::Result<()> {
    if let Some(dir) = job.out() {
        prepare_out(dir)?;
    }
    let outcome = match job {
        Job::Ingest(io) => ingest(io)?,
        Job::Synth(io) => synth(io, cfg)?,
        Job::Split(io) => split(io, cfg)?,
        Job::Train(io) => train_cmd(io, cfg)?,
        Job::Eval(io) => eval_cmd(io, cfg)?,
        Job::Probe(io) => probe(io, cfg)?,
        Job::Attack(io) => attack(io, cfg)?,
        Job::Account(_) => account(cfg)?,
        Job::Calibrate(_) => calibrate(cfg)?,
        Job::RrBaseline(io) => rr_baseline(io, cfg)?,
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    for r in &outcome.records {
        writeln!(lock, "{r}")?;
    }
    if let Some(dir) = job.out() {
        let mut files = outcome.files;
        let metrics = format!("{}.jsonl", job.name());
        write_jsonl(&dir.join(&metrics), &outcome.records)?;
        files.push(metrics);
        let manifest = Manifest {
            tool: "dprel".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            job: job.clone(),
            config: cfg.clone(),
            seed: cfg.seed(),
            privacy: outcome.privacy,
            outputs: files,
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    }
    Ok(())
}

pub fn replay(manifest: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let text = fs::read_to_string(require(manifest)?)?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| fail(Category::Data, format!("{}: {e}", manifest.display())))?;
    let mut job = m.job;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    job.set_out(dir);
    execute(&job, &m.config)
}

fn write_jsonl(path: &Path, records: &[Value]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

fn graph_record(g: &TextAttributedGraph) -> Value {
    json!({
        "entities": g.n_entities(),
        "relations": g.relations().len(),
        "vocab_size": g.vocab_size(),
        "max_tokens": g.max_tokens(),
    })
}

fn ingest(io: &IngestIo) -> anyhow::Result<Outcome> {
    let format = match &io.vocab {
        Some(v) => EntityFormat::RawText(Vocab::load(require(v)?)?),
        None => EntityFormat::TokenIds,
    };
    let opts = LoadOptions {
        format,
        max_tokens: io.max_tokens,
        vocab_size: io.vocab_size,
    };
    let g = load_graph(require(&io.entities)?, require(&io.relations)?, &opts)?;
    g.save(&io.out.join(ENTITIES), &io.out.join(RELATIONS))?;
    let mut files = vec![ENTITIES.to_string(), RELATIONS.to_string()];
    if let Some(path) = &io.labels {
        let labels = read_labels(require(path)?)?;
        if let Some((&id, _)) = labels.iter().find(|(&id, _)| id as usize >= g.n_entities()) {
            return Err(fail(Category::Data, format!("label for unknown entity {id}")));
        }
        write_labels(&io.out.join(LABELS), &labels)?;
        files.push(LABELS.into());
    }
    Ok(Outcome { records: vec![graph_record(&g)], files, ..Outcome::default() })
}

fn synth(io: &OutIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let sg = synth_graph(&cfg.synth())?;
    sg.graph.save(&io.out.join(ENTITIES), &io.out.join(RELATIONS))?;
    write_labels(&io.out.join(LABELS), &sg.labels())?;
    Ok(Outcome {
        records: vec![graph_record(&sg.graph)],
        files: vec![ENTITIES.into(), RELATIONS.into(), LABELS.into()],
        ..Outcome::default()
    })
}

fn split(io: &SplitIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let g = load_graph_dir(&io.graph)?;
    let s = split_relations(&g, cfg.eval_fraction(), cfg.seed())?;
    write_relations(&io.out.join(TRAIN), &s.train)?;
    write_relations(&io.out.join(EVAL), &s.eval)?;
    Ok(Outcome {
        records: vec![json!({ "train": s.train.len(), "eval": s.eval.len() })],
        files: vec![TRAIN.into(), EVAL.into()],
        ..Outcome::default()
    })
}

fn train_cmd(io: &TrainIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let g = load_graph_dir(&io.graph)?;
    let rels = load_relation_subset(require(&or_default(&io.train, &io.graph, TRAIN))?, &g)?;
    let tc = cfg.train(g.vocab_size())?;
    let every = io.log_every.max(1);
    let total = tc.steps;
    let mut log = BufWriter::new(File::create(io.out.join("train_log.jsonl"))?);
    let (params, report) = train(&g, &rels, tc, |rec| {
        if rec.step % every == 0 || rec.step == total {
            let line = serde_json::to_string(rec)?;
            writeln!(log, "{line}")?;
        }
        Ok(())
    })?;
    log.flush()?;
    save_checkpoint(&io.out.join(CHECKPOINT), &params, &[cfg.seed()])?;
    fs::write(io.out.join("privacy.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(Outcome {
        records: vec![json!({ "train_relations": rels.len(), "privacy": report })],
        privacy: Some(report),
        files: vec![CHECKPOINT.into(), "train_log.jsonl".into(), "privacy.json".into()],
    })
}

fn eval_cmd(io: &EvalIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let g = load_graph_dir(&io.graph)?;
    let params = load_model(&io.checkpoint, &g)?;
    let rels = load_relation_subset(require(&or_default(&io.relations, &io.graph, EVAL))?, &g)?;
    let emb = embed_all(&params, &g)?;
    let report = evaluate_relations(&emb, &rels, cfg.eval_batch(), cfg.seed())?;
    Ok(Outcome { records: vec![serde_json::to_value(report)?], ..Outcome::default() })
}

fn probe(io: &ProbeIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let g = load_graph_dir(&io.graph)?;
    let params = load_model(&io.checkpoint, &g)?;
    let labels = read_labels(require(&or_default(&io.labels, &io.graph, LABELS))?)?;
    let emb = embed_all(&params, &g)?;
    let report = linear_probe(&emb, &labels, &cfg.probe())?;
    Ok(Outcome { records: vec![serde_json::to_value(report)?], ..Outcome::default() })
}

fn attack(io: &AttackIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let g = load_graph_dir(&io.graph)?;
    let params = load_model(&io.checkpoint, &g)?;
    let members = load_relation_subset(require(&or_default(&io.members, &io.graph, TRAIN))?, &g)?;
    let nonmembers = load_relation_subset(require(&or_default(&io.nonmembers, &io.graph, EVAL))?, &g)?;
    let report = audit(&params, &g, &members, &nonmembers, cfg.mia_pairs(), cfg.seed())?;
    let mut records = vec![json!({
        "n_pairs": report.n_pairs,
        "tpr_at_fpr": report.tpr_at_fpr.iter().map(|&(f, t)| json!({ "fpr": f, "tpr": t })).collect::<Vec<_>>(),
        "wilcoxon_p": report.wilcoxon_p,
    })];
    let bins = cfg.histogram_bins();
    for (set, scores) in [("member", &report.member_scores), ("nonmember", &report.nonmember_scores)] {
        for (center, count) in histogram(scores, bins, -1.0, 1.0) {
            records.push(json!({ "histogram": set, "center": center, "count": count }));
        }
    }
    let mut files = Vec::new();
    if let Some(dir) = &io.out {
        let scores: Vec<Value> = report
            .member_scores
            .iter()
            .map(|s| json!({ "member": true, "score": s }))
            .chain(report.nonmember_scores.iter().map(|s| json!({ "member": false, "score": s })))
            .collect();
        write_jsonl(&dir.join("scores.jsonl"), &scores)?;
        files.push("scores.jsonl".into());
    }
    Ok(Outcome { records, files, ..Outcome::default() })
}

fn account(cfg: &Config) -> anyhow::Result<Outcome> {
    let a = &cfg.accountant;
    let q = required(a.q, "q")?;
    let sigma = required(a.sigma, "sigma")?;
    let steps = required(a.steps, "steps")?;
    let delta = required(a.delta, "delta")?;
    let mut state = AccountantState::default();
    let mut done = 0;
    let mut records = Vec::new();
    for i in 1..=10u64 {
        let t = (steps * i).div_ceil(10);
        if t == done {
            continue;
        }
        state.compose(q, sigma, t - done)?;
        done = t;
        let (epsilon, order) = state.to_epsilon(delta)?;
        records.push(json!({ "steps": t, "q": q, "sigma": sigma, "delta": delta, "epsilon": epsilon, "order": order }));
    }
    Ok(Outcome { records, ..Outcome::default() })
}

fn calibrate(cfg: &Config) -> anyhow::Result<Outcome> {
    let a = &cfg.accountant;
    let target = required(a.epsilon, "epsilon")?;
    let q = required(a.q, "q")?;
    let steps = required(a.steps, "steps")?;
    let delta = required(a.delta, "delta")?;
    let sigma = calibrate_sigma(target, delta, q, steps)?;
    let achieved = epsilon_for(q, sigma, steps, delta)?;
    Ok(Outcome {
        records: vec![json!({
            "target_epsilon": target, "q": q, "steps": steps, "delta": delta,
            "sigma": sigma, "epsilon": achieved,
        })],
        ..Outcome::default()
    })
}

fn rr_baseline(io: &RrIo, cfg: &Config) -> anyhow::Result<Outcome> {
    let g = load_graph_dir(&io.graph)?;
    let eps = required(cfg.rr.epsilon, "epsilon")?;
    let out = randomized_response(&g, eps, cfg.seed(), cfg.rr.allow_large.unwrap_or(false))?;
    let perturbed = g.with_relations(&out.relations)?;
    perturbed.save(&io.out.join(ENTITIES), &io.out.join(RELATIONS))?;
    Ok(Outcome {
        records: vec![json!({
            "epsilon": eps,
            "flip_probability": out.flip_probability,
            "pairs_visited": out.pairs_visited,
            "input_relations": g.relations().len(),
            "output_relations": out.relations.len(),
            "expected_output_relations": expected_output_size(g.n_entities(), g.relations().len(), eps),
        })],
        files: vec![ENTITIES.into(), RELATIONS.into()],
        ..Outcome::default()
    })
}
