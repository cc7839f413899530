//! Text-attributed graph data model, file formats, splits and the synthetic
//! planted-partition generator.
//!
//! File formats (all UTF-8, tab separated, `#` starts a comment line):
//!
//! * entities: `id<TAB>tok,tok,...` (token-id mode) or `id<TAB>raw text`
//!   (text mode, whitespace tokenized through a vocabulary file). Lines of
//!   the form `#! vocab_size=N` / `#! max_tokens=M` are directives.
//! * relations: `u<TAB>v`.
//! * vocabulary: `token<TAB>id` with `id >= 1`.
//! * labels: `id<TAB>class`.
//!
//! Saving writes entities ascending by id and relations ascending by
//! `(min, max)`, so save/load is byte stable.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type EntityId = u32;

/// Reserved padding token; never produced by tokenization.
pub const PAD_ID: u32 = 0;

pub const DEFAULT_MAX_TOKENS: usize = 32;

/// A padded token sequence of fixed capacity `max_tokens`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<u32>,
    length: usize,
}

impl TokenSeq {
    /// Truncates to `max_tokens` and pads with [`PAD_ID`].
    pub fn new(tokens: &[u32], max_tokens: usize) -> Result<Self> {
        if max_tokens == 0 {
            return Err(invalid("max_tokens must be at least 1"));
        }
        if tokens.is_empty() {
            return Err(invalid("token sequence is empty"));
        }
        if tokens.contains(&PAD_ID) {
            return Err(invalid("token id 0 is reserved for padding"));
        }
        let length = tokens.len().min(max_tokens);
        let mut ids = vec![PAD_ID; max_tokens];
        ids[..length].copy_from_slice(&tokens[..length]);
        Ok(Self { ids, length })
    }

    /// All positions including padding.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// The real (non-pad) tokens.
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.length]
    }

    pub fn len(&self) -> usize {
        self.length
    }

    pub fn is_empty(&self) -> bool {
        self.length == 0
    }

    pub fn max_tokens(&self) -> usize {
        self.ids.len()
    }

    /// Same tokens with a larger padded capacity.
    pub fn repadded(&self, max_tokens: usize) -> Self {
        let mut ids = vec![PAD_ID; max_tokens.max(self.length)];
        ids[..self.length].copy_from_slice(self.tokens());
        Self {
            ids,
            length: self.length,
        }
    }
}

/// An undirected relation stored as `(min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    lo: EntityId,
    hi: EntityId,
}

impl Relation {
    /// `None` for self-loops.
    pub fn new(u: EntityId, v: EntityId) -> Option<Self> {
        match u.cmp(&v) {
            std::cmp::Ordering::Less => Some(Self { lo: u, hi: v }),
            std::cmp::Ordering::Greater => Some(Self { lo: v, hi: u }),
            std::cmp::Ordering::Equal => None,
        }
    }

    pub fn lo(&self) -> EntityId {
        self.lo
    }

    pub fn hi(&self) -> EntityId {
        self.hi
    }

    pub fn has(&self, e: EntityId) -> bool {
        self.lo == e || self.hi == e
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextAttributedGraph {
    attributes: Vec<TokenSeq>,
    relations: Vec<Relation>,
    vocab_size: usize,
}

impl TextAttributedGraph {
    /// Validates and canonicalizes. Relations are deduplicated regardless of
    /// orientation.
    pub fn new(
        attributes: Vec<TokenSeq>,
        relations: impl IntoIterator<Item = (EntityId, EntityId)>,
        vocab_size: usize,
    ) -> Result<Self> {
        let n = attributes.len();
        if let Some(seq) = attributes.first() {
            let m = seq.max_tokens();
            if attributes.iter().any(|s| s.max_tokens() != m) {
                return Err(invalid("entities disagree on max_tokens"));
            }
        }
        for (id, seq) in attributes.iter().enumerate() {
            if let Some(&t) = seq.tokens().iter().find(|&&t| t as usize >= vocab_size) {
                return Err(invalid(format!(
                    "entity {id}: token id {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        let mut rels = Vec::new();
        for (u, v) in relations {
            if u as usize >= n || v as usize >= n {
                return Err(Error::DanglingEndpoint { u, v, n_entities: n });
            }
            rels.push(Relation::new(u, v).ok_or_else(|| invalid(format!("self-loop on {u}")))?);
        }
        rels.sort_unstable();
        rels.dedup();
        if rels.is_empty() {
            return Err(Error::EmptyRelations);
        }
        Ok(Self {
            attributes,
            relations: rels,
            vocab_size,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.attributes.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_tokens(&self) -> usize {
        self.attributes.first().map_or(DEFAULT_MAX_TOKENS, TokenSeq::max_tokens)
    }

    pub fn attributes(&self, id: EntityId) -> &TokenSeq {
        &self.attributes[id as usize]
    }

    /// Relations in canonical order.
    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn has_relation(&self, u: EntityId, v: EntityId) -> bool {
        Relation::new(u, v).is_some_and(|r| self.relations.binary_search(&r).is_ok())
    }

    /// Copy of the graph with a different relation set over the same
    /// entities.
    pub fn with_relations(&self, relations: &[Relation]) -> Result<Self> {
        Self::new(
            self.attributes.clone(),
            relations.iter().map(|r| (r.lo, r.hi)),
            self.vocab_size,
        )
    }

    pub fn save(&self, entities_path: &Path, relations_path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "#! vocab_size={}", self.vocab_size).unwrap();
        writeln!(out, "#! max_tokens={}", self.max_tokens()).unwrap();
        for (id, seq) in self.attributes.iter().enumerate() {
            let toks: Vec<String> = seq.tokens().iter().map(u32::to_string).collect();
            writeln!(out, "{id}\t{}", toks.join(",")).unwrap();
        }
        fs::write(entities_path, out)?;
        write_relations(relations_path, &self.relations)
    }
}

/// Token-string → id map for raw-text entity files.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut ids = HashMap::new();
        for (lineno, line) in data_lines(&text) {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, lineno, "expected token<TAB>id"))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| parse_err(path, lineno, "bad token id"))?;
            if id == PAD_ID {
                return Err(parse_err(path, lineno, "token id 0 is reserved for padding"));
            }
            ids.insert(tok.to_string(), id);
        }
        Ok(Self { ids })
    }

    pub fn from_pairs<I: IntoIterator<Item = (String, u32)>>(pairs: I) -> Result<Self> {
        let ids: HashMap<_, _> = pairs.into_iter().collect();
        if ids.values().any(|&v| v == PAD_ID) {
            return Err(invalid("token id 0 is reserved for padding"));
        }
        Ok(Self { ids })
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    /// Smallest vocabulary size covering every id.
    pub fn size(&self) -> usize {
        self.ids.values().max().map_or(1, |&m| m as usize + 1)
    }
}

#[derive(Debug, Clone)]
pub enum EntityFormat {
    TokenIds,
    /// Whitespace-tokenized text; tokens missing from the vocabulary are
    /// skipped.
    RawText(Vocab),
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: EntityFormat,
    /// Overrides the `#! max_tokens` directive.
    pub max_tokens: Option<usize>,
    /// Overrides the `#! vocab_size` directive.
    pub vocab_size: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: EntityFormat::TokenIds,
            max_tokens: None,
            vocab_size: None,
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

pub fn load_graph(
    entities_path: &Path,
    relations_path: &Path,
    opts: &LoadOptions,
) -> Result<TextAttributedGraph> {
    let text = fs::read_to_string(entities_path)?;
    let mut directive_vocab = None;
    let mut directive_max = None;
    for line in text.lines().filter_map(|l| l.strip_prefix("#!")) {
        if let Some((k, v)) = line.trim().split_once('=') {
            let v: usize = v.trim().parse().map_err(|_| {
                invalid(format!("bad directive value in {}", entities_path.display()))
            })?;
            match k.trim() {
                "vocab_size" => directive_vocab = Some(v),
                "max_tokens" => directive_max = Some(v),
                _ => {}
            }
        }
    }
    let max_tokens = opts
        .max_tokens
        .or(directive_max)
        .unwrap_or(DEFAULT_MAX_TOKENS);

    let mut rows: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (lineno, line) in data_lines(&text) {
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(entities_path, lineno, "expected id<TAB>attributes"))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| parse_err(entities_path, lineno, "bad entity id"))?;
        let tokens: Vec<u32> = match &opts.format {
            EntityFormat::TokenIds => body
                .split(',')
                .map(|t| t.trim().parse::<u32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(entities_path, lineno, "bad token id list"))?,
            EntityFormat::RawText(vocab) => body.split_whitespace().filter_map(|t| vocab.get(t)).collect(),
        };
        if tokens.is_empty() {
            return Err(parse_err(entities_path, lineno, "entity has no tokens"));
        }
        if tokens.contains(&PAD_ID) {
            return Err(parse_err(entities_path, lineno, "token id 0 is reserved for padding"));
        }
        if rows.insert(id, tokens).is_some() {
            return Err(parse_err(entities_path, lineno, format!("duplicate entity {id}")));
        }
    }
    let n = rows.len();
    if let Some((&last, _)) = rows.iter().next_back() {
        if last as usize != n - 1 {
            return Err(invalid(format!(
                "entity ids must be exactly 0..{n}; found max id {last}"
            )));
        }
    }
    let observed_vocab = rows
        .values()
        .flat_map(|t| t.iter())
        .max()
        .map_or(1, |&m| m as usize + 1);
    let vocab_size = match &opts.format {
        EntityFormat::RawText(v) => opts.vocab_size.unwrap_or(v.size()),
        EntityFormat::TokenIds => opts
            .vocab_size
            .or(directive_vocab)
            .unwrap_or(observed_vocab),
    };
    let attributes = rows
        .values()
        .map(|t| TokenSeq::new(t, max_tokens))
        .collect::<Result<Vec<_>>>()?;
    let relations = read_relations(relations_path)?;
    TextAttributedGraph::new(attributes, relations, vocab_size)
}

/// Reads `u<TAB>v` lines; self-loops are rejected with their line number.
pub fn read_relations(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in data_lines(&text) {
        let mut fields = line.split('\t');
        let (Some(u), Some(v), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(path, lineno, "expected u<TAB>v"));
        };
        let u: u32 = u
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad entity id"))?;
        let v: u32 = v
            .trim()
            .parse()
            .map_err(|_| parse_err(path, lineno, "bad entity id"))?;
        if u == v {
            return Err(parse_err(path, lineno, "self-loop"));
        }
        out.push((u, v));
    }
    Ok(out)
}

pub fn write_relations(path: &Path, relations: &[Relation]) -> Result<()> {
    let mut sorted = relations.to_vec();
    sorted.sort_unstable();
    let mut out = String::with_capacity(sorted.len() * 12);
    for r in &sorted {
        writeln!(out, "{}\t{}", r.lo, r.hi).unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Relations read from a split file, validated against a graph.
pub fn load_relation_subset(path: &Path, graph: &TextAttributedGraph) -> Result<Vec<Relation>> {
    let n = graph.n_entities();
    let mut out = Vec::new();
    for (u, v) in read_relations(path)? {
        if u as usize >= n || v as usize >= n {
            return Err(Error::DanglingEndpoint { u, v, n_entities: n });
        }
        out.push(Relation::new(u, v).expect("self-loops rejected by read_relations"));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<BTreeMap<EntityId, u32>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in data_lines(&text) {
        let (id, class) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, lineno, "expected id<TAB>class"))?;
        let id = id.trim().parse().map_err(|_| parse_err(path, lineno, "bad entity id"))?;
        let class = class.trim().parse().map_err(|_| parse_err(path, lineno, "bad class"))?;
        out.insert(id, class);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &BTreeMap<EntityId, u32>) -> Result<()> {
    let mut out = String::new();
    for (id, class) in labels {
        writeln!(out, "{id}\t{class}").unwrap();
    }
    fs::write(path, out)?;
    Ok(())
}

/// Disjoint train/eval relation sets plus optional entity labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSplit {
    pub train: Vec<Relation>,
    pub eval: Vec<Relation>,
    pub labels: Option<BTreeMap<EntityId, u32>>,
}

/// Seeded split with `round(eval_fraction · |E|)` eval relations.
pub fn split_relations(
    graph: &TextAttributedGraph,
    eval_fraction: f64,
    seed: u64,
) -> Result<GraphSplit> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(invalid("eval_fraction must lie in (0, 1)"));
    }
    let total = graph.relations().len();
    if total < 2 {
        return Err(invalid("need at least two relations to split"));
    }
    let n_eval = (eval_fraction * total as f64).round() as usize;
    if n_eval == 0 || n_eval >= total {
        return Err(invalid(format!(
            "eval_fraction {eval_fraction} leaves an empty side ({n_eval} of {total} for eval)"
        )));
    }
    let mut shuffled = graph.relations().to_vec();
    shuffled.shuffle(&mut rng::stream(seed, "split", &[]));
    let mut eval = shuffled[..n_eval].to_vec();
    let mut train = shuffled[n_eval..].to_vec();
    eval.sort_unstable();
    train.sort_unstable();
    Ok(GraphSplit {
        train,
        eval,
        labels: None,
    })
}

/// Planted-partition generator parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub n_entities: usize,
    pub n_communities: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub vocab_size: usize,
    pub seed: u64,
    /// Token sequence lengths are uniform in `min_tokens..=max_tokens`.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability that a token comes from the entity's community topic block
    /// rather than the whole vocabulary.
    pub topic_weight: f64,
}

impl SynthConfig {
    pub fn new(
        n_entities: usize,
        n_communities: usize,
        p_in: f64,
        p_out: f64,
        vocab_size: usize,
        seed: u64,
    ) -> Self {
        Self {
            n_entities,
            n_communities,
            p_in,
            p_out,
            vocab_size,
            seed,
            min_tokens: 4,
            max_tokens: 8,
            topic_weight: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthGraph {
    pub graph: TextAttributedGraph,
    /// Community of every entity, usable as classification labels.
    pub communities: Vec<u32>,
}

impl SynthGraph {
    pub fn labels(&self) -> BTreeMap<EntityId, u32> {
        self.communities
            .iter()
            .enumerate()
            .map(|(i, &c)| (i as u32, c))
            .collect()
    }
}

/// Community of entity `i` under the contiguous block assignment.
pub fn community_of(i: usize, n_entities: usize, n_communities: usize) -> usize {
    i * n_communities / n_entities
}

pub fn synth_graph(cfg: &SynthConfig) -> Result<SynthGraph> {
    let SynthConfig {
        n_entities: n,
        n_communities: c,
        p_in,
        p_out,
        vocab_size,
        ..
    } = *cfg;
    if c == 0 || n < c {
        return Err(invalid("need n_entities >= n_communities >= 1"));
    }
    if !(0.0..=1.0).contains(&p_out) || !(0.0..=1.0).contains(&p_in) || p_in <= p_out {
        return Err(invalid("need 1 >= p_in > p_out >= 0"));
    }
    if vocab_size < 2 {
        return Err(invalid("vocab_size must be at least 2"));
    }
    if cfg.min_tokens == 0 || cfg.min_tokens > cfg.max_tokens {
        return Err(invalid("need 1 <= min_tokens <= max_tokens"));
    }
    if !(0.0..=1.0).contains(&cfg.topic_weight) {
        return Err(invalid("topic_weight must lie in [0, 1]"));
    }
    let mut rng = rng::stream(cfg.seed, "synth", &[]);
    let communities: Vec<u32> = (0..n).map(|i| community_of(i, n, c) as u32).collect();

    let mut relations = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if communities[u] == communities[v] { p_in } else { p_out };
            if rng.gen::<f64>() < p {
                relations.push((u as u32, v as u32));
            }
        }
    }
    if relations.is_empty() {
        return Err(Error::EmptyRelations);
    }

    // Ids 1..vocab_size are split into one contiguous topic block per
    // community (blocks wrap when there are more communities than tokens).
    let usable = vocab_size - 1;
    let block = (usable / c).max(1);
    let mut attributes = Vec::with_capacity(n);
    for &comm in &communities {
        let len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
        let start = (comm as usize * block) % usable;
        let toks: Vec<u32> = (0..len)
            .map(|_| {
                let id = if rng.gen::<f64>() < cfg.topic_weight {
                    (start + rng.gen_range(0..block)) % usable
                } else {
                    rng.gen_range(0..usable)
                };
                id as u32 + 1
            })
            .collect();
        attributes.push(TokenSeq::new(&toks, cfg.max_tokens)?);
    }
    Ok(SynthGraph {
        graph: TextAttributedGraph::new(attributes, relations, vocab_size)?,
        communities,
    })
}
