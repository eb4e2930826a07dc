//! Four-dimension quality scores for meta-path instances and Top-K
//! selection.
//!
//! Each dimension is a normalized ratio in `[0, 1]` scaled to `[0, 5]`:
//!
//! - question centrality: one minus the mean hop distance from `q0` to the
//!   distinct questions on the path, relative to the path's edge count;
//! - KC relevance: share of distinct questions on the path that cover the
//!   target concept;
//! - informativeness: distinct `U`/`Q`/`K` nodes over `U`/`Q`/`K`
//!   occurrences, with repeat visits of `q0` and the target concept ignored;
//! - node type diversity: Shannon entropy of the six ability/difficulty level
//!   categories, normalized by `ln 6`.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::{derive_seed, StableHasher};
use crate::irt::Level;
use crate::llm::{bounded_map, ChatMessage, LlmClient};
use crate::mrhin::{InstanceRecord, MetaPathTemplate, Mrhin, NodeId, NodeKind, PathInstance};

pub const MAX_DIMENSION: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreBackend {
    Formula,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathScore {
    pub centrality: f64,
    pub kc_relevance: f64,
    pub informativeness: f64,
    pub diversity: f64,
    pub total: f64,
    pub backend: ScoreBackend,
}

impl PathScore {
    pub fn new(dims: [f64; 4], backend: ScoreBackend) -> Self {
        Self {
            centrality: dims[0],
            kc_relevance: dims[1],
            informativeness: dims[2],
            diversity: dims[3],
            total: dims.iter().sum(),
            backend,
        }
    }

    pub fn dimensions(&self) -> [f64; 4] {
        [
            self.centrality,
            self.kc_relevance,
            self.informativeness,
            self.diversity,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInstance {
    pub instance: PathInstance,
    pub score: PathScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Top,
    Random,
    Lowest,
}

fn distinct_questions(g: &Mrhin, p: &PathInstance) -> Vec<NodeId> {
    let mut seen = HashSet::new();
    p.nodes
        .iter()
        .copied()
        .filter(|&n| g.kind(n) == NodeKind::Question && seen.insert(n))
        .collect()
}

/// Centrality from precomputed hop distances out of `q0`.
pub fn centrality_with(g: &Mrhin, p: &PathInstance, dist_from_q0: &[usize]) -> f64 {
    let hops = p.hops();
    let qs = distinct_questions(g, p);
    if hops == 0 || qs.is_empty() {
        return MAX_DIMENSION;
    }
    let mean = qs
        .iter()
        .map(|q| dist_from_q0[q.index()].min(hops) as f64 / hops as f64)
        .sum::<f64>()
        / qs.len() as f64;
    MAX_DIMENSION * (1.0 - mean).clamp(0.0, 1.0)
}

pub fn centrality(p: &PathInstance, g: &Mrhin) -> f64 {
    let dist = g.distances_from(p.target_question(), p.hops().max(1));
    centrality_with(g, p, &dist)
}

pub fn kc_relevance(p: &PathInstance, g: &Mrhin) -> f64 {
    let qs = distinct_questions(g, p);
    if qs.is_empty() {
        return 0.0;
    }
    let hits = qs.iter().filter(|&&q| g.has_edge(q, p.target_kc)).count();
    MAX_DIMENSION * hits as f64 / qs.len() as f64
}

pub fn informativeness(p: &PathInstance, g: &Mrhin) -> f64 {
    let q0 = p.target_question();
    let (mut q0_seen, mut k_seen) = (false, false);
    let mut distinct = HashSet::new();
    let mut occurrences = 0usize;
    for &n in &p.nodes {
        if !matches!(
            g.kind(n),
            NodeKind::Student | NodeKind::Question | NodeKind::Concept
        ) {
            continue;
        }
        if n == q0 {
            if q0_seen {
                continue;
            }
            q0_seen = true;
        } else if n == p.target_kc {
            if k_seen {
                continue;
            }
            k_seen = true;
        }
        occurrences += 1;
        distinct.insert(n);
    }
    if occurrences == 0 {
        return 0.0;
    }
    MAX_DIMENSION * distinct.len() as f64 / occurrences as f64
}

/// Counts of A/D occurrences in the six level categories, ability first.
pub fn level_histogram(p: &PathInstance, g: &Mrhin) -> [usize; 6] {
    let mut counts = [0usize; 6];
    for &n in &p.nodes {
        let offset = match g.kind(n) {
            NodeKind::Ability => 0,
            NodeKind::Difficulty => 3,
            _ => continue,
        };
        let level = g.level(n).unwrap_or(Level::Medium);
        counts[offset + level.index()] += 1;
    }
    counts
}

pub fn normalized_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 || counts.len() < 2 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (h / (counts.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn diversity(p: &PathInstance, g: &Mrhin) -> f64 {
    MAX_DIMENSION * normalized_entropy(&level_histogram(p, g))
}

pub fn score_with(g: &Mrhin, p: &PathInstance, dist_from_q0: &[usize]) -> PathScore {
    PathScore::new(
        [
            centrality_with(g, p, dist_from_q0),
            kc_relevance(p, g),
            informativeness(p, g),
            diversity(p, g),
        ],
        ScoreBackend::Formula,
    )
}

/// Deterministic formula score.
pub fn score(p: &PathInstance, g: &Mrhin) -> PathScore {
    let dist = g.distances_from(p.target_question(), p.hops().max(1));
    score_with(g, p, &dist)
}

/// Formula scores for a batch; one BFS per distinct `q0`, instances scored in
/// parallel, output in input order.
pub fn score_all(g: &Mrhin, instances: &[PathInstance]) -> Vec<ScoredInstance> {
    let cap = instances.iter().map(PathInstance::hops).max().unwrap_or(1).max(1);
    let roots: Vec<NodeId> = {
        let mut r: Vec<NodeId> = instances.iter().map(|p| p.target_question()).collect();
        r.sort();
        r.dedup();
        r
    };
    let dists: BTreeMap<NodeId, Vec<usize>> = roots
        .par_iter()
        .map(|&q| (q, g.distances_from(q, cap)))
        .collect();
    instances
        .par_iter()
        .map(|p| ScoredInstance {
            instance: p.clone(),
            score: score_with(g, p, &dists[&p.target_question()]),
        })
        .collect()
}

/// Stable tie-break key over the node-id sequence.
pub fn sequence_hash(p: &PathInstance) -> u64 {
    p.nodes
        .iter()
        .fold(StableHasher::new().str(p.template.name), |h, n| h.u64(n.0 as u64))
        .finish_u64()
}

/// Keeps `min(k, len)` instances by mode. Ties in `top`/`lowest` are broken by
/// ascending sequence hash; `random` draws uniformly without replacement.
pub fn select_top_k(
    scored: &[ScoredInstance],
    k: usize,
    mode: SelectionMode,
    seed: u64,
) -> Vec<ScoredInstance> {
    let k = k.min(scored.len());
    match mode {
        SelectionMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, scored.len(), k)
                .into_iter()
                .map(|i| scored[i].clone())
                .collect()
        }
        SelectionMode::Top | SelectionMode::Lowest => {
            let mut keyed: Vec<(f64, u64, usize)> = scored
                .iter()
                .enumerate()
                .map(|(i, s)| (s.score.total, sequence_hash(&s.instance), i))
                .collect();
            keyed.sort_by(|a, b| {
                let by_total = if mode == SelectionMode::Top {
                    b.0.total_cmp(&a.0)
                } else {
                    a.0.total_cmp(&b.0)
                };
                by_total.then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            keyed
                .into_iter()
                .take(k)
                .map(|(_, _, i)| scored[i].clone())
                .collect()
        }
    }
}

/// Applies [`select_top_k`] separately within each template's instances.
pub fn select_per_template(
    scored: &[ScoredInstance],
    k: usize,
    mode: SelectionMode,
    seed: u64,
) -> Vec<ScoredInstance> {
    let mut groups: BTreeMap<usize, Vec<ScoredInstance>> = BTreeMap::new();
    for s in scored {
        groups
            .entry(s.instance.template.index())
            .or_default()
            .push(s.clone());
    }
    groups
        .into_iter()
        .flat_map(|(t, group)| select_top_k(&group, k, mode, derive_seed(seed, "top-k", &[t as u64])))
        .collect()
}

const SCORING_SYSTEM: &str = "You are an expert in educational data mining. You assess the quality \
of meta-path instances sampled from a heterogeneous graph of students (U), questions (Q), \
knowledge concepts (K), ability levels (A) and difficulty levels (D).";

/// Scoring prompt for one instance.
pub fn render_scoring_prompt(p: &PathInstance, g: &Mrhin) -> String {
    let mut out = String::new();
    out.push_str(&format!("Meta-path template: {}\n", p.template.name));
    out.push_str(&format!("Target question: {}\n", g.label(p.target_question())));
    out.push_str(&format!("Target knowledge concept: {}\n", g.label(p.target_kc)));
    out.push_str(&format!("Path ({} nodes):\n", p.nodes.len()));
    for (i, &n) in p.nodes.iter().enumerate() {
        let note = match g.kind(n) {
            NodeKind::Question => {
                let kcs: Vec<&str> = g
                    .neighbors(n, NodeKind::Concept)
                    .iter()
                    .map(|&k| g.raw_id(k))
                    .collect();
                let level = g
                    .neighbors(n, NodeKind::Difficulty)
                    .first()
                    .map(|&d| g.raw_id(d))
                    .unwrap_or("Medium");
                format!(" [kcs: {}; difficulty: {level}]", kcs.join(";"))
            }
            NodeKind::Student => {
                let level = g
                    .neighbors(n, NodeKind::Ability)
                    .first()
                    .map(|&a| g.raw_id(a))
                    .unwrap_or("Medium");
                format!(" [ability: {level}]")
            }
            _ => String::new(),
        };
        out.push_str(&format!("{}. {}{}\n", i + 1, g.label(n), note));
    }
    out.push_str(
        "\nRate the path on four dimensions, each from 0 to 5:\n\
1. Question centrality: does the path keep a star-like structure around the target question, \
with question nodes revisiting it or staying close to it?\n\
2. Knowledge concept relevance: what share of the questions on the path cover the target \
knowledge concept?\n\
3. Informativeness: does each step introduce new student, question or concept nodes rather \
than cycling among a few (ignore repeat visits of the target question and concept)?\n\
4. Node type diversity: are ability and difficulty levels covered completely and in balance?\n\
\nReply with the four scores in braces, in this order: \
{centrality, kc_relevance, informativeness, diversity}\n",
    );
    out
}

fn scores_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*(-?\d+(?:\.\d+)?)\s*";
        Regex::new(&format!(r"\{{{num},{num},{num},{num}\}}")).expect("valid regex")
    })
}

/// Reads four dimension scores from a reply, clamping each into `[0, 5]`.
/// Returns `None` when no `{a, b, c, d}` group is present.
pub fn parse_scores(reply: &str) -> Option<([f64; 4], Vec<String>)> {
    let caps = scores_pattern().captures(reply)?;
    let mut dims = [0.0; 4];
    let mut warnings = Vec::new();
    for (i, slot) in dims.iter_mut().enumerate() {
        let v: f64 = caps[i + 1].parse().ok()?;
        let clamped = v.clamp(0.0, MAX_DIMENSION);
        if clamped != v {
            warnings.push(format!("dimension {} score {v} clamped to {clamped}", i + 1));
        }
        *slot = clamped;
    }
    Some((dims, warnings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmScore {
    pub score: PathScore,
    pub warnings: Vec<String>,
}

/// Asks the LLM for the four dimension scores, retrying malformed replies.
pub fn score_llm(p: &PathInstance, g: &Mrhin, client: &dyn LlmClient) -> Result<LlmScore> {
    let mut messages = vec![
        ChatMessage::system(SCORING_SYSTEM),
        ChatMessage::user(render_scoring_prompt(p, g)),
    ];
    let mut raw = String::new();
    for attempt in 0..=client.max_retries() {
        raw = client.complete(&messages)?;
        if let Some((dims, warnings)) = parse_scores(&raw) {
            for w in &warnings {
                log::warn!("{w}");
            }
            return Ok(LlmScore {
                score: PathScore::new(dims, ScoreBackend::Llm),
                warnings,
            });
        }
        log::debug!("malformed scoring reply on attempt {}", attempt + 1);
        messages.push(ChatMessage::assistant(raw.clone()));
        messages.push(ChatMessage::user(
            "Your reply did not contain the scores. Answer only with four numbers between 0 and 5 \
in braces, for example {4, 3.5, 5, 2}.",
        ));
    }
    Err(Error::Scoring {
        message: format!("no parsable scores after {} retries", client.max_retries()),
        raw,
    })
}

/// LLM scores for a batch under the client's concurrency bound.
pub fn score_all_llm(
    g: &Mrhin,
    instances: &[PathInstance],
    client: &dyn LlmClient,
) -> Result<Vec<ScoredInstance>> {
    bounded_map(instances, client.max_in_flight(), |p| {
        score_llm(p, g, client).map(|s| ScoredInstance {
            instance: p.clone(),
            score: s.score,
        })
    })
    .into_iter()
    .collect()
}

/// Offline stand-in for a scoring LLM: recovers the path from the prompt and
/// answers with the formula scores.
pub struct FormulaEchoClient<'g> {
    graph: &'g Mrhin,
}

impl<'g> FormulaEchoClient<'g> {
    pub fn new(graph: &'g Mrhin) -> Self {
        Self { graph }
    }

    fn recover(&self, prompt: &str) -> Option<PathInstance> {
        let mut template = None;
        let mut target_kc = None;
        let mut nodes = Vec::new();
        let mut in_path = false;
        for line in prompt.lines() {
            if let Some(name) = line.strip_prefix("Meta-path template: ") {
                template = MetaPathTemplate::by_name(name.trim());
            } else if let Some(k) = line.strip_prefix("Target knowledge concept: ") {
                target_kc = self.graph.lookup(k.trim());
            } else if line.starts_with("Path (") {
                in_path = true;
            } else if line.is_empty() {
                in_path = false;
            } else if in_path {
                let (_, rest) = line.split_once(". ")?;
                let label = rest.split(" [").next()?;
                nodes.push(self.graph.lookup(label)?);
            }
        }
        Some(PathInstance {
            template: template?,
            nodes,
            target_kc: target_kc?,
        })
    }
}

impl LlmClient for FormulaEchoClient<'_> {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.content.contains("Meta-path template: "))
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        Ok(match self.recover(prompt) {
            Some(p) => {
                let s = score(&p, self.graph);
                format!(
                    "{{{:.6}, {:.6}, {:.6}, {:.6}}}",
                    s.centrality, s.kc_relevance, s.informativeness, s.diversity
                )
            }
            None => "I could not read the path.".into(),
        })
    }
}

/// Serializable scored-instance record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    #[serde(flatten)]
    pub instance: InstanceRecord,
    pub score: PathScore,
}

impl ScoredRecord {
    pub fn from_scored(g: &Mrhin, s: &ScoredInstance) -> Self {
        Self {
            instance: InstanceRecord::from_instance(g, &s.instance),
            score: s.score,
        }
    }

    pub fn to_scored(&self, g: &Mrhin) -> Result<ScoredInstance> {
        Ok(ScoredInstance {
            instance: self.instance.to_instance(g)?,
            score: self.score,
        })
    }
}
