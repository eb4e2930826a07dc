//! The multi-relationship heterogeneous information network and meta-path
//! instance sampling.
//!
//! Five node kinds (student `U`, question `Q`, knowledge concept `K`, ability
//! level `A`, difficulty level `D`) are joined by four undirected edge kinds:
//! `Q-U`, `Q-K`, `Q-D` and `U-A`. The graph is immutable once built.
//!
//! Walks follow a template's kind pattern and wrap around cyclically: the
//! terminal `Q` of one cycle starts the next until the walk has `walk_len`
//! nodes. At each hop the next node is drawn uniformly among neighbours of
//! the required kind. A walk never bounces straight back through a
//! non-question node, so `Q-K-Q` joins two distinct questions and `U-A-U`
//! two distinct students; it may leave a question the way it came in.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::hashing::StableHasher;
use crate::ids::{KcId, QuestionId, StudentId};
use crate::irt::{IrtModel, Level};

pub const DEFAULT_WALKS: usize = 100;
pub const DEFAULT_WALK_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Student,
    Question,
    Concept,
    Ability,
    Difficulty,
}

impl NodeKind {
    pub const ALL: [NodeKind; 5] = [
        NodeKind::Student,
        NodeKind::Question,
        NodeKind::Concept,
        NodeKind::Ability,
        NodeKind::Difficulty,
    ];

    pub fn letter(self) -> char {
        match self {
            NodeKind::Student => 'U',
            NodeKind::Question => 'Q',
            NodeKind::Concept => 'K',
            NodeKind::Ability => 'A',
            NodeKind::Difficulty => 'D',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.letter() == c)
    }

    fn slot(self) -> usize {
        self as usize
    }

    /// Whether the graph has an edge kind joining `self` and `other`.
    pub fn connects(self, other: NodeKind) -> bool {
        use NodeKind::*;
        matches!(
            (self, other),
            (Question, Student)
                | (Student, Question)
                | (Question, Concept)
                | (Concept, Question)
                | (Question, Difficulty)
                | (Difficulty, Question)
                | (Student, Ability)
                | (Ability, Student)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A meta-path: a node-kind pattern starting and ending with `Q`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetaPathTemplate {
    pub name: &'static str,
    pub kinds: &'static [NodeKind],
}

macro_rules! template {
    ($name:literal, [$($k:ident),+]) => {
        MetaPathTemplate { name: $name, kinds: &[$(template!(@kind $k)),+] }
    };
    (@kind U) => { NodeKind::Student };
    (@kind Q) => { NodeKind::Question };
    (@kind K) => { NodeKind::Concept };
    (@kind A) => { NodeKind::Ability };
    (@kind D) => { NodeKind::Difficulty };
}

/// The four basic meta-paths followed by the ten composites.
pub const TEMPLATES: [MetaPathTemplate; 14] = [
    template!("Q-U-Q", [Q, U, Q]),
    template!("Q-K-Q", [Q, K, Q]),
    template!("Q-D-Q", [Q, D, Q]),
    template!("Q-U-A-U-Q", [Q, U, A, U, Q]),
    template!("Q-K-Q-D-Q", [Q, K, Q, D, Q]),
    template!("Q-D-Q-K-Q", [Q, D, Q, K, Q]),
    template!("Q-U-Q-D-Q", [Q, U, Q, D, Q]),
    template!("Q-D-Q-U-Q", [Q, D, Q, U, Q]),
    template!("Q-K-Q-U-Q", [Q, K, Q, U, Q]),
    template!("Q-U-Q-K-Q", [Q, U, Q, K, Q]),
    template!("Q-K-Q-U-Q-D-Q", [Q, K, Q, U, Q, D, Q]),
    template!("Q-U-Q-K-Q-D-Q", [Q, U, Q, K, Q, D, Q]),
    template!("Q-K-Q-U-A-U-Q", [Q, K, Q, U, A, U, Q]),
    template!("Q-K-Q-U-Q-D-Q-U-A-U-Q", [Q, K, Q, U, Q, D, Q, U, A, U, Q]),
];

impl MetaPathTemplate {
    pub fn registry() -> &'static [MetaPathTemplate] {
        &TEMPLATES
    }

    pub fn by_name(name: &str) -> Option<MetaPathTemplate> {
        TEMPLATES.iter().copied().find(|t| t.name == name)
    }

    /// Hops per cycle.
    pub fn period(&self) -> usize {
        self.kinds.len() - 1
    }

    /// Kind required at position `i` of a cyclically extended walk.
    pub fn kind_at(&self, i: usize) -> NodeKind {
        self.kinds[i % self.period()]
    }

    pub fn index(&self) -> usize {
        TEMPLATES
            .iter()
            .position(|t| t.name == self.name)
            .expect("templates come from the registry")
    }
}

impl fmt::Debug for MetaPathTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "MetaPathTemplate({})", self.name)
    }
}

impl fmt::Display for MetaPathTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

impl Serialize for MetaPathTemplate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name)
    }
}

impl<'de> Deserialize<'de> for MetaPathTemplate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        MetaPathTemplate::by_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown meta-path `{name}`")))
    }
}

/// Concrete walk under a template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathInstance {
    pub template: MetaPathTemplate,
    pub nodes: Vec<NodeId>,
    pub target_kc: NodeId,
}

impl PathInstance {
    pub fn target_question(&self) -> NodeId {
        self.nodes[0]
    }

    /// Edge count.
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone)]
pub struct Mrhin {
    kinds: Vec<NodeKind>,
    labels: Vec<String>,
    /// Neighbours bucketed by kind, each bucket sorted.
    adjacency: Vec<[Vec<NodeId>; 5]>,
    by_label: HashMap<String, NodeId>,
}

#[derive(Serialize, Deserialize)]
struct MrhinRecord {
    nodes: Vec<(NodeKind, String)>,
    edges: Vec<(u32, u32)>,
}

fn node_label(kind: NodeKind, id: &str) -> String {
    format!("{}:{}", kind.letter(), id)
}

impl Mrhin {
    pub fn student_label(s: &StudentId) -> String {
        node_label(NodeKind::Student, s.as_str())
    }

    pub fn question_label(q: &QuestionId) -> String {
        node_label(NodeKind::Question, q.as_str())
    }

    pub fn concept_label(k: &KcId) -> String {
        node_label(NodeKind::Concept, k.as_str())
    }

    pub fn ability_label(l: Level) -> String {
        node_label(NodeKind::Ability, l.as_str())
    }

    pub fn difficulty_label(l: Level) -> String {
        node_label(NodeKind::Difficulty, l.as_str())
    }

    fn empty() -> Self {
        Self {
            kinds: Vec::new(),
            labels: Vec::new(),
            adjacency: Vec::new(),
            by_label: HashMap::new(),
        }
    }

    fn add_node(&mut self, kind: NodeKind, label: String) -> NodeId {
        if let Some(&id) = self.by_label.get(&label) {
            return id;
        }
        let id = NodeId(self.kinds.len() as u32);
        self.kinds.push(kind);
        self.by_label.insert(label.clone(), id);
        self.labels.push(label);
        self.adjacency.push(Default::default());
        id
    }

    fn add_edge(&mut self, x: NodeId, y: NodeId) {
        let (kx, ky) = (self.kind(x), self.kind(y));
        debug_assert!(kx.connects(ky), "no edge kind {kx:?}-{ky:?}");
        let bucket = &mut self.adjacency[x.index()][ky.slot()];
        if let Err(pos) = bucket.binary_search(&y) {
            bucket.insert(pos, y);
            let back = &mut self.adjacency[y.index()][kx.slot()];
            let pos = back.binary_search(&x).unwrap_err();
            back.insert(pos, x);
        }
    }

    pub fn node_count(&self) -> usize {
        self.kinds.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency
            .iter()
            .map(|b| b.iter().map(Vec::len).sum::<usize>())
            .sum::<usize>()
            / 2
    }

    pub fn kind(&self, n: NodeId) -> NodeKind {
        self.kinds[n.index()]
    }

    pub fn label(&self, n: NodeId) -> &str {
        &self.labels[n.index()]
    }

    /// Identifier part of the label, without the kind prefix.
    pub fn raw_id(&self, n: NodeId) -> &str {
        &self.labels[n.index()][2..]
    }

    pub fn lookup(&self, label: &str) -> Option<NodeId> {
        self.by_label.get(label).copied()
    }

    pub fn question(&self, q: &QuestionId) -> Option<NodeId> {
        self.lookup(&Self::question_label(q))
    }

    pub fn student(&self, s: &StudentId) -> Option<NodeId> {
        self.lookup(&Self::student_label(s))
    }

    pub fn concept(&self, k: &KcId) -> Option<NodeId> {
        self.lookup(&Self::concept_label(k))
    }

    pub fn neighbors(&self, n: NodeId, kind: NodeKind) -> &[NodeId] {
        &self.adjacency[n.index()][kind.slot()]
    }

    pub fn degree(&self, n: NodeId) -> usize {
        self.adjacency[n.index()].iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, x: NodeId, y: NodeId) -> bool {
        self.neighbors(x, self.kind(y)).binary_search(&y).is_ok()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.kinds.len() as u32).map(NodeId)
    }

    pub fn nodes_of(&self, kind: NodeKind) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes().filter(move |&n| self.kind(n) == kind)
    }

    /// Level carried by an `A` or `D` node.
    pub fn level(&self, n: NodeId) -> Option<Level> {
        match self.kind(n) {
            NodeKind::Ability | NodeKind::Difficulty => Level::parse(self.raw_id(n)),
            _ => None,
        }
    }

    /// Canonical target concept of a question: its lowest KC node.
    pub fn target_concept(&self, q: NodeId) -> Option<NodeId> {
        self.neighbors(q, NodeKind::Concept).first().copied()
    }

    /// Breadth-first hop distance, saturating at `cap`.
    pub fn distance(&self, x: NodeId, y: NodeId, cap: usize) -> usize {
        if x == y {
            return 0;
        }
        let dist = self.distances_from(x, cap);
        dist[y.index()]
    }

    /// Hop distances from `source` to every node, with nodes farther than
    /// `cap` (or unreachable) reported as `cap`.
    pub fn distances_from(&self, source: NodeId, cap: usize) -> Vec<usize> {
        let mut dist = vec![cap; self.node_count()];
        dist[source.index()] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(n) = queue.pop_front() {
            let d = dist[n.index()];
            if d + 1 >= cap {
                continue;
            }
            for bucket in &self.adjacency[n.index()] {
                for &m in bucket {
                    if dist[m.index()] == cap && m != source {
                        dist[m.index()] = d + 1;
                        queue.push_back(m);
                    }
                }
            }
        }
        dist
    }

    pub fn to_json(&self) -> Result<String> {
        let mut edges = Vec::new();
        for x in self.nodes() {
            for bucket in &self.adjacency[x.index()] {
                edges.extend(bucket.iter().filter(|y| y.0 > x.0).map(|y| (x.0, y.0)));
            }
        }
        let rec = MrhinRecord {
            nodes: self.kinds.iter().copied().zip(self.labels.iter().cloned()).collect(),
            edges,
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: MrhinRecord = serde_json::from_str(s)?;
        let mut g = Self::empty();
        for (kind, label) in rec.nodes {
            g.add_node(kind, label);
        }
        for (x, y) in rec.edges {
            if x as usize >= g.node_count() || y as usize >= g.node_count() {
                return Err(Error::Config(format!("edge ({x}, {y}) out of range")));
            }
            if !g.kind(NodeId(x)).connects(g.kind(NodeId(y))) {
                return Err(Error::Config(format!("edge ({x}, {y}) has no valid kind")));
            }
            g.add_edge(NodeId(x), NodeId(y));
        }
        Ok(g)
    }
}

/// Builds the graph over every student, question and concept in `d`.
///
/// `Q-U` edges come from train interactions only; students and questions the
/// IRT model has not seen take the Medium level.
pub fn build(d: &Dataset, m: &IrtModel) -> Mrhin {
    let mut g = Mrhin::empty();
    let students = d.students();
    let question_kcs = d.question_kcs();

    let ability_levels: std::collections::BTreeSet<Level> =
        students.iter().map(|s| m.ability_level_of(s)).collect();
    let difficulty_levels: std::collections::BTreeSet<Level> = question_kcs
        .keys()
        .map(|q| m.difficulty_level_of(q))
        .collect();
    for &l in &ability_levels {
        g.add_node(NodeKind::Ability, Mrhin::ability_label(l));
    }
    for &l in &difficulty_levels {
        g.add_node(NodeKind::Difficulty, Mrhin::difficulty_label(l));
    }
    let kcs: std::collections::BTreeSet<&KcId> = question_kcs.values().flatten().collect();
    for k in kcs {
        g.add_node(NodeKind::Concept, Mrhin::concept_label(k));
    }
    for (q, ks) in &question_kcs {
        let qn = g.add_node(NodeKind::Question, Mrhin::question_label(q));
        let dn = g.lookup(&Mrhin::difficulty_label(m.difficulty_level_of(q))).unwrap();
        g.add_edge(qn, dn);
        for k in ks {
            let kn = g.lookup(&Mrhin::concept_label(k)).unwrap();
            g.add_edge(qn, kn);
        }
    }
    for s in &students {
        let un = g.add_node(NodeKind::Student, Mrhin::student_label(s));
        let an = g.lookup(&Mrhin::ability_label(m.ability_level_of(s))).unwrap();
        g.add_edge(un, an);
    }
    for x in d.train() {
        let un = g.student(&x.student).unwrap();
        let qn = g.question(&x.question).unwrap();
        g.add_edge(qn, un);
    }
    g
}

fn walk_seed(g: &Mrhin, seed: u64, t: &MetaPathTemplate, q0: NodeId, attempt: usize) -> u64 {
    StableHasher::new()
        .u64(seed)
        .str("walk")
        .str(g.label(q0))
        .str(t.name)
        .u64(attempt as u64)
        .finish_u64()
}

/// Next-hop candidates at position `nodes.len()` of a walk.
pub fn next_candidates<'g>(
    g: &'g Mrhin,
    t: &MetaPathTemplate,
    nodes: &[NodeId],
) -> impl Iterator<Item = NodeId> + 'g {
    let last = *nodes.last().expect("walks start at q0");
    let avoid = (nodes.len() >= 2 && g.kind(last) != NodeKind::Question)
        .then(|| nodes[nodes.len() - 2]);
    g.neighbors(last, t.kind_at(nodes.len()))
        .iter()
        .copied()
        .filter(move |&n| Some(n) != avoid)
}

/// One walk attempt; `None` when it dies before finishing a full cycle.
fn walk_once(
    g: &Mrhin,
    t: &MetaPathTemplate,
    q0: NodeId,
    walk_len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<NodeId>> {
    let mut nodes = Vec::with_capacity(walk_len);
    nodes.push(q0);
    let mut options = Vec::new();
    while nodes.len() < walk_len {
        options.clear();
        options.extend(next_candidates(g, t, &nodes));
        match options.choose(rng) {
            Some(&n) => nodes.push(n),
            None => break,
        }
    }
    (nodes.len() > t.period() || nodes.len() == walk_len).then_some(nodes)
}

/// Concept the instance is scored against: the KC of `q0` visited most often
/// on the walk, ties and unvisited cases going to the lowest KC.
fn pick_target_kc(g: &Mrhin, q0: NodeId, nodes: &[NodeId]) -> NodeId {
    let kcs = g.neighbors(q0, NodeKind::Concept);
    let mut best = kcs[0];
    let mut best_count = 0;
    for &k in kcs {
        let c = nodes.iter().filter(|&&n| n == k).count();
        if c > best_count {
            best = k;
            best_count = c;
        }
    }
    best
}

/// Samples up to `n` instances of `t` rooted at `q0`.
///
/// Dead walks are retried until `10 n` attempts have been spent. An empty
/// result means `q0` admits no completable cycle.
pub fn sample_instances(
    g: &Mrhin,
    t: &MetaPathTemplate,
    q0: NodeId,
    n: usize,
    walk_len: usize,
    seed: u64,
) -> Vec<PathInstance> {
    assert_eq!(g.kind(q0), NodeKind::Question, "walks start at a question");
    let mut out = Vec::with_capacity(n);
    let max_attempts = 10 * n;
    let mut attempt = 0;
    while out.len() < n && attempt < max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(walk_seed(g, seed, t, q0, attempt));
        attempt += 1;
        if let Some(nodes) = walk_once(g, t, q0, walk_len, &mut rng) {
            let target_kc = pick_target_kc(g, q0, &nodes);
            out.push(PathInstance {
                template: *t,
                nodes,
                target_kc,
            });
        } else if attempt == 1 && !can_complete_cycle(g, t, q0) {
            break;
        }
    }
    if out.is_empty() {
        log::debug!("{} has no completable {} cycle", g.label(q0), t.name);
    }
    out
}

/// Whether any walk from `q0` can complete one full template cycle.
pub fn can_complete_cycle(g: &Mrhin, t: &MetaPathTemplate, q0: NodeId) -> bool {
    fn go(g: &Mrhin, t: &MetaPathTemplate, nodes: &mut Vec<NodeId>) -> bool {
        if nodes.len() > t.period() {
            return true;
        }
        let options: Vec<NodeId> = next_candidates(g, t, nodes).collect();
        for n in options {
            nodes.push(n);
            if go(g, t, nodes) {
                return true;
            }
            nodes.pop();
        }
        false
    }
    go(g, t, &mut vec![q0])
}

/// Instances for every `(question, template)` pair, keyed by question.
pub fn sample_all(
    g: &Mrhin,
    questions: &[NodeId],
    templates: &[MetaPathTemplate],
    n: usize,
    walk_len: usize,
    seed: u64,
) -> BTreeMap<NodeId, Vec<PathInstance>> {
    let jobs: Vec<(NodeId, MetaPathTemplate)> = questions
        .iter()
        .flat_map(|&q| templates.iter().map(move |&t| (q, t)))
        .collect();
    let results: Vec<(NodeId, Vec<PathInstance>)> = jobs
        .par_iter()
        .map(|&(q, t)| (q, sample_instances(g, &t, q, n, walk_len, seed)))
        .collect();
    let mut out: BTreeMap<NodeId, Vec<PathInstance>> = BTreeMap::new();
    for (q, instances) in results {
        out.entry(q).or_default().extend(instances);
    }
    out
}

/// Checks kind conformance and edge existence of an instance.
pub fn validate(g: &Mrhin, p: &PathInstance) -> Result<(), String> {
    if p.nodes.is_empty() {
        return Err("empty instance".into());
    }
    for (i, &n) in p.nodes.iter().enumerate() {
        if g.kind(n) != p.template.kind_at(i) {
            return Err(format!("node {i} ({}) breaks {}", g.label(n), p.template));
        }
    }
    for w in p.nodes.windows(2) {
        if !g.has_edge(w[0], w[1]) {
            return Err(format!("no edge {} - {}", g.label(w[0]), g.label(w[1])));
        }
    }
    if !g.has_edge(p.nodes[0], p.target_kc) {
        return Err("target concept not attached to q0".into());
    }
    Ok(())
}

/// Serializable instance records grouped by target question label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceStore {
    pub walks: usize,
    pub walk_len: usize,
    pub seed: u64,
    pub by_question: BTreeMap<String, Vec<InstanceRecord>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub template: MetaPathTemplate,
    pub nodes: Vec<String>,
    pub target_kc: String,
}

impl InstanceRecord {
    pub fn from_instance(g: &Mrhin, p: &PathInstance) -> Self {
        Self {
            template: p.template,
            nodes: p.nodes.iter().map(|&n| g.label(n).to_owned()).collect(),
            target_kc: g.label(p.target_kc).to_owned(),
        }
    }

    pub fn to_instance(&self, g: &Mrhin) -> Result<PathInstance> {
        let resolve = |l: &str| {
            g.lookup(l)
                .ok_or_else(|| Error::Config(format!("unknown node `{l}` in instance store")))
        };
        Ok(PathInstance {
            template: self.template,
            nodes: self.nodes.iter().map(|l| resolve(l)).collect::<Result<_>>()?,
            target_kc: resolve(&self.target_kc)?,
        })
    }
}

impl InstanceStore {
    pub fn from_instances(
        g: &Mrhin,
        walks: usize,
        walk_len: usize,
        seed: u64,
        instances: &BTreeMap<NodeId, Vec<PathInstance>>,
    ) -> Self {
        let by_question = instances
            .iter()
            .map(|(&q, ps)| {
                (
                    g.label(q).to_owned(),
                    ps.iter().map(|p| InstanceRecord::from_instance(g, p)).collect(),
                )
            })
            .collect();
        Self {
            walks,
            walk_len,
            seed,
            by_question,
        }
    }

    pub fn instances(&self, g: &Mrhin) -> Result<BTreeMap<NodeId, Vec<PathInstance>>> {
        self.by_question
            .iter()
            .map(|(q, records)| {
                let qn = g
                    .lookup(q)
                    .ok_or_else(|| Error::Config(format!("unknown question `{q}`")))?;
                let ps = records
                    .iter()
                    .map(|r| r.to_instance(g))
                    .collect::<Result<Vec<_>>>()?;
                Ok((qn, ps))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Interaction};
    use crate::irt;

    fn interaction(s: &str, q: &str, kcs: &[&str], t: i64) -> Interaction {
        Interaction {
            student: StudentId::new(s),
            question: QuestionId::new(q),
            kcs: kcs.iter().map(|k| KcId::new(*k)).collect(),
            correct: t % 2 == 0,
            timestamp: t,
        }
    }

    fn flat_model(d: &Dataset) -> IrtModel {
        // Everything at the mean, so every node lands in Medium.
        let theta = d.students().into_iter().map(|s| (s, 0.0)).collect();
        let diff: BTreeMap<_, _> = d.questions().into_iter().map(|q| (q, 0.0)).collect();
        let disc = diff.keys().map(|q| (q.clone(), 1.0)).collect();
        let (ability_level, ability_stats) = irt::discretize(&theta);
        let (difficulty_level, difficulty_stats) = irt::discretize(&diff);
        IrtModel {
            theta,
            disc,
            diff,
            ability_level,
            difficulty_level,
            ability_stats,
            difficulty_stats,
            converged: true,
            rounds: 0,
        }
    }

    #[test]
    fn registry_has_fourteen_valid_templates() {
        assert_eq!(TEMPLATES.len(), 14);
        for t in &TEMPLATES {
            assert_eq!(t.kinds.first(), Some(&NodeKind::Question));
            assert_eq!(t.kinds.last(), Some(&NodeKind::Question));
            assert!(t.kinds.windows(2).all(|w| w[0].connects(w[1])), "{t}");
            let rendered: Vec<String> = t.kinds.iter().map(|k| k.letter().to_string()).collect();
            assert_eq!(rendered.join("-"), t.name);
        }
        let names: std::collections::HashSet<_> = TEMPLATES.iter().map(|t| t.name).collect();
        assert_eq!(names.len(), 14);
    }

    #[test]
    fn minimal_graph() {
        let d = Dataset::from_interactions(vec![interaction("u", "q", &["k"], 0)]).unwrap();
        let g = build(&d, &flat_model(&d));
        assert_eq!(g.node_count(), 5);
        assert_eq!(g.edge_count(), 4);
        let q = g.question(&QuestionId::new("q")).unwrap();
        let u = g.student(&StudentId::new("u")).unwrap();
        assert!(g.has_edge(q, u));
        assert!(g.has_edge(q, g.lookup("D:Medium").unwrap()));
        assert!(g.has_edge(u, g.lookup("A:Medium").unwrap()));
        assert!(g.has_edge(q, g.concept(&KcId::new("k")).unwrap()));
    }

    #[test]
    fn shared_concept_has_degree_two_and_edges_dedup() {
        let d = Dataset::from_interactions(vec![
            interaction("u", "q1", &["k"], 0),
            interaction("u", "q1", &["k"], 1),
            interaction("u", "q2", &["k"], 2),
        ])
        .unwrap();
        let g = build(&d, &flat_model(&d));
        let k = g.concept(&KcId::new("k")).unwrap();
        assert_eq!(g.degree(k), 2);
        let u = g.student(&StudentId::new("u")).unwrap();
        assert_eq!(g.neighbors(u, NodeKind::Question).len(), 2);
    }

    #[test]
    fn distance_rules() {
        let d = Dataset::from_interactions(vec![
            interaction("u", "q0", &["k0"], 0),
            interaction("u", "q1", &["k1"], 1),
        ])
        .unwrap();
        let g = build(&d, &flat_model(&d));
        let q0 = g.question(&QuestionId::new("q0")).unwrap();
        let q1 = g.question(&QuestionId::new("q1")).unwrap();
        assert_eq!(g.distance(q0, q0, 20), 0);
        assert_eq!(g.distance(q0, q1, 20), 2);
        assert_eq!(g.distance(q0, q1, 2), 2);
        assert_eq!(g.distance(q0, q1, 1), 1);
    }

    #[test]
    fn disconnected_pair_hits_cap() {
        let mut g = Mrhin::empty();
        let a = g.add_node(NodeKind::Question, "Q:a".into());
        let b = g.add_node(NodeKind::Question, "Q:b".into());
        assert_eq!(g.distance(a, b, 20), 20);
        assert_eq!(g.distance(b, a, 20), 20);
    }

    #[test]
    fn forced_walk_alternates() {
        let d = Dataset::from_interactions(vec![
            interaction("u", "q0", &["k"], 0),
            interaction("u", "q1", &["k"], 1),
        ])
        .unwrap();
        let g = build(&d, &flat_model(&d));
        let q0 = g.question(&QuestionId::new("q0")).unwrap();
        let q1 = g.question(&QuestionId::new("q1")).unwrap();
        let k = g.concept(&KcId::new("k")).unwrap();
        let t = MetaPathTemplate::by_name("Q-K-Q").unwrap();
        let walks = sample_instances(&g, &t, q0, 5, 20, 1);
        assert_eq!(walks.len(), 5);
        let expected: Vec<NodeId> = (0..20)
            .map(|i| match i % 4 {
                0 => q0,
                2 => q1,
                _ => k,
            })
            .collect();
        for w in &walks {
            assert_eq!(w.nodes, expected);
            assert_eq!(w.target_kc, k);
        }
    }

    #[test]
    fn no_completable_cycle_gives_empty() {
        let d = Dataset::from_interactions(vec![interaction("u", "q0", &["k"], 0)]).unwrap();
        let g = build(&d, &flat_model(&d));
        let q0 = g.question(&QuestionId::new("q0")).unwrap();
        let t = MetaPathTemplate::by_name("Q-K-Q").unwrap();
        assert!(sample_instances(&g, &t, q0, 10, 20, 1).is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut xs = Vec::new();
        for s in 0..4 {
            for q in 0..5 {
                xs.push(interaction(&format!("u{s}"), &format!("q{q}"), &[&format!("k{}", q % 2)], (s * 10 + q) as i64));
            }
        }
        let d = Dataset::from_interactions(xs).unwrap();
        let m = flat_model(&d);
        let g = build(&d, &m);
        let q0 = g.question(&QuestionId::new("q0")).unwrap();
        for t in &TEMPLATES {
            let a = sample_instances(&g, t, q0, 20, 20, 9);
            let b = sample_instances(&g, t, q0, 20, 20, 9);
            assert_eq!(a, b);
            for p in &a {
                validate(&g, p).unwrap();
            }
        }
    }

    #[test]
    fn json_round_trips_graph_and_store() {
        let d = Dataset::from_interactions(vec![
            interaction("u", "q0", &["k", "j"], 0),
            interaction("v", "q1", &["k"], 1),
            interaction("v", "q0", &["j"], 2),
        ])
        .unwrap();
        let g = build(&d, &flat_model(&d));
        let h = Mrhin::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(h.node_count(), g.node_count());
        assert_eq!(h.edge_count(), g.edge_count());
        for n in g.nodes() {
            assert_eq!(g.label(n), h.label(n));
            for kind in NodeKind::ALL {
                assert_eq!(g.neighbors(n, kind), h.neighbors(n, kind));
            }
        }
        let q0 = g.question(&QuestionId::new("q0")).unwrap();
        let sampled = sample_all(&g, &[q0], &TEMPLATES, 3, 20, 4);
        let store = InstanceStore::from_instances(&g, 3, 20, 4, &sampled);
        let text = serde_json::to_string(&store).unwrap();
        let back: InstanceStore = serde_json::from_str(&text).unwrap();
        assert_eq!(back.instances(&h).unwrap(), sampled);
    }
}
