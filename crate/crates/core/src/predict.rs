//! Prompt assembly and answer prediction.
//!
//! A [`PromptBundle`] holds the structured content of the three prompt
//! blocks (target student, target question, similar students). Rendering is
//! a fixed line-oriented template and [`parse_prompt`] inverts it, so every
//! field survives a render/parse round trip. Real numbers are quantized to
//! four decimals when the bundle is built, which makes the rendered text
//! exact.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Interaction, Split};
use crate::error::{Error, Result};
use crate::ids::{KcId, QuestionId, StudentId};
use crate::irt::{self, IrtModel, Level};
use crate::llm::{ChatMessage, LlmClient};

pub const DEFAULT_WINDOW: usize = 20;
pub const PEER_WEIGHT: f64 = 0.3;
pub const REPORT_SENTENCES: usize = 3;
pub const BEGIN_MARKER: &str = "<<<PREDICTION>>>";
pub const END_MARKER: &str = "<<<END>>>";

const TARGET_HEADER: &str = "=== TARGET STUDENT ===";
const QUESTION_HEADER: &str = "=== TARGET QUESTION ===";
const PEERS_HEADER: &str = "=== SIMILAR STUDENTS ===";
const TASK_HEADER: &str = "=== TASK ===";
const COLD_START_NOTE: &str = "note: question unseen in training, default parameters used";

pub const PREDICTION_SYSTEM: &str = "You are an experienced teacher who analyses student \
learning records. You predict whether a student will answer a question correctly and explain \
the prediction.";

const TASK_TEXT: &str = "Predict whether the target student answers the target question \
correctly. Use the student's record, the question attributes and, when given, the records of \
similar students.
Reply with exactly this block and nothing else:
<<<PREDICTION>>>
outcome: correct or wrong
confidence: probability between 0 and 1 that the stated outcome is right
report: three sentences explaining the prediction
<<<END>>>";

/// Suppressed prompt blocks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationMask {
    /// Drop the similar-students block.
    pub simu: bool,
    /// Drop every IRT-derived field (ability, difficulty, discrimination,
    /// levels).
    pub irt: bool,
}

impl AblationMask {
    pub const NONE: Self = Self {
        simu: false,
        irt: false,
    };
    pub const SIMU: Self = Self {
        simu: true,
        irt: false,
    };
    pub const IRT: Self = Self {
        simu: false,
        irt: true,
    };

    pub fn union(self, other: Self) -> Self {
        Self {
            simu: self.simu || other.simu,
            irt: self.irt || other.irt,
        }
    }
}

/// `(correct, answered)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub correct: u32,
    pub total: u32,
}

impl Record {
    pub fn add(&mut self, correct: bool) {
        self.correct += u32::from(correct);
        self.total += 1;
    }

    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| f64::from(self.correct) / f64::from(self.total))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub question: QuestionId,
    pub kcs: Vec<KcId>,
    pub correct: bool,
    pub difficulty: Option<f64>,
    pub discrimination: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBlock {
    pub student: StudentId,
    pub theta: Option<f64>,
    pub ability_level: Option<Level>,
    /// Oldest first.
    pub history: Vec<HistoryItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionBlock {
    pub question: QuestionId,
    pub kcs: Vec<KcId>,
    pub target_kc: KcId,
    pub difficulty: Option<f64>,
    pub difficulty_level: Option<Level>,
    pub discrimination: Option<f64>,
    pub cold_start: bool,
    /// The target student's earlier answers on the target concept.
    pub kc_record: Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerBlock {
    pub student: StudentId,
    pub theta: Option<f64>,
    pub ability_level: Option<Level>,
    pub kc_history: Vec<(QuestionId, bool)>,
    pub kc_record: Record,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub target: TargetBlock,
    pub question: QuestionBlock,
    /// `None` when masked.
    pub peers: Option<Vec<PeerBlock>>,
    pub mask: AblationMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Correct,
    Wrong,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Correct => "correct",
            Outcome::Wrong => "wrong",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub outcome: Outcome,
    pub confidence: f64,
    pub report: String,
    pub p_correct: f64,
}

impl Prediction {
    /// Checks the confidence range and the report length and derives
    /// `p_correct`.
    pub fn new(outcome: Outcome, confidence: f64, report: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::Domain(format!("confidence {confidence} outside [0, 1]")));
        }
        let report = report.into();
        let n = sentence_count(&report);
        if n != REPORT_SENTENCES {
            return Err(Error::Domain(format!(
                "report has {n} sentences, expected {REPORT_SENTENCES}"
            )));
        }
        let p_correct = match outcome {
            Outcome::Correct => confidence,
            Outcome::Wrong => 1.0 - confidence,
        };
        Ok(Self {
            outcome,
            confidence,
            report,
            p_correct,
        })
    }
}

fn sentence_end() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // Terminal punctuation followed by whitespace or the end; decimal points
    // inside numbers do not end a sentence.
    RE.get_or_init(|| Regex::new(r"[.!?]+(\s+|$)").expect("valid regex"))
}

pub fn sentence_count(text: &str) -> usize {
    sentence_end()
        .split(text)
        .filter(|s| !s.trim().is_empty())
        .count()
}

fn quantize(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Per-student views of the dataset used while building prompts.
#[derive(Debug, Clone)]
pub struct HistoryIndex<'d> {
    d: &'d Dataset,
    ranges: BTreeMap<StudentId, Range<usize>>,
}

impl<'d> HistoryIndex<'d> {
    pub fn new(d: &'d Dataset) -> Self {
        Self {
            d,
            ranges: d.student_ranges(),
        }
    }

    pub fn dataset(&self) -> &'d Dataset {
        self.d
    }

    fn range(&self, s: &StudentId) -> Range<usize> {
        self.ranges.get(s).cloned().unwrap_or(0..0)
    }

    /// Interactions of `s` strictly before `timestamp`, all splits, oldest
    /// first.
    pub fn before(&self, s: &StudentId, timestamp: i64) -> &'d [Interaction] {
        let r = self.range(s);
        let rows = &self.d.interactions()[r];
        let end = rows.partition_point(|x| x.timestamp < timestamp);
        &rows[..end]
    }

    pub fn train_of(&self, s: &StudentId) -> impl Iterator<Item = &'d Interaction> + 'd {
        let r = self.range(s);
        let d = self.d;
        r.filter(move |&i| d.splits()[i] == Split::Train)
            .map(move |i| &d.interactions()[i])
    }
}

/// The concept a prediction is anchored on: the lowest KC id of the
/// question.
pub fn target_kc(x: &Interaction) -> Result<KcId> {
    x.kcs
        .iter()
        .next()
        .cloned()
        .ok_or_else(|| Error::Domain(format!("question {} has no KC", x.question)))
}

fn tail<T>(v: &[T], window: usize) -> &[T] {
    &v[v.len().saturating_sub(window)..]
}

/// Structured prompt inputs for predicting `target`.
pub fn build_prompt(
    target: &Interaction,
    peers: &[StudentId],
    m: &IrtModel,
    index: &HistoryIndex<'_>,
    mask: AblationMask,
    window: usize,
) -> Result<PromptBundle> {
    let kc = target_kc(target)?;
    let u = &target.student;
    let irt_on = !mask.irt;
    let earlier = index.before(u, target.timestamp);
    let history = tail(earlier, window)
        .iter()
        .map(|x| HistoryItem {
            question: x.question.clone(),
            kcs: x.kcs.iter().cloned().collect(),
            correct: x.correct,
            difficulty: irt_on.then(|| quantize(m.diff_of(&x.question))),
            discrimination: irt_on.then(|| quantize(m.disc_of(&x.question))),
        })
        .collect();
    let mut kc_record = Record::default();
    for x in earlier.iter().filter(|x| x.kcs.contains(&kc)) {
        kc_record.add(x.correct);
    }
    let q = &target.question;
    let question = QuestionBlock {
        question: q.clone(),
        kcs: target.kcs.iter().cloned().collect(),
        target_kc: kc.clone(),
        difficulty: irt_on.then(|| quantize(m.diff_of(q))),
        difficulty_level: irt_on.then(|| m.difficulty_level_of(q)),
        discrimination: irt_on.then(|| quantize(m.disc_of(q))),
        cold_start: irt_on && !m.knows_question(q),
        kc_record,
    };
    let peers = (!mask.simu).then(|| {
        peers
            .iter()
            .map(|s| {
                let on_kc: Vec<&Interaction> =
                    index.train_of(s).filter(|x| x.kcs.contains(&kc)).collect();
                let mut kc_record = Record::default();
                for x in &on_kc {
                    kc_record.add(x.correct);
                }
                PeerBlock {
                    student: s.clone(),
                    theta: irt_on.then(|| quantize(m.theta_of(s))),
                    ability_level: irt_on.then(|| m.ability_level_of(s)),
                    kc_history: tail(&on_kc, window)
                        .iter()
                        .map(|x| (x.question.clone(), x.correct))
                        .collect(),
                    kc_record,
                }
            })
            .collect()
    });
    Ok(PromptBundle {
        target: TargetBlock {
            student: u.clone(),
            theta: irt_on.then(|| quantize(m.theta_of(u))),
            ability_level: irt_on.then(|| m.ability_level_of(u)),
            history,
        },
        question,
        peers,
        mask,
    })
}

impl PromptBundle {
    /// Applies a further mask to an already built bundle.
    pub fn masked(&self, extra: AblationMask) -> Self {
        let mask = self.mask.union(extra);
        let mut out = self.clone();
        out.mask = mask;
        if mask.simu {
            out.peers = None;
        }
        if mask.irt {
            out.target.theta = None;
            out.target.ability_level = None;
            for h in &mut out.target.history {
                h.difficulty = None;
                h.discrimination = None;
            }
            out.question.difficulty = None;
            out.question.difficulty_level = None;
            out.question.discrimination = None;
            out.question.cold_start = false;
            if let Some(peers) = &mut out.peers {
                for p in peers {
                    p.theta = None;
                    p.ability_level = None;
                }
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        self.render_target(&mut out);
        self.render_question(&mut out);
        if let Some(peers) = &self.peers {
            render_peers(peers, &mut out);
        }
        out.push_str(TASK_HEADER);
        out.push('\n');
        out.push_str(TASK_TEXT);
        out.push('\n');
        out
    }

    fn render_target(&self, out: &mut String) {
        let t = &self.target;
        line(out, TARGET_HEADER);
        field(out, "student", t.student.as_str());
        if let Some(theta) = t.theta {
            field(out, "ability_theta", &num(theta));
        }
        if let Some(level) = t.ability_level {
            field(out, "ability_level", level.as_str());
        }
        field(out, "recent_interactions", &t.history.len().to_string());
        for h in &t.history {
            let mut parts = vec![
                format!("question: {}", h.question),
                format!("kcs: {}", join(&h.kcs)),
            ];
            if let Some(b) = h.difficulty {
                parts.push(format!("difficulty: {}", num(b)));
            }
            if let Some(a) = h.discrimination {
                parts.push(format!("discrimination: {}", num(a)));
            }
            parts.push(format!("result: {}", result(h.correct)));
            line(out, &format!("- {}", parts.join(" | ")));
        }
    }

    fn render_question(&self, out: &mut String) {
        let q = &self.question;
        line(out, QUESTION_HEADER);
        field(out, "question", q.question.as_str());
        field(out, "kcs", &join(&q.kcs));
        field(out, "target_kc", q.target_kc.as_str());
        if let Some(b) = q.difficulty {
            field(out, "difficulty", &num(b));
        }
        if let Some(level) = q.difficulty_level {
            field(out, "difficulty_level", level.as_str());
        }
        if let Some(a) = q.discrimination {
            field(out, "discrimination", &num(a));
        }
        if q.cold_start {
            line(out, COLD_START_NOTE);
        }
        field(out, "target_kc_accuracy", &record(q.kc_record));
    }
}

fn render_peers(peers: &[PeerBlock], out: &mut String) {
    line(out, PEERS_HEADER);
    field(out, "peers", &peers.len().to_string());
    for (i, p) in peers.iter().enumerate() {
        line(out, &format!("--- peer {} ---", i + 1));
        field(out, "student", p.student.as_str());
        if let Some(theta) = p.theta {
            field(out, "ability_theta", &num(theta));
        }
        if let Some(level) = p.ability_level {
            field(out, "ability_level", level.as_str());
        }
        let hist = if p.kc_history.is_empty() {
            "none".to_string()
        } else {
            p.kc_history
                .iter()
                .map(|(q, c)| format!("{q} {}", result(*c)))
                .collect::<Vec<_>>()
                .join(", ")
        };
        field(out, "target_kc_history", &hist);
        field(out, "target_kc_accuracy", &record(p.kc_record));
    }
}

fn line(out: &mut String, s: &str) {
    out.push_str(s);
    out.push('\n');
}

fn field(out: &mut String, key: &str, value: &str) {
    out.push_str(key);
    out.push_str(": ");
    out.push_str(value);
    out.push('\n');
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn join<T: AsRef<str>>(ids: &[T]) -> String {
    ids.iter().map(|k| k.as_ref()).collect::<Vec<_>>().join(",")
}

fn result(correct: bool) -> &'static str {
    if correct {
        "correct"
    } else {
        "wrong"
    }
}

fn record(r: Record) -> String {
    match r.accuracy() {
        Some(acc) => format!("{} ({}/{})", num(acc), r.correct, r.total),
        None => "none (0/0)".to_string(),
    }
}

impl AsRef<str> for KcId {
    fn as_ref(&self) -> &str {
        self.as_str()
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Domain(format!("unparsable prompt: {}", msg.into()))
}

struct Lines<'a> {
    lines: Vec<&'a str>,
    at: usize,
}

impl<'a> Lines<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.lines.get(self.at).copied()
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let l = self.peek().ok_or_else(|| bad("unexpected end"))?;
        self.at += 1;
        Ok(l)
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let l = self.next_line()?;
        if l == want {
            Ok(())
        } else {
            Err(bad(format!("expected {want:?}, found {l:?}")))
        }
    }

    fn value(&mut self, key: &str) -> Result<&'a str> {
        let l = self.next_line()?;
        l.strip_prefix(key)
            .and_then(|r| r.strip_prefix(": "))
            .ok_or_else(|| bad(format!("expected field {key:?}, found {l:?}")))
    }

    fn optional(&mut self, key: &str) -> Option<&'a str> {
        let v = self
            .peek()?
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix(": "))?;
        self.at += 1;
        Some(v)
    }
}

fn parse_num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| bad(format!("bad number {s:?}")))
}

fn parse_level(s: &str) -> Result<Level> {
    Level::parse(s).ok_or_else(|| bad(format!("bad level {s:?}")))
}

fn parse_result(s: &str) -> Result<bool> {
    match s {
        "correct" => Ok(true),
        "wrong" => Ok(false),
        _ => Err(bad(format!("bad result {s:?}"))),
    }
}

fn parse_ids<T: From<String>>(s: &str) -> Vec<T> {
    if s.is_empty() {
        Vec::new()
    } else {
        s.split(',').map(|x| T::from(x.to_string())).collect()
    }
}

fn parse_record(s: &str) -> Result<Record> {
    let inner = s
        .rsplit_once('(')
        .and_then(|(_, r)| r.strip_suffix(')'))
        .ok_or_else(|| bad(format!("bad record {s:?}")))?;
    let (c, t) = inner
        .split_once('/')
        .ok_or_else(|| bad(format!("bad record {s:?}")))?;
    Ok(Record {
        correct: c.parse().map_err(|_| bad("bad count"))?,
        total: t.parse().map_err(|_| bad("bad count"))?,
    })
}

fn parse_count(s: &str) -> Result<usize> {
    s.parse().map_err(|_| bad(format!("bad count {s:?}")))
}

fn parse_history_item(l: &str) -> Result<HistoryItem> {
    let body = l
        .strip_prefix("- ")
        .ok_or_else(|| bad(format!("bad history line {l:?}")))?;
    let mut item = HistoryItem {
        question: QuestionId::new(""),
        kcs: Vec::new(),
        correct: false,
        difficulty: None,
        discrimination: None,
    };
    for part in body.split(" | ") {
        let (k, v) = part
            .split_once(": ")
            .ok_or_else(|| bad(format!("bad history part {part:?}")))?;
        match k {
            "question" => item.question = QuestionId::new(v),
            "kcs" => item.kcs = parse_ids(v),
            "difficulty" => item.difficulty = Some(parse_num(v)?),
            "discrimination" => item.discrimination = Some(parse_num(v)?),
            "result" => item.correct = parse_result(v)?,
            _ => return Err(bad(format!("unknown history key {k:?}"))),
        }
    }
    Ok(item)
}

/// Recovers the bundle from its rendered prompt.
pub fn parse_prompt(text: &str) -> Result<PromptBundle> {
    let mut ls = Lines {
        lines: text.lines().collect(),
        at: 0,
    };
    ls.expect(TARGET_HEADER)?;
    let student = StudentId::new(ls.value("student")?);
    let theta = ls.optional("ability_theta").map(parse_num).transpose()?;
    let ability_level = ls.optional("ability_level").map(parse_level).transpose()?;
    let n = parse_count(ls.value("recent_interactions")?)?;
    let history = (0..n)
        .map(|_| parse_history_item(ls.next_line()?))
        .collect::<Result<Vec<_>>>()?;

    ls.expect(QUESTION_HEADER)?;
    let question = QuestionId::new(ls.value("question")?);
    let kcs = parse_ids(ls.value("kcs")?);
    let target_kc = KcId::new(ls.value("target_kc")?);
    let difficulty = ls.optional("difficulty").map(parse_num).transpose()?;
    let difficulty_level = ls.optional("difficulty_level").map(parse_level).transpose()?;
    let discrimination = ls.optional("discrimination").map(parse_num).transpose()?;
    let cold_start = ls.peek() == Some(COLD_START_NOTE);
    if cold_start {
        ls.at += 1;
    }
    let kc_record = parse_record(ls.value("target_kc_accuracy")?)?;

    let peers = if ls.peek() == Some(PEERS_HEADER) {
        ls.at += 1;
        let n = parse_count(ls.value("peers")?)?;
        let mut peers = Vec::with_capacity(n);
        for i in 0..n {
            ls.expect(&format!("--- peer {} ---", i + 1))?;
            let student = StudentId::new(ls.value("student")?);
            let theta = ls.optional("ability_theta").map(parse_num).transpose()?;
            let ability_level = ls.optional("ability_level").map(parse_level).transpose()?;
            let hist = ls.value("target_kc_history")?;
            let kc_history = if hist == "none" {
                Vec::new()
            } else {
                hist.split(", ")
                    .map(|e| {
                        let (q, r) = e
                            .rsplit_once(' ')
                            .ok_or_else(|| bad(format!("bad peer history {e:?}")))?;
                        Ok((QuestionId::new(q), parse_result(r)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            let kc_record = parse_record(ls.value("target_kc_accuracy")?)?;
            peers.push(PeerBlock {
                student,
                theta,
                ability_level,
                kc_history,
                kc_record,
            });
        }
        Some(peers)
    } else {
        None
    };
    ls.expect(TASK_HEADER)?;

    let mask = AblationMask {
        simu: peers.is_none(),
        irt: theta.is_none(),
    };
    Ok(PromptBundle {
        target: TargetBlock {
            student,
            theta,
            ability_level,
            history,
        },
        question: QuestionBlock {
            question,
            kcs,
            target_kc,
            difficulty,
            difficulty_level,
            discrimination,
            cold_start,
            kc_record,
        },
        peers,
        mask,
    })
}

/// Parses the delimited reply block. Errors describe what to fix.
pub fn parse_reply(reply: &str) -> std::result::Result<Prediction, String> {
    let start = reply
        .find(BEGIN_MARKER)
        .ok_or("missing <<<PREDICTION>>> marker")?;
    let body = &reply[start + BEGIN_MARKER.len()..];
    let end = body.find(END_MARKER).ok_or("missing <<<END>>> marker")?;
    let body = &body[..end];
    let mut outcome = None;
    let mut confidence = None;
    let mut report: Option<Vec<&str>> = None;
    for l in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(r) = report.as_mut() {
            r.push(l);
        } else if let Some(v) = l.strip_prefix("outcome:") {
            outcome = match v.trim().to_ascii_lowercase().as_str() {
                "correct" => Some(Outcome::Correct),
                "wrong" | "incorrect" => Some(Outcome::Wrong),
                other => return Err(format!("outcome must be correct or wrong, got {other:?}")),
            };
        } else if let Some(v) = l.strip_prefix("confidence:") {
            let c: f64 = v
                .trim()
                .parse()
                .map_err(|_| format!("confidence is not a number: {:?}", v.trim()))?;
            confidence = Some(c);
        } else if let Some(v) = l.strip_prefix("report:") {
            report = Some(vec![v.trim()]);
        }
    }
    let outcome = outcome.ok_or("missing outcome line")?;
    let confidence = confidence.ok_or("missing confidence line")?;
    let report = report.ok_or("missing report line")?.join(" ");
    let report = report.trim();
    Prediction::new(outcome, confidence, report).map_err(|e| match e {
        Error::Domain(m) => m,
        other => other.to_string(),
    })
}

/// Sends the rendered prompt and parses the reply, asking for a
/// reformulation on malformed output.
pub fn predict(p: &PromptBundle, client: &dyn LlmClient) -> Result<Prediction> {
    let mut messages = vec![
        ChatMessage::system(PREDICTION_SYSTEM),
        ChatMessage::user(p.render()),
    ];
    let mut transcript = Vec::new();
    for attempt in 0..=client.max_retries() {
        let reply = client.complete(&messages)?;
        transcript.push(reply.clone());
        match parse_reply(&reply) {
            Ok(pred) => return Ok(pred),
            Err(why) => {
                log::debug!("malformed prediction reply on attempt {}: {why}", attempt + 1);
                messages.push(ChatMessage::assistant(reply));
                messages.push(ChatMessage::user(format!(
                    "Your reply could not be used ({why}). Reply again with only the \
{BEGIN_MARKER} block: outcome, confidence and a report of exactly three sentences, \
then {END_MARKER}."
                )));
            }
        }
    }
    Err(Error::Prediction {
        message: format!("no usable reply after {} retries", client.max_retries()),
        transcript,
    })
}

/// Probability used by the offline backend before peer blending: the IRT
/// curve when IRT fields are present, otherwise the target-KC record, the
/// recent accuracy, or one half.
pub fn base_probability(p: &PromptBundle) -> f64 {
    let q = &p.question;
    match (q.difficulty, q.discrimination) {
        (Some(b), Some(a)) => {
            let theta = p.target.theta.unwrap_or(0.0);
            irt::probability(theta, a, b).unwrap_or(0.5)
        }
        _ => q.kc_record.accuracy().unwrap_or_else(|| {
            let h = &p.target.history;
            if h.is_empty() {
                0.5
            } else {
                h.iter().filter(|x| x.correct).count() as f64 / h.len() as f64
            }
        }),
    }
}

/// Mean target-KC accuracy over peers that have answered the concept.
pub fn peer_accuracy(p: &PromptBundle) -> Option<f64> {
    let accs: Vec<f64> = p
        .peers
        .as_ref()?
        .iter()
        .filter_map(|x| x.kc_record.accuracy())
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Deterministic offline prediction from the bundle's own numbers.
pub fn mock_predict(p: &PromptBundle) -> Prediction {
    let base = base_probability(p);
    let peer = peer_accuracy(p);
    let prob = match peer {
        Some(acc) => (1.0 - PEER_WEIGHT) * base + PEER_WEIGHT * acc,
        None => base,
    }
    .clamp(0.0, 1.0);
    let outcome = if prob >= 0.5 {
        Outcome::Correct
    } else {
        Outcome::Wrong
    };
    let first = match (p.target.theta, p.question.difficulty, p.question.discrimination) {
        (Some(t), Some(b), Some(a)) => format!(
            "The student's ability of {t:.4} against difficulty {b:.4} and discrimination {a:.4} \
gives a base probability of {base:.4}."
        ),
        _ => format!(
            "The student's earlier record on {} gives a base probability of {base:.4}.",
            p.question.target_kc
        ),
    };
    let second = match peer {
        Some(acc) => format!(
            "Similar students answered {} correctly at a mean rate of {acc:.4}.",
            p.question.target_kc
        ),
        None => "No similar-student evidence was used.".to_string(),
    };
    let third = format!(
        "The combined probability of a correct answer is {prob:.4}, so the answer is predicted {}.",
        outcome.as_str()
    );
    let confidence = prob.max(1.0 - prob);
    Prediction::new(outcome, confidence, format!("{first} {second} {third}"))
        .expect("templated report has three sentences")
}

/// Replies as the offline backend would, going through prompt parsing.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockPredictClient;

pub fn format_reply(p: &Prediction) -> String {
    format!(
        "{BEGIN_MARKER}\noutcome: {}\nconfidence: {}\nreport: {}\n{END_MARKER}",
        p.outcome.as_str(),
        p.confidence,
        p.report
    )
}

impl LlmClient for MockPredictClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.content.starts_with(TARGET_HEADER))
            .ok_or_else(|| Error::Transport("no prompt in request".into()))?;
        let bundle = parse_prompt(&prompt.content)?;
        Ok(format_reply(&mock_predict(&bundle)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedClient;
    use proptest::prelude::*;

    fn reply(outcome: &str, conf: &str, report: &str) -> String {
        format!("{BEGIN_MARKER}\noutcome: {outcome}\nconfidence: {conf}\nreport: {report}\n{END_MARKER}")
    }

    const THREE: &str = "One is here. Two is 0.5 here! Three?";

    fn bundle() -> PromptBundle {
        PromptBundle {
            target: TargetBlock {
                student: StudentId::new("u1"),
                theta: Some(0.25),
                ability_level: Some(Level::Medium),
                history: vec![HistoryItem {
                    question: QuestionId::new("q1"),
                    kcs: vec![KcId::new("k1"), KcId::new("k2")],
                    correct: true,
                    difficulty: Some(-0.5),
                    discrimination: Some(1.2),
                }],
            },
            question: QuestionBlock {
                question: QuestionId::new("q2"),
                kcs: vec![KcId::new("k1")],
                target_kc: KcId::new("k1"),
                difficulty: Some(0.25),
                difficulty_level: Some(Level::High),
                discrimination: Some(1.0),
                cold_start: false,
                kc_record: Record { correct: 1, total: 1 },
            },
            peers: Some(vec![PeerBlock {
                student: StudentId::new("u2"),
                theta: Some(0.3),
                ability_level: Some(Level::Medium),
                kc_history: vec![(QuestionId::new("q2"), false)],
                kc_record: Record { correct: 0, total: 1 },
            }]),
            mask: AblationMask::NONE,
        }
    }

    #[test]
    fn sentence_counting() {
        assert_eq!(sentence_count(THREE), 3);
        assert_eq!(sentence_count("Only one sentence with 0.75 in it."), 1);
        assert_eq!(sentence_count("Two. Sentences."), 2);
        assert_eq!(sentence_count("Wait... what? Yes."), 3);
        assert_eq!(sentence_count(""), 0);
    }

    #[test]
    fn wrong_outcome_flips_confidence() {
        let c = ScriptedClient::new([reply("wrong", "0.8", THREE)]);
        let p = predict(&bundle(), &c).unwrap();
        assert_eq!(p.outcome, Outcome::Wrong);
        assert!((p.p_correct - 0.2).abs() < 1e-15);
        assert_eq!(c.calls(), 1);
    }

    #[test]
    fn short_report_is_retried_then_fails() {
        let short = reply("correct", "0.7", "One. Two.");
        let c = ScriptedClient::new([short.clone(), reply("correct", "0.7", THREE)]);
        let p = predict(&bundle(), &c).unwrap();
        assert_eq!(p.p_correct, 0.7);
        assert_eq!(c.calls(), 2);
        let last = c.requests().pop().unwrap();
        assert!(last.last().unwrap().content.contains("2 sentences"));

        let c = ScriptedClient::new([short]);
        match predict(&bundle(), &c) {
            Err(Error::Prediction { transcript, .. }) => assert_eq!(transcript.len(), 4),
            other => panic!("expected prediction error, got {other:?}"),
        }
    }

    #[test]
    fn reply_parsing_errors() {
        assert!(parse_reply("no markers").is_err());
        assert!(parse_reply(&reply("maybe", "0.5", THREE)).is_err());
        assert!(parse_reply(&reply("correct", "1.5", THREE)).is_err());
        assert!(parse_reply(&reply("correct", "high", THREE)).is_err());
        let multi = format!("{BEGIN_MARKER}\noutcome: Correct\nconfidence: 0.9\nreport: First one.\nSecond one. Third one.\n{END_MARKER}");
        let p = parse_reply(&format!("Sure, here it is:\n{multi}\nthanks")).unwrap();
        assert_eq!(p.report, "First one. Second one. Third one.");
    }

    #[test]
    fn mock_midpoint_and_blend() {
        let mut b = bundle();
        b.peers = None;
        b.mask = AblationMask::SIMU;
        b.target.theta = Some(0.25);
        let p = mock_predict(&b);
        assert_eq!(p.p_correct, 0.5);
        assert_eq!(p.outcome, Outcome::Correct);
        assert_eq!(sentence_count(&p.report), 3);

        let mut with_peers = bundle();
        with_peers.target.theta = Some(0.25);
        let p = mock_predict(&with_peers);
        assert!((p.p_correct - 0.35).abs() < 1e-12);
        assert_eq!(p.outcome, Outcome::Wrong);

        with_peers.peers.as_mut().unwrap()[0].kc_record = Record { correct: 1, total: 2 };
        assert_eq!(mock_predict(&with_peers).p_correct, mock_predict(&b).p_correct);
    }

    #[test]
    fn peers_without_data_are_ignored() {
        let mut b = bundle();
        b.peers.as_mut().unwrap()[0].kc_record = Record::default();
        let mut alone = b.clone();
        alone.peers = Some(Vec::new());
        assert_eq!(peer_accuracy(&b), None);
        assert_eq!(mock_predict(&b), mock_predict(&alone));
    }

    #[test]
    fn irt_mask_falls_back_to_records() {
        let b = bundle().masked(AblationMask::IRT);
        assert_eq!(base_probability(&b), 1.0);
        let mut none = b.clone();
        none.question.kc_record = Record::default();
        assert_eq!(base_probability(&none), 1.0);
        none.target.history.clear();
        assert_eq!(base_probability(&none), 0.5);
        assert!(!b.render().contains("ability_theta"));
        assert!(!b.render().contains("difficulty"));
    }

    #[test]
    fn section_order_and_simu_isolation() {
        let full = bundle().render();
        let pos: Vec<usize> = [TARGET_HEADER, QUESTION_HEADER, PEERS_HEADER, TASK_HEADER]
            .iter()
            .map(|h| full.find(h).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let masked = bundle().masked(AblationMask::SIMU).render();
        assert!(!masked.contains(PEERS_HEADER));
        let cut = |s: &str, h: &str| s[..s.find(h).unwrap()].to_string();
        assert_eq!(cut(&full, PEERS_HEADER), cut(&masked, TASK_HEADER));
    }

    #[test]
    fn masks_are_orthogonal() {
        let b = bundle();
        let both = AblationMask { simu: true, irt: true };
        assert_eq!(
            b.masked(AblationMask::SIMU).masked(AblationMask::IRT),
            b.masked(both)
        );
        assert_eq!(
            b.masked(AblationMask::IRT).masked(AblationMask::SIMU),
            b.masked(both)
        );
    }

    #[test]
    fn mock_client_matches_direct_mock() {
        let b = bundle();
        let via = predict(&b, &MockPredictClient).unwrap();
        let direct = mock_predict(&b);
        assert_eq!(via.outcome, direct.outcome);
        assert_eq!(via.report, direct.report);
        assert!((via.p_correct - direct.p_correct).abs() < 1e-12);
    }

    fn id() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_]{0,6}"
    }

    fn value() -> impl Strategy<Value = f64> {
        (-40_000i32..40_000).prop_map(|k| quantize(f64::from(k) / 1e4))
    }

    fn level() -> impl Strategy<Value = Level> {
        prop_oneof![Just(Level::Low), Just(Level::Medium), Just(Level::High)]
    }

    fn rec() -> impl Strategy<Value = Record> {
        (0u32..20, 0u32..20).prop_map(|(a, b)| Record {
            correct: a.min(b),
            total: b,
        })
    }

    prop_compose! {
        fn arb_bundle()(
            student in id(), question in id(),
            kcs in proptest::collection::vec(id(), 1..4),
            theta in value(), diff in value(), disc in value(),
            tl in level(), dl in level(),
            cold in any::<bool>(),
            krec in rec(),
            history in proptest::collection::vec(
                (id(), proptest::collection::vec(id(), 1..3), any::<bool>(), value(), value()), 0..5),
            peers in proptest::option::of(proptest::collection::vec(
                (id(), value(), level(), proptest::collection::vec((id(), any::<bool>()), 0..4), rec()), 0..4)),
            irt_mask in any::<bool>(),
        ) -> PromptBundle {
            let b = PromptBundle {
                target: TargetBlock {
                    student: StudentId::new(student),
                    theta: Some(theta),
                    ability_level: Some(tl),
                    history: history.into_iter().map(|(q, ks, c, b, a)| HistoryItem {
                        question: QuestionId::new(q),
                        kcs: ks.into_iter().map(KcId::new).collect(),
                        correct: c,
                        difficulty: Some(b),
                        discrimination: Some(a),
                    }).collect(),
                },
                question: QuestionBlock {
                    question: QuestionId::new(question),
                    target_kc: KcId::new(kcs[0].clone()),
                    kcs: kcs.into_iter().map(KcId::new).collect(),
                    difficulty: Some(diff),
                    difficulty_level: Some(dl),
                    discrimination: Some(disc),
                    cold_start: cold,
                    kc_record: krec,
                },
                mask: AblationMask { simu: peers.is_none(), irt: false },
                peers: peers.map(|ps| ps.into_iter().map(|(s, t, l, h, r)| PeerBlock {
                    student: StudentId::new(s),
                    theta: Some(t),
                    ability_level: Some(l),
                    kc_history: h.into_iter().map(|(q, c)| (QuestionId::new(q), c)).collect(),
                    kc_record: r,
                }).collect()),
            };
            if irt_mask { b.masked(AblationMask::IRT) } else { b }
        }
    }

    proptest! {
        #[test]
        fn prompt_round_trips(b in arb_bundle()) {
            let text = b.render();
            prop_assert_eq!(parse_prompt(&text).unwrap(), b.clone());
            prop_assert_eq!(text, b.render());
        }

        #[test]
        fn mock_is_consistent_and_monotone(b in arb_bundle(), t1 in value(), t2 in value()) {
            let p = mock_predict(&b);
            prop_assert!((0.0..=1.0).contains(&p.p_correct));
            let derived = if p.outcome == Outcome::Correct { p.confidence } else { 1.0 - p.confidence };
            prop_assert_eq!(p.p_correct, derived);
            prop_assert_eq!(sentence_count(&p.report), 3);
            if !b.mask.irt {
                let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
                let mut x = b.clone();
                x.target.theta = Some(lo);
                let mut y = b.clone();
                y.target.theta = Some(hi);
                prop_assert!(mock_predict(&x).p_correct <= mock_predict(&y).p_correct + 1e-12);
            }
        }
    }
}
