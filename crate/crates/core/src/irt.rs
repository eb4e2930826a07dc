//! Two-parameter logistic item response model.
//!
//! Parameters are estimated by penalized maximum likelihood on the train
//! split with alternating blocks: all abilities given the items, then every
//! item's (log-discrimination, difficulty) pair given the abilities. Each
//! block is a step-halved Fisher-scoring step on an independent one- or
//! two-parameter problem, so the objective never decreases and the blocks
//! run in parallel without changing the result.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ids::{QuestionId, StudentId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Low,
    Medium,
    High,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Low, Level::Medium, Level::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Low => "Low",
            Level::Medium => "Medium",
            Level::High => "High",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Low" => Some(Level::Low),
            "Medium" => Some(Level::Medium),
            "High" => Some(Level::High),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Population mean and standard deviation behind a level assignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub mean: f64,
    pub std: f64,
}

impl LevelStats {
    pub fn level_of(&self, x: f64) -> Level {
        if x < self.mean - self.std {
            Level::Low
        } else if x > self.mean + self.std {
            Level::High
        } else {
            Level::Medium
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Probability of a correct answer, `1 / (1 + exp(-a (theta - b)))`.
pub fn probability(theta: f64, a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("discrimination must be positive, got {a}")));
    }
    Ok(sigmoid(a * (theta - b)))
}

/// Three-level discretization around the population mean, boundaries
/// inclusive on the Medium side.
pub fn discretize<K: Ord + Clone>(values: &BTreeMap<K, f64>) -> (BTreeMap<K, Level>, LevelStats) {
    let n = values.len().max(1) as f64;
    let mean = values.values().sum::<f64>() / n;
    let var = values.values().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let stats = LevelStats {
        mean,
        std: var.sqrt(),
    };
    let levels = values
        .iter()
        .map(|(k, &x)| (k.clone(), stats.level_of(x)))
        .collect();
    (levels, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// L2 penalty toward theta = 0, b = 0 and log a = 0.
    pub lambda: f64,
    pub tolerance: f64,
    pub max_rounds: usize,
    /// Largest change any single parameter may take in one round.
    pub max_step: f64,
    /// Box bound on |log a|; keeps perfectly separating items finite.
    pub max_log_disc: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            tolerance: 1e-4,
            max_rounds: 500,
            max_step: 1.0,
            max_log_disc: 4.0,
        }
    }
}

/// Longest jump, in multiples of one round's displacement.
const MAX_EXTRAPOLATION: f64 = 100.0;

/// Flat parameter vector in the unconstrained parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct IrtParams {
    pub theta: Vec<f64>,
    /// Log discrimination.
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Obs {
    student: u32,
    question: u32,
    correct: bool,
}

/// Penalized Bernoulli log-likelihood of the 2PL model over indexed
/// observations.
#[derive(Debug, Clone)]
pub struct Objective {
    obs: Vec<Obs>,
    n_students: usize,
    n_questions: usize,
    lambda: f64,
}

impl Objective {
    /// Observations as `(student index, question index, correct)`.
    pub fn new(
        triples: impl IntoIterator<Item = (usize, usize, bool)>,
        n_students: usize,
        n_questions: usize,
        lambda: f64,
    ) -> Self {
        let obs = triples
            .into_iter()
            .map(|(s, q, c)| Obs {
                student: s as u32,
                question: q as u32,
                correct: c,
            })
            .collect();
        Self {
            obs,
            n_students,
            n_questions,
            lambda,
        }
    }

    pub fn value(&self, p: &IrtParams) -> f64 {
        let ll: f64 = self
            .obs
            .iter()
            .map(|o| {
                let (s, q) = (o.student as usize, o.question as usize);
                let z = p.log_a[q].exp() * (p.theta[s] - p.b[q]);
                if o.correct {
                    log_sigmoid(z)
                } else {
                    log_sigmoid(-z)
                }
            })
            .sum();
        let penalty: f64 = p.theta.iter().map(|x| x * x).sum::<f64>()
            + p.b.iter().map(|x| x * x).sum::<f64>()
            + p.log_a.iter().map(|x| x * x).sum::<f64>();
        ll - 0.5 * self.lambda * penalty
    }

    pub fn gradient(&self, p: &IrtParams) -> IrtParams {
        let mut g = IrtParams {
            theta: p.theta.iter().map(|x| -self.lambda * x).collect(),
            log_a: p.log_a.iter().map(|x| -self.lambda * x).collect(),
            b: p.b.iter().map(|x| -self.lambda * x).collect(),
        };
        for o in &self.obs {
            let (s, q) = (o.student as usize, o.question as usize);
            let a = p.log_a[q].exp();
            let diff = p.theta[s] - p.b[q];
            let r = f64::from(u8::from(o.correct)) - sigmoid(a * diff);
            g.theta[s] += a * r;
            g.b[q] -= a * r;
            g.log_a[q] += r * a * diff;
        }
        g
    }

    pub fn n_students(&self) -> usize {
        self.n_students
    }

    pub fn n_questions(&self) -> usize {
        self.n_questions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrtModel {
    pub theta: BTreeMap<StudentId, f64>,
    pub disc: BTreeMap<QuestionId, f64>,
    pub diff: BTreeMap<QuestionId, f64>,
    pub ability_level: BTreeMap<StudentId, Level>,
    pub difficulty_level: BTreeMap<QuestionId, Level>,
    pub ability_stats: LevelStats,
    pub difficulty_stats: LevelStats,
    pub converged: bool,
    pub rounds: usize,
}

impl IrtModel {
    /// Ability, falling back to the population prior for unseen students.
    pub fn theta_of(&self, s: &StudentId) -> f64 {
        self.theta.get(s).copied().unwrap_or(0.0)
    }

    pub fn disc_of(&self, q: &QuestionId) -> f64 {
        self.disc.get(q).copied().unwrap_or(1.0)
    }

    pub fn diff_of(&self, q: &QuestionId) -> f64 {
        self.diff.get(q).copied().unwrap_or(0.0)
    }

    pub fn ability_level_of(&self, s: &StudentId) -> Level {
        self.ability_level.get(s).copied().unwrap_or(Level::Medium)
    }

    pub fn difficulty_level_of(&self, q: &QuestionId) -> Level {
        self.difficulty_level.get(q).copied().unwrap_or(Level::Medium)
    }

    pub fn knows_question(&self, q: &QuestionId) -> bool {
        self.diff.contains_key(q)
    }

    pub fn knows_student(&self, s: &StudentId) -> bool {
        self.theta.contains_key(s)
    }

    /// Correct-answer probability for a pair, with cold-start fallbacks.
    pub fn predict(&self, s: &StudentId, q: &QuestionId) -> f64 {
        sigmoid(self.disc_of(q) * (self.theta_of(s) - self.diff_of(q)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn logit_clamped(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln().clamp(-3.0, 3.0)
}

/// Fits the model on the train split of `d`.
pub fn fit(d: &Dataset) -> IrtModel {
    fit_with(d, &FitConfig::default())
}

pub fn fit_with(d: &Dataset, cfg: &FitConfig) -> IrtModel {
    let mut students: Vec<StudentId> = Vec::new();
    let mut questions: Vec<QuestionId> = Vec::new();
    let mut s_index: HashMap<&StudentId, usize> = HashMap::new();
    let mut q_index: HashMap<&QuestionId, usize> = HashMap::new();
    let mut triples = Vec::new();
    for x in d.train() {
        let s = *s_index.entry(&x.student).or_insert_with(|| {
            students.push(x.student.clone());
            students.len() - 1
        });
        let q = *q_index.entry(&x.question).or_insert_with(|| {
            questions.push(x.question.clone());
            questions.len() - 1
        });
        triples.push((s, q, x.correct));
    }
    let objective = Objective::new(triples, students.len(), questions.len(), cfg.lambda);
    let (params, converged, rounds) = maximize(&objective, cfg);
    if !converged {
        log::warn!("IRT fit stopped after {rounds} rounds without reaching tolerance");
    }

    let theta: BTreeMap<StudentId, f64> =
        students.iter().cloned().zip(params.theta.iter().copied()).collect();
    let disc: BTreeMap<QuestionId, f64> = questions
        .iter()
        .cloned()
        .zip(params.log_a.iter().map(|x| x.exp()))
        .collect();
    let diff: BTreeMap<QuestionId, f64> =
        questions.iter().cloned().zip(params.b.iter().copied()).collect();
    let (ability_level, ability_stats) = discretize(&theta);
    let (difficulty_level, difficulty_stats) = discretize(&diff);
    IrtModel {
        theta,
        disc,
        diff,
        ability_level,
        difficulty_level,
        ability_stats,
        difficulty_stats,
        converged,
        rounds,
    }
}

/// Alternating Fisher-scoring ascent; returns the final iterate, whether the
/// tolerance was met, and the number of rounds run.
pub fn maximize(obj: &Objective, cfg: &FitConfig) -> (IrtParams, bool, usize) {
    let mut by_student: Vec<Vec<(u32, bool)>> = vec![Vec::new(); obj.n_students];
    let mut by_question: Vec<Vec<(u32, bool)>> = vec![Vec::new(); obj.n_questions];
    let mut s_correct = vec![0usize; obj.n_students];
    let mut q_correct = vec![0usize; obj.n_questions];
    for o in &obj.obs {
        by_student[o.student as usize].push((o.question, o.correct));
        by_question[o.question as usize].push((o.student, o.correct));
        if o.correct {
            s_correct[o.student as usize] += 1;
            q_correct[o.question as usize] += 1;
        }
    }
    let accuracy = |c: usize, n: usize| if n == 0 { 0.5 } else { c as f64 / n as f64 };
    let mut p = IrtParams {
        theta: (0..obj.n_students)
            .map(|s| logit_clamped(accuracy(s_correct[s], by_student[s].len())))
            .collect(),
        log_a: vec![0.0; obj.n_questions],
        b: (0..obj.n_questions)
            .map(|q| -logit_clamped(accuracy(q_correct[q], by_question[q].len())))
            .collect(),
    };

    let lambda = obj.lambda;
    let step_cap = cfg.max_step;
    for round in 1..=cfg.max_rounds {
        let start = p.clone();
        let new_theta: Vec<f64> = by_student
            .par_iter()
            .zip(p.theta.par_iter())
            .map(|(rows, &theta)| {
                let local = |t: f64| {
                    rows.iter()
                        .map(|&(q, y)| {
                            let z = p.log_a[q as usize].exp() * (t - p.b[q as usize]);
                            if y {
                                log_sigmoid(z)
                            } else {
                                log_sigmoid(-z)
                            }
                        })
                        .sum::<f64>()
                        - 0.5 * lambda * t * t
                };
                let (mut g, mut info) = (-lambda * theta, lambda);
                for &(q, y) in rows {
                    let a = p.log_a[q as usize].exp();
                    let prob = sigmoid(a * (theta - p.b[q as usize]));
                    g += a * (f64::from(u8::from(y)) - prob);
                    info += a * a * prob * (1.0 - prob);
                }
                let step = (g / info).clamp(-step_cap, step_cap);
                let base = local(theta);
                halve_until_ascent(|h| local(theta + h * step) >= base)
                    .map_or(theta, |h| theta + h * step)
            })
            .collect();
        p.theta = new_theta;

        let new_items: Vec<(f64, f64)> = by_question
            .par_iter()
            .enumerate()
            .map(|(q, rows)| {
                let local = |alpha: f64, b: f64| {
                    let a = alpha.exp();
                    rows.iter()
                        .map(|&(s, y)| {
                            let z = a * (p.theta[s as usize] - b);
                            if y {
                                log_sigmoid(z)
                            } else {
                                log_sigmoid(-z)
                            }
                        })
                        .sum::<f64>()
                        - 0.5 * lambda * (alpha * alpha + b * b)
                };
                let (alpha, b) = (p.log_a[q], p.b[q]);
                let a = alpha.exp();
                let (mut g_alpha, mut g_b) = (-lambda * alpha, -lambda * b);
                let (mut i_aa, mut i_bb, mut i_ab) = (lambda, lambda, 0.0);
                for &(s, y) in rows {
                    let diff = p.theta[s as usize] - b;
                    let z = a * diff;
                    let prob = sigmoid(z);
                    let w = prob * (1.0 - prob);
                    let r = f64::from(u8::from(y)) - prob;
                    g_alpha += r * z;
                    g_b -= a * r;
                    i_aa += z * z * w;
                    i_bb += a * a * w;
                    i_ab -= a * z * w;
                }
                // 2x2 Fisher system; det > 0 since lambda > 0.
                let det = i_aa * i_bb - i_ab * i_ab;
                let d_alpha = ((i_bb * g_alpha - i_ab * g_b) / det).clamp(-step_cap, step_cap);
                let d_b = ((i_aa * g_b - i_ab * g_alpha) / det).clamp(-step_cap, step_cap);
                let bound = cfg.max_log_disc;
                let candidate = |h: f64| ((alpha + h * d_alpha).clamp(-bound, bound), b + h * d_b);
                let base = local(alpha, b);
                halve_until_ascent(|h| {
                    let (na, nb) = candidate(h);
                    local(na, nb) >= base
                })
                .map_or((alpha, b), candidate)
            })
            .collect();
        for (q, (alpha, b)) in new_items.into_iter().enumerate() {
            p.log_a[q] = alpha;
            p.b[q] = b;
        }
        gauge_step(obj, &mut p, cfg.max_log_disc);
        extrapolate(obj, &mut p, &start, cfg.max_log_disc);
        let change = max_abs_diff(&p.theta, &start.theta)
            .max(max_abs_diff(&p.log_a, &start.log_a))
            .max(max_abs_diff(&p.b, &start.b));
        if change < cfg.tolerance {
            return (p, true, round);
        }
    }
    (p, false, cfg.max_rounds)
}

/// Moves along the directions the likelihood cannot see: a common shift of
/// theta and b, and the rescaling theta, b -> c theta, c b with a -> a / c.
/// Block updates alone crawl along this ridge for thousands of rounds.
///
/// The shift only changes the penalty, so its minimizer is exact. The scale
/// is line-searched on the full objective because a discrimination held at
/// the bound does not rescale.
fn gauge_step(obj: &Objective, p: &mut IrtParams, max_log_disc: f64) {
    let n = (p.theta.len() + p.b.len()) as f64;
    let shift = -(p.theta.iter().sum::<f64>() + p.b.iter().sum::<f64>()) / n;
    for x in p.theta.iter_mut().chain(p.b.iter_mut()) {
        *x += shift;
    }
    let scaled = |s: f64| IrtParams {
        theta: p.theta.iter().map(|x| x * s.exp()).collect(),
        log_a: p
            .log_a
            .iter()
            .map(|a| (a - s).clamp(-max_log_disc, max_log_disc))
            .collect(),
        b: p.b.iter().map(|x| x * s.exp()).collect(),
    };
    let f = |s: f64| obj.value(&scaled(s));
    let s = golden_max(f, -1.0, 1.0, 1e-9);
    if f(s) > f(0.0) {
        *p = scaled(s);
    }
}

/// Golden-section maximum of `f` on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let (mut x1, mut x2) = (hi - r * (hi - lo), lo + r * (hi - lo));
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 < f2 {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        }
    }
    0.5 * (lo + hi)
}

/// Block ascent converges linearly, slowly when the problem is badly
/// conditioned; a line search along the round's displacement `p - start`
/// jumps ahead along it.
fn extrapolate(obj: &Objective, p: &mut IrtParams, start: &IrtParams, max_log_disc: f64) {
    let along = |t: f64| {
        let step = |x: &[f64], x0: &[f64]| -> Vec<f64> { x.iter().zip(x0).map(|(a, b)| a + t * (a - b)).collect() };
        IrtParams {
            theta: step(&p.theta, &start.theta),
            log_a: step(&p.log_a, &start.log_a)
                .into_iter()
                .map(|a| a.clamp(-max_log_disc, max_log_disc))
                .collect(),
            b: step(&p.b, &start.b),
        }
    };
    let t = golden_max(|t| obj.value(&along(t)), 0.0, MAX_EXTRAPOLATION, 1e-3);
    let candidate = along(t);
    if obj.value(&candidate) > obj.value(p) {
        *p = candidate;
    }
}

/// Largest step fraction in {1, 1/2, ..., 2^-20} accepted by `ok`.
fn halve_until_ascent(ok: impl Fn(f64) -> bool) -> Option<f64> {
    let mut h = 1.0;
    for _ in 0..=20 {
        if ok(h) {
            return Some(h);
        }
        h *= 0.5;
    }
    None
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
