//! Seeded synthetic interaction logs with known generating parameters.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Interaction};
use crate::error::Result;
use crate::ids::{KcId, QuestionId, StudentId};
use crate::irt::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub theta: BTreeMap<StudentId, f64>,
    pub disc: BTreeMap<QuestionId, f64>,
    pub diff: BTreeMap<QuestionId, f64>,
}

fn student(i: usize) -> StudentId {
    StudentId::new(format!("s{i:04}"))
}

fn question(j: usize) -> QuestionId {
    QuestionId::new(format!("q{j:04}"))
}

fn concept(k: usize) -> KcId {
    KcId::new(format!("k{k:02}"))
}

/// Complete response matrix from the two-parameter logistic model:
/// theta, b ~ N(0, 1), a ~ LogNormal(0, 0.3); one of five KCs per question.
pub fn irt_responses(n_students: usize, n_questions: usize, seed: u64) -> Result<(Dataset, TrueParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    let lognormal = LogNormal::new(0.0, 0.3).expect("valid lognormal");
    let theta: Vec<f64> = (0..n_students).map(|_| normal.sample(&mut rng)).collect();
    let b: Vec<f64> = (0..n_questions).map(|_| normal.sample(&mut rng)).collect();
    let a: Vec<f64> = (0..n_questions).map(|_| lognormal.sample(&mut rng)).collect();
    let mut rows = Vec::with_capacity(n_students * n_questions);
    for (i, t) in theta.iter().enumerate() {
        for j in 0..n_questions {
            let p = sigmoid(a[j] * (t - b[j]));
            rows.push(Interaction {
                student: student(i),
                question: question(j),
                kcs: [concept(j % 5)].into(),
                correct: rng.gen::<f64>() < p,
                timestamp: j as i64,
            });
        }
    }
    let truth = TrueParams {
        theta: theta.into_iter().enumerate().map(|(i, t)| (student(i), t)).collect(),
        disc: a.into_iter().enumerate().map(|(j, x)| (question(j), x)).collect(),
        diff: b.into_iter().enumerate().map(|(j, x)| (question(j), x)).collect(),
    };
    Ok((Dataset::from_interactions(rows)?, truth))
}

/// Students in clusters of identical ability whose mastery of each KC is
/// shifted by a cluster-specific offset, so peers from the same cluster
/// carry KC-level information a one-dimensional ability cannot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub clusters: usize,
    pub cluster_size: usize,
    pub questions: usize,
    pub concepts: usize,
    pub answers_per_student: usize,
    pub ability_sd: f64,
    pub concept_effect_sd: f64,
    /// Probability a question carries a second KC.
    pub second_kc: f64,
    /// When set, each student practises only this many randomly chosen
    /// concepts and answers questions of those concepts.
    pub concepts_per_student: Option<usize>,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            clusters: 10,
            cluster_size: 10,
            questions: 80,
            concepts: 8,
            answers_per_student: 40,
            ability_sd: 0.8,
            concept_effect_sd: 2.0,
            second_kc: 0.2,
            concepts_per_student: Some(4),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTruth {
    pub cluster_of: BTreeMap<StudentId, usize>,
    pub cluster_theta: Vec<f64>,
    /// `offset[cluster][concept]`.
    pub offset: Vec<Vec<f64>>,
    pub disc: BTreeMap<QuestionId, f64>,
    pub diff: BTreeMap<QuestionId, f64>,
}

pub fn clustered(spec: &ClusterSpec) -> Result<(Dataset, ClusterTruth)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ability = Normal::new(0.0, spec.ability_sd).expect("valid normal");
    let effect = Normal::new(0.0, spec.concept_effect_sd).expect("valid normal");
    let difficulty = Normal::new(0.0, 1.0).expect("valid normal");
    let lognormal = LogNormal::new(0.0, 0.2).expect("valid lognormal");

    let cluster_theta: Vec<f64> = (0..spec.clusters).map(|_| ability.sample(&mut rng)).collect();
    let offset: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| (0..spec.concepts).map(|_| effect.sample(&mut rng)).collect())
        .collect();
    let mut q_kcs: Vec<Vec<usize>> = Vec::with_capacity(spec.questions);
    for j in 0..spec.questions {
        let mut ks = vec![j % spec.concepts];
        if rng.gen::<f64>() < spec.second_kc {
            let extra = rng.gen_range(0..spec.concepts);
            if extra != ks[0] {
                ks.push(extra);
            }
        }
        q_kcs.push(ks);
    }
    let b: Vec<f64> = (0..spec.questions).map(|_| difficulty.sample(&mut rng)).collect();
    let a: Vec<f64> = (0..spec.questions).map(|_| lognormal.sample(&mut rng)).collect();

    let mut rows = Vec::new();
    let mut cluster_of = BTreeMap::new();
    let mut all_concepts: Vec<usize> = (0..spec.concepts).collect();
    for c in 0..spec.clusters {
        for m in 0..spec.cluster_size {
            let i = c * spec.cluster_size + m;
            cluster_of.insert(student(i), c);
            let mut order: Vec<usize> = match spec.concepts_per_student {
                Some(n) => {
                    all_concepts.shuffle(&mut rng);
                    let practised = &all_concepts[..n.min(spec.concepts)];
                    (0..spec.questions)
                        .filter(|&j| practised.contains(&q_kcs[j][0]))
                        .collect()
                }
                None => (0..spec.questions).collect(),
            };
            order.shuffle(&mut rng);
            for (t, &j) in order.iter().take(spec.answers_per_student).enumerate() {
                let shift =
                    q_kcs[j].iter().map(|&k| offset[c][k]).sum::<f64>() / q_kcs[j].len() as f64;
                let p = sigmoid(a[j] * (cluster_theta[c] + shift - b[j]));
                rows.push(Interaction {
                    student: student(i),
                    question: question(j),
                    kcs: q_kcs[j].iter().map(|&k| concept(k)).collect(),
                    correct: rng.gen::<f64>() < p,
                    timestamp: t as i64,
                });
            }
        }
    }
    let truth = ClusterTruth {
        cluster_of,
        cluster_theta,
        offset,
        disc: a.into_iter().enumerate().map(|(j, x)| (question(j), x)).collect(),
        diff: b.into_iter().enumerate().map(|(j, x)| (question(j), x)).collect(),
    };
    Ok((Dataset::from_interactions(rows)?, truth))
}
