//! Similar-student retrieval.
//!
//! Students met on the retained paths of a target question form the
//! candidate set. Each (target, candidate) pair is encoded as five
//! dissimilarity features and candidates are ranked by Mahalanobis distance
//! under a mean and shrinkage-regularized covariance estimated from random
//! student pairs.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Cholesky, Matrix5, SymmetricEigen, Vector5};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ids::{KcId, QuestionId, StudentId};
use crate::irt::IrtModel;
use crate::mrhin::{Mrhin, NodeKind};
use crate::pathscore::ScoredInstance;

pub const DEFAULT_DECAY: f64 = 2.0;
pub const DEFAULT_PAIR_SAMPLE: usize = 10_000;
pub const EIGEN_FLOOR: f64 = 1e-8;
pub const MIN_SHRINKAGE: f64 = 0.05;

/// `[ability gap, KC-accuracy gap, shared-question decay, shared-KC decay,
/// co-occurrence decay]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; 5]);

impl FeatureVector {
    pub fn ability_gap(&self) -> f64 {
        self.0[0]
    }
    pub fn accuracy_gap(&self) -> f64 {
        self.0[1]
    }
    pub fn shared_questions(&self) -> f64 {
        self.0[2]
    }
    pub fn shared_concepts(&self) -> f64 {
        self.0[3]
    }
    pub fn co_occurrence(&self) -> f64 {
        self.0[4]
    }

    fn vector(&self) -> Vector5<f64> {
        Vector5::from_column_slice(&self.0)
    }
}

/// Train-split interaction summary of one student.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Profile {
    pub questions: BTreeSet<QuestionId>,
    /// `(correct, answered)` per concept.
    pub concepts: BTreeMap<KcId, (u32, u32)>,
}

impl Profile {
    pub fn accuracy(&self, k: &KcId) -> Option<f64> {
        self.concepts
            .get(k)
            .filter(|(_, n)| *n > 0)
            .map(|&(c, n)| f64::from(c) / f64::from(n))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Profiles {
    by_student: BTreeMap<StudentId, Profile>,
}

impl Profiles {
    pub fn from_train(d: &Dataset) -> Self {
        let mut by_student: BTreeMap<StudentId, Profile> = BTreeMap::new();
        for s in d.students() {
            by_student.entry(s).or_default();
        }
        for x in d.train() {
            let p = by_student.entry(x.student.clone()).or_default();
            p.questions.insert(x.question.clone());
            for k in &x.kcs {
                let e = p.concepts.entry(k.clone()).or_default();
                e.0 += u32::from(x.correct);
                e.1 += 1;
            }
        }
        Self { by_student }
    }

    pub fn get(&self, s: &StudentId) -> Option<&Profile> {
        self.by_student.get(s)
    }

    pub fn students(&self) -> impl Iterator<Item = &StudentId> {
        self.by_student.keys()
    }

    pub fn len(&self) -> usize {
        self.by_student.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_student.is_empty()
    }
}

fn decay(count: usize, c: f64) -> f64 {
    (1.0 + count as f64).powf(-c)
}

/// Five-dimensional pair features. With no shared concept the accuracy gap
/// takes its maximum `c`.
pub fn encode(
    u: &StudentId,
    s: &StudentId,
    f: usize,
    m: &IrtModel,
    profiles: &Profiles,
    c: f64,
) -> FeatureVector {
    let empty = Profile::default();
    let pu = profiles.get(u).unwrap_or(&empty);
    let ps = profiles.get(s).unwrap_or(&empty);
    let ability_gap = (m.theta_of(u) - m.theta_of(s)).abs();
    let shared_kcs: Vec<&KcId> = pu
        .concepts
        .keys()
        .filter(|k| ps.concepts.contains_key(*k))
        .collect();
    let accuracy_gap = if shared_kcs.is_empty() {
        c
    } else {
        let sum: f64 = shared_kcs
            .iter()
            .map(|k| (pu.accuracy(k).unwrap_or(0.0) - ps.accuracy(k).unwrap_or(0.0)).abs())
            .sum();
        c * sum / shared_kcs.len() as f64
    };
    let shared_questions = pu.questions.intersection(&ps.questions).count();
    FeatureVector([
        ability_gap,
        accuracy_gap,
        decay(shared_questions, c),
        decay(shared_kcs.len(), c),
        decay(f, c),
    ])
}

/// Reference point distances are measured from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Centering {
    /// The mean pair `mu`.
    Mean,
    /// The zero vector, i.e. a pair with no measured dissimilarity.
    #[default]
    Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityModel {
    pub mu: [f64; 5],
    pub sigma: [[f64; 5]; 5],
    pub shrinkage_lambda: f64,
    pub pair_sample_size: usize,
    pub centering: Centering,
}

fn to_matrix(a: &[[f64; 5]; 5]) -> Matrix5<f64> {
    Matrix5::from_fn(|i, j| a[i][j])
}

fn from_matrix(m: &Matrix5<f64>) -> [[f64; 5]; 5] {
    let mut out = [[0.0; 5]; 5];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    out
}

pub fn min_eigenvalue(a: &[[f64; 5]; 5]) -> f64 {
    SymmetricEigen::new(to_matrix(a))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Sample mean and (n - 1)-normalized covariance.
pub fn mean_and_covariance(features: &[FeatureVector]) -> ([f64; 5], [[f64; 5]; 5]) {
    let n = features.len();
    let mut mu = [0.0; 5];
    for z in features {
        for (m, v) in mu.iter_mut().zip(z.0) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n.max(1) as f64;
    }
    let mut cov = [[0.0; 5]; 5];
    if n > 1 {
        for z in features {
            for i in 0..5 {
                for j in 0..5 {
                    cov[i][j] += (z.0[i] - mu[i]) * (z.0[j] - mu[j]);
                }
            }
        }
        for row in &mut cov {
            for v in row.iter_mut() {
                *v /= (n - 1) as f64;
            }
        }
    }
    (mu, cov)
}

/// `(1 - lambda) S + lambda (tr S / 5) I` with the smallest lambda on the
/// 0.01 grid from 0.05 to 1 whose smallest eigenvalue reaches the floor.
/// A covariance with no spread at all falls back to `1e-8 I`.
pub fn shrink(cov: &[[f64; 5]; 5]) -> ([[f64; 5]; 5], f64) {
    let s = to_matrix(cov);
    let target = s.trace() / 5.0;
    for step in 5..=100 {
        let lambda = f64::from(step) / 100.0;
        let shrunk = s * (1.0 - lambda) + Matrix5::identity() * (lambda * target);
        let out = from_matrix(&shrunk);
        if min_eigenvalue(&out) >= EIGEN_FLOOR {
            return (out, lambda);
        }
    }
    (from_matrix(&(Matrix5::identity() * EIGEN_FLOOR)), 1.0)
}

impl SimilarityModel {
    pub fn new(mu: [f64; 5], sigma: [[f64; 5]; 5]) -> Result<Self> {
        let m = Self {
            mu,
            sigma,
            shrinkage_lambda: 0.0,
            pair_sample_size: 0,
            centering: Centering::Mean,
        };
        m.factor()?;
        Ok(m)
    }

    /// Mean and shrunk covariance of a feature sample.
    pub fn from_features(features: &[FeatureVector]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Model("no feature vectors to fit".into()));
        }
        let (mu, cov) = mean_and_covariance(features);
        let (sigma, shrinkage_lambda) = shrink(&cov);
        Ok(Self {
            mu,
            sigma,
            shrinkage_lambda,
            pair_sample_size: features.len(),
            centering: Centering::Mean,
        })
    }

    fn factor(&self) -> Result<Cholesky<f64, nalgebra::U5>> {
        Cholesky::new(to_matrix(&self.sigma))
            .ok_or_else(|| Error::Model("covariance is not positive definite".into()))
    }

    pub fn with_centering(mut self, centering: Centering) -> Self {
        self.centering = centering;
        self
    }

    pub fn center(&self) -> [f64; 5] {
        match self.centering {
            Centering::Mean => self.mu,
            Centering::Origin => [0.0; 5],
        }
    }

    /// `sqrt((z - c)^T Sigma^-1 (z - c))` through a Cholesky solve, with `c`
    /// the reference point of the centering.
    pub fn distance(&self, z: &FeatureVector) -> Result<f64> {
        let chol = self.factor()?;
        let diff = z.vector() - Vector5::from_column_slice(&self.center());
        let whitened = chol
            .l()
            .solve_lower_triangular(&diff)
            .ok_or_else(|| Error::Model("singular factor".into()))?;
        Ok(whitened.norm())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Maps a pair index in `0..n(n-1)/2` to `(i, j)` with `i < j`.
fn pair_from_index(mut k: usize, n: usize) -> (usize, usize) {
    let mut i = 0;
    loop {
        let row = n - 1 - i;
        if k < row {
            return (i, i + 1 + k);
        }
        k -= row;
        i += 1;
    }
}

/// Fits mean and covariance on distinct unordered student pairs drawn
/// uniformly (co-occurrence taken as zero).
pub fn fit_similarity(
    d: &Dataset,
    m: &IrtModel,
    profiles: &Profiles,
    sample_pairs: usize,
    seed: u64,
    c: f64,
) -> Result<SimilarityModel> {
    let students: Vec<StudentId> = d.students().into_iter().collect();
    let n = students.len();
    if n < 2 {
        return Err(Error::Model(format!("need at least 2 students, have {n}")));
    }
    let total = n * (n - 1) / 2;
    let take = sample_pairs.min(total).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, take).into_vec();
    picks.sort_unstable();
    let features: Vec<FeatureVector> = picks
        .into_iter()
        .map(|k| {
            let (i, j) = pair_from_index(k, n);
            encode(&students[i], &students[j], 0, m, profiles, c)
        })
        .collect();
    SimilarityModel::from_features(&features)
}

/// Where the pairs behind `(mu, Sigma)` come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    /// Uniform random student pairs with co-occurrence zero.
    #[default]
    Random,
    /// Student pairs that co-occur on stored path instances, with their
    /// co-occurrence counts.
    Paths,
}

/// Unordered student pairs co-occurring within an instance, with the number
/// of instances they share.
pub fn path_pairs<'a>(
    paths: impl IntoIterator<Item = &'a ScoredInstance>,
    g: &Mrhin,
) -> BTreeMap<(StudentId, StudentId), usize> {
    let mut out: BTreeMap<(StudentId, StudentId), usize> = BTreeMap::new();
    for p in paths {
        let students: BTreeSet<StudentId> = p
            .instance
            .nodes
            .iter()
            .filter(|&&n| g.kind(n) == NodeKind::Student)
            .map(|&n| StudentId::new(g.raw_id(n)))
            .collect();
        let students: Vec<StudentId> = students.into_iter().collect();
        for i in 0..students.len() {
            for j in i + 1..students.len() {
                *out.entry((students[i].clone(), students[j].clone())).or_default() += 1;
            }
        }
    }
    out
}

/// Fits on up to `sample_pairs` co-occurring pairs drawn uniformly.
pub fn fit_similarity_from_pairs(
    pairs: &BTreeMap<(StudentId, StudentId), usize>,
    m: &IrtModel,
    profiles: &Profiles,
    sample_pairs: usize,
    seed: u64,
    c: f64,
) -> Result<SimilarityModel> {
    if pairs.is_empty() {
        return Err(Error::Model("no co-occurring student pairs on stored paths".into()));
    }
    let all: Vec<(&(StudentId, StudentId), &usize)> = pairs.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, all.len(), sample_pairs.min(all.len())).into_vec();
    picks.sort_unstable();
    let features: Vec<FeatureVector> = picks
        .into_iter()
        .map(|i| {
            let ((u, s), &f) = all[i];
            encode(u, s, f, m, profiles, c)
        })
        .collect();
    SimilarityModel::from_features(&features)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub target_student: StudentId,
    pub target_question: QuestionId,
    /// Candidate to total occurrence count across the retained paths.
    pub candidates: BTreeMap<StudentId, usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Distinct students on the retained paths of the target question, minus
/// the target student, with their occurrence counts.
pub fn build_candidates(
    paths: &[ScoredInstance],
    g: &Mrhin,
    target_student: &StudentId,
    target_question: &QuestionId,
) -> CandidateSet {
    let mut candidates: BTreeMap<StudentId, usize> = BTreeMap::new();
    for p in paths {
        for &n in &p.instance.nodes {
            if g.kind(n) == NodeKind::Student {
                let s = StudentId::new(g.raw_id(n));
                if &s != target_student {
                    *candidates.entry(s).or_default() += 1;
                }
            }
        }
    }
    CandidateSet {
        target_student: target_student.clone(),
        target_question: target_question.clone(),
        candidates,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrievalMode {
    Similar,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPeer {
    pub student: StudentId,
    pub distance: Option<f64>,
    pub features: FeatureVector,
}

/// Picks `min(s, |candidates|)` peers: ascending distance with ties by
/// student id, or a seeded uniform draw.
pub fn top_s(
    cands: &CandidateSet,
    sm: &SimilarityModel,
    s: usize,
    mode: RetrievalMode,
    seed: u64,
    mut features: impl FnMut(&StudentId, usize) -> FeatureVector,
) -> Result<Vec<RankedPeer>> {
    let s = s.min(cands.len());
    match mode {
        RetrievalMode::Random => {
            let ids: Vec<(&StudentId, &usize)> = cands.candidates.iter().collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(sample(&mut rng, ids.len(), s)
                .into_iter()
                .map(|i| RankedPeer {
                    student: ids[i].0.clone(),
                    distance: None,
                    features: features(ids[i].0, *ids[i].1),
                })
                .collect())
        }
        RetrievalMode::Similar => {
            let mut ranked = cands
                .candidates
                .iter()
                .map(|(id, &f)| {
                    let z = features(id, f);
                    Ok(RankedPeer {
                        student: id.clone(),
                        distance: Some(sm.distance(&z)?),
                        features: z,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            ranked.sort_by(|a, b| {
                a.distance
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&b.distance.unwrap_or(f64::INFINITY))
                    .then_with(|| a.student.cmp(&b.student))
            });
            ranked.truncate(s);
            Ok(ranked)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;
    use crate::irt;
    use crate::mrhin::{MetaPathTemplate, NodeId, PathInstance};
    use crate::pathscore::{PathScore, ScoreBackend};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn identity_model() -> SimilarityModel {
        let mut sigma = [[0.0; 5]; 5];
        for (i, row) in sigma.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        SimilarityModel::new([0.0; 5], sigma).unwrap()
    }

    #[test]
    fn distance_reference_values() {
        let sm = identity_model();
        assert_eq!(sm.distance(&FeatureVector([3.0, 4.0, 0.0, 0.0, 0.0])).unwrap(), 5.0);
        assert_eq!(sm.distance(&FeatureVector([0.0; 5])).unwrap(), 0.0);
        let mut sigma = sm.sigma;
        sigma[0][0] = 4.0;
        let diag = SimilarityModel::new([0.0; 5], sigma).unwrap();
        assert!((diag.distance(&FeatureVector([2.0, 0.0, 0.0, 0.0, 0.0])).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn singular_covariance_is_rejected() {
        assert!(matches!(SimilarityModel::new([0.0; 5], [[0.0; 5]; 5]), Err(Error::Model(_))));
    }

    #[test]
    fn decay_values() {
        assert_eq!(decay(0, 2.0), 1.0);
        assert_eq!(decay(3, 2.0), 0.0625);
        assert_eq!(decay(1, 2.0), 0.25);
    }

    #[test]
    fn pair_index_enumerates_upper_triangle() {
        let n = 6;
        let pairs: Vec<_> = (0..n * (n - 1) / 2).map(|k| pair_from_index(k, n)).collect();
        let mut expected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                expected.push((i, j));
            }
        }
        assert_eq!(pairs, expected);
    }

    #[test]
    fn identical_features_fall_back_to_floor() {
        let zs = vec![FeatureVector([0.5, 0.1, 1.0, 1.0, 1.0]); 50];
        let sm = SimilarityModel::from_features(&zs).unwrap();
        assert_eq!(sm.shrinkage_lambda, 1.0);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(sm.sigma[i][j], if i == j { EIGEN_FLOOR } else { 0.0 });
            }
        }
        assert!(sm.distance(&zs[0]).unwrap() < 1e-9);
    }

    #[test]
    fn diagonal_covariance_is_recovered() {
        let stds = [1.0f64, 1.2, 1.4, 1.6, 1.8].map(f64::sqrt);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normals: Vec<Normal<f64>> = stds.iter().map(|&s| Normal::new(0.0, s).unwrap()).collect();
        let zs: Vec<FeatureVector> = (0..10_000)
            .map(|_| {
                let mut v = [0.0; 5];
                for (x, n) in v.iter_mut().zip(&normals) {
                    *x = n.sample(&mut rng);
                }
                FeatureVector(v)
            })
            .collect();
        let sm = SimilarityModel::from_features(&zs).unwrap();
        assert_eq!(sm.shrinkage_lambda, MIN_SHRINKAGE);
        for i in 0..5 {
            let want = stds[i] * stds[i];
            assert!((sm.sigma[i][i] - want).abs() / want < 0.10, "axis {i}: {}", sm.sigma[i][i]);
        }
    }

    proptest! {
        #[test]
        fn shrinkage_is_positive_definite(
            rows in proptest::collection::vec(proptest::array::uniform5(-3.0f64..3.0), 1..8),
            rank_drop in 0usize..5,
        ) {
            // Collapse some axes to make the sample covariance singular.
            let zs: Vec<FeatureVector> = rows
                .into_iter()
                .map(|mut r| {
                    for v in r.iter_mut().take(rank_drop) {
                        *v = 0.25;
                    }
                    FeatureVector(r)
                })
                .collect();
            let sm = SimilarityModel::from_features(&zs).unwrap();
            prop_assert!(min_eigenvalue(&sm.sigma) >= EIGEN_FLOOR * (1.0 - 1e-9));
            prop_assert!(sm.distance(&zs[0]).is_ok());
        }

        #[test]
        fn whitening_invariance(
            z in proptest::array::uniform5(-2.0f64..2.0),
            mu in proptest::array::uniform5(-1.0f64..1.0),
            scale in proptest::array::uniform5(0.1f64..10.0),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix5::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            let sigma = a * a.transpose() + Matrix5::identity() * 0.5;
            let base = SimilarityModel::new(mu, from_matrix(&sigma)).unwrap();
            let d = Matrix5::from_diagonal(&Vector5::from_column_slice(&scale));
            let scaled = SimilarityModel::new(
                std::array::from_fn(|i| mu[i] * scale[i]),
                from_matrix(&(d * sigma * d)),
            )
            .unwrap();
            let z2 = FeatureVector(std::array::from_fn(|i| z[i] * scale[i]));
            let d1 = base.distance(&FeatureVector(z)).unwrap();
            let d2 = scaled.distance(&z2).unwrap();
            prop_assert!((d1 - d2).abs() <= 1e-9 * d1.max(1.0));
            if z != mu {
                prop_assert!(d1 > 0.0);
            }
        }
    }

    fn fixture() -> (Dataset, IrtModel, Profiles) {
        let row = |s: &str, q: &str, k: &str, c: bool, t| Interaction {
            student: StudentId::new(s),
            question: QuestionId::new(q),
            kcs: [KcId::new(k)].into(),
            correct: c,
            timestamp: t,
        };
        let d = Dataset::from_interactions(vec![
            row("u", "q1", "k1", true, 0),
            row("u", "q2", "k1", false, 1),
            row("u", "q3", "k2", true, 2),
            row("s", "q1", "k1", true, 0),
            row("s", "q4", "k2", false, 1),
            row("s", "q5", "k3", true, 2),
            row("t", "q5", "k3", true, 0),
        ])
        .unwrap();
        let theta: BTreeMap<_, _> = [
            (StudentId::new("u"), 0.5),
            (StudentId::new("s"), -0.25),
            (StudentId::new("t"), 0.5),
        ]
        .into();
        let (ability_level, ability_stats) = irt::discretize(&theta);
        let m = IrtModel {
            theta,
            disc: BTreeMap::new(),
            diff: BTreeMap::new(),
            ability_level,
            difficulty_level: BTreeMap::new(),
            ability_stats,
            difficulty_stats: ability_stats,
            converged: true,
            rounds: 0,
        };
        let profiles = Profiles::from_train(&d);
        (d, m, profiles)
    }

    #[test]
    fn encode_hand_values() {
        let (_, m, p) = fixture();
        let (u, s, t) = (StudentId::new("u"), StudentId::new("s"), StudentId::new("t"));
        let z = encode(&u, &s, 1, &m, &p, 2.0);
        // Shared KCs {k1, k2}: |0.5 - 1| and |1 - 0|, mean 0.75, times c.
        assert_eq!(z.0, [0.75, 1.5, 0.25, 1.0 / 9.0, 0.25]);
        // u and t share nothing: accuracy gap takes c.
        let z = encode(&u, &t, 0, &m, &p, 2.0);
        assert_eq!(z.0, [0.0, 2.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn encode_is_symmetric() {
        let (_, m, p) = fixture();
        let ids = ["u", "s", "t"].map(StudentId::new);
        for a in &ids {
            for b in &ids {
                assert_eq!(encode(a, b, 3, &m, &p, 2.0), encode(b, a, 3, &m, &p, 2.0));
            }
        }
    }

    #[test]
    fn fit_similarity_errors_and_determinism() {
        let (d, m, p) = fixture();
        let a = fit_similarity(&d, &m, &p, 10_000, 5, 2.0).unwrap();
        assert_eq!(a, fit_similarity(&d, &m, &p, 10_000, 5, 2.0).unwrap());
        assert_eq!(a.pair_sample_size, 3);
        let one = Dataset::from_interactions(vec![d.interactions()[0].clone()]).unwrap();
        assert!(matches!(fit_similarity(&one, &m, &p, 10, 5, 2.0), Err(Error::Model(_))));
    }

    fn graph_with_students() -> Mrhin {
        let (d, m, _) = fixture();
        let mut m = m;
        m.theta.insert(StudentId::new("v"), 0.0);
        crate::mrhin::build(&d, &m)
    }

    fn scored_path(g: &Mrhin, labels: &[&str]) -> ScoredInstance {
        let nodes: Vec<NodeId> = labels.iter().map(|l| g.lookup(l).unwrap()).collect();
        ScoredInstance {
            instance: PathInstance {
                template: MetaPathTemplate::by_name("Q-U-Q").unwrap(),
                target_kc: g.target_concept(nodes[0]).unwrap(),
                nodes,
            },
            score: PathScore::new([0.0; 4], ScoreBackend::Formula),
        }
    }

    #[test]
    fn candidates_dedup_count_and_exclude_target() {
        let g = graph_with_students();
        let q = QuestionId::new("q1");
        let one = scored_path(&g, &["Q:q1", "U:u", "Q:q2", "U:u", "Q:q1", "U:s", "Q:q1"]);
        let c = build_candidates(std::slice::from_ref(&one), &g, &StudentId::new("t"), &q);
        assert_eq!(c.candidates, [(StudentId::new("u"), 2), (StudentId::new("s"), 1)].into());
        let c = build_candidates(std::slice::from_ref(&one), &g, &StudentId::new("u"), &q);
        assert!(!c.candidates.contains_key(&StudentId::new("u")));
        let two = scored_path(&g, &["Q:q1", "U:s", "Q:q1"]);
        let c = build_candidates(&[one, two], &g, &StudentId::new("t"), &q);
        assert_eq!(c.candidates[&StudentId::new("s")], 2);
        assert!(build_candidates(&[], &g, &StudentId::new("t"), &q).is_empty());
    }

    #[test]
    fn top_s_orders_by_distance_then_id() {
        let sm = identity_model();
        let cands = CandidateSet {
            target_student: StudentId::new("x"),
            target_question: QuestionId::new("q"),
            candidates: [("u1", 1), ("u2", 1), ("u3", 1), ("u0", 1)]
                .map(|(s, f)| (StudentId::new(s), f))
                .into(),
        };
        let dist = |s: &StudentId| match s.as_str() {
            "u1" => 0.2,
            "u2" => 0.9,
            "u3" => 0.5,
            _ => 0.9,
        };
        let feat = |s: &StudentId, _| FeatureVector([dist(s), 0.0, 0.0, 0.0, 0.0]);
        let ids = |v: Vec<RankedPeer>| v.into_iter().map(|p| p.student.0).collect::<Vec<_>>();
        assert_eq!(ids(top_s(&cands, &sm, 2, RetrievalMode::Similar, 0, feat).unwrap()), ["u1", "u3"]);
        assert_eq!(ids(top_s(&cands, &sm, 1, RetrievalMode::Similar, 0, feat).unwrap()), ["u1"]);
        assert_eq!(
            ids(top_s(&cands, &sm, 4, RetrievalMode::Similar, 0, feat).unwrap()),
            ["u1", "u3", "u0", "u2"]
        );
        let r1 = ids(top_s(&cands, &sm, 2, RetrievalMode::Random, 8, feat).unwrap());
        assert_eq!(r1, ids(top_s(&cands, &sm, 2, RetrievalMode::Random, 8, feat).unwrap()));
        assert_eq!(r1.len(), 2);
        let empty = CandidateSet {
            candidates: BTreeMap::new(),
            ..cands
        };
        assert!(top_s(&empty, &sm, 3, RetrievalMode::Similar, 0, feat).unwrap().is_empty());
    }
}
