//! Stage functions shared by the experiment driver and the command line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScoreBackendKind};
use crate::dataset::{self, Dataset, IngestStats, Interaction, Split};
use crate::error::{Error, Result};
use crate::hashing::derive_seed;
use crate::ids::{QuestionId, StudentId};
use crate::irt::IrtModel;
use crate::llm::{bounded_map, LlmClient};
use crate::mrhin::{self, InstanceStore, MetaPathTemplate, Mrhin, NodeId, PathInstance};
use crate::pathscore::{self, FormulaEchoClient, ScoredInstance, ScoredRecord, SelectionMode};
use crate::predict::{self, AblationMask, HistoryIndex, Prediction};
use crate::retrieval::{self, PairSource, Profiles, RankedPeer, RetrievalMode, SimilarityModel};

pub fn ingest_reader<R: Read>(source: R, cfg: &RunConfig) -> Result<(Dataset, IngestStats)> {
    let (d, stats) = dataset::ingest_with(source, b',', cfg.min_records)?;
    Ok((dataset::split(d, cfg.seed), stats))
}

pub fn ingest_path(path: &Path, cfg: &RunConfig) -> Result<(Dataset, IngestStats)> {
    ingest_reader(File::open(path)?, cfg)
}

/// Questions that occur as prediction targets.
pub fn target_questions(d: &Dataset, g: &Mrhin) -> Vec<NodeId> {
    let qs: BTreeSet<&QuestionId> = d.in_split(Split::Test).map(|x| &x.question).collect();
    qs.into_iter().filter_map(|q| g.question(q)).collect()
}

pub fn sample_paths(d: &Dataset, g: &Mrhin, cfg: &RunConfig, seed: u64) -> InstanceStore {
    let questions = target_questions(d, g);
    let instances = mrhin::sample_all(
        g,
        &questions,
        MetaPathTemplate::registry(),
        cfg.n_walks,
        cfg.walk_len,
        seed,
    );
    InstanceStore::from_instances(g, cfg.n_walks, cfg.walk_len, seed, &instances)
}

/// Scored instances grouped by target question label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredStore {
    pub by_question: BTreeMap<String, Vec<ScoredRecord>>,
}

pub type ScoredPaths = BTreeMap<NodeId, Vec<ScoredInstance>>;

impl ScoredStore {
    pub fn from_scored(g: &Mrhin, scored: &ScoredPaths) -> Self {
        Self {
            by_question: scored
                .iter()
                .map(|(&q, v)| {
                    (
                        g.label(q).to_owned(),
                        v.iter().map(|s| ScoredRecord::from_scored(g, s)).collect(),
                    )
                })
                .collect(),
        }
    }

    pub fn scored(&self, g: &Mrhin) -> Result<ScoredPaths> {
        self.by_question
            .iter()
            .map(|(q, v)| {
                let qn = g
                    .lookup(q)
                    .ok_or_else(|| Error::Config(format!("unknown question `{q}`")))?;
                Ok((qn, v.iter().map(|r| r.to_scored(g)).collect::<Result<_>>()?))
            })
            .collect()
    }
}

/// Formula scores, or LLM scores through `client` (the formula echo client
/// when none is given).
pub fn score_paths(
    g: &Mrhin,
    instances: &BTreeMap<NodeId, Vec<PathInstance>>,
    backend: ScoreBackendKind,
    client: Option<&dyn LlmClient>,
) -> Result<ScoredPaths> {
    let echo = FormulaEchoClient::new(g);
    instances
        .iter()
        .map(|(&q, ps)| {
            let scored = match backend {
                ScoreBackendKind::Formula => pathscore::score_all(g, ps),
                ScoreBackendKind::Llm => pathscore::score_all_llm(g, ps, client.unwrap_or(&echo))?,
            };
            Ok((q, scored))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPeers {
    pub student: StudentId,
    pub question: QuestionId,
    pub timestamp: i64,
    pub candidates: usize,
    pub peers: Vec<RankedPeer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalArtifact {
    pub similarity: SimilarityModel,
    pub targets: Vec<TargetPeers>,
}

pub fn fit_similarity(
    d: &Dataset,
    m: &IrtModel,
    g: &Mrhin,
    profiles: &Profiles,
    retained: &ScoredPaths,
    cfg: &RunConfig,
    seed: u64,
) -> Result<SimilarityModel> {
    let seed = derive_seed(seed, "pairs", &[]);
    let sm = match cfg.pair_source {
        PairSource::Random => retrieval::fit_similarity(d, m, profiles, cfg.pair_sample, seed, cfg.c),
        PairSource::Paths => {
            let pairs = retrieval::path_pairs(retained.values().flatten(), g);
            retrieval::fit_similarity_from_pairs(&pairs, m, profiles, cfg.pair_sample, seed, cfg.c)
        }
    }?;
    Ok(sm.with_centering(cfg.centering))
}

/// Top-K retention per question and template.
pub fn retain(scored: &ScoredPaths, k: usize, mode: SelectionMode, seed: u64) -> ScoredPaths {
    scored
        .iter()
        .map(|(&q, v)| {
            let s = derive_seed(seed, "select", &[u64::from(q.0)]);
            (q, pathscore::select_per_template(v, k, mode, s))
        })
        .collect()
}

pub fn test_targets(d: &Dataset) -> Vec<&Interaction> {
    d.in_split(Split::Test).collect()
}

/// Candidate construction and Top-S peers for every test interaction.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    d: &Dataset,
    m: &IrtModel,
    g: &Mrhin,
    scored: &ScoredPaths,
    cfg: &RunConfig,
    selection: SelectionMode,
    mode: RetrievalMode,
    seed: u64,
) -> Result<RetrievalArtifact> {
    let retained = retain(scored, cfg.top_k, selection, seed);
    let profiles = Profiles::from_train(d);
    let similarity = fit_similarity(d, m, g, &profiles, &retained, cfg, seed)?;
    let empty = Vec::new();
    let targets = test_targets(d)
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let paths = g
                .question(&x.question)
                .and_then(|q| retained.get(&q))
                .unwrap_or(&empty);
            let cands = retrieval::build_candidates(paths, g, &x.student, &x.question);
            let peers = retrieval::top_s(
                &cands,
                &similarity,
                cfg.top_s,
                mode,
                derive_seed(seed, "peers", &[i as u64]),
                |s, f| retrieval::encode(&x.student, s, f, m, &profiles, cfg.c),
            )?;
            Ok(TargetPeers {
                student: x.student.clone(),
                question: x.question.clone(),
                timestamp: x.timestamp,
                candidates: cands.len(),
                peers,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalArtifact {
        similarity,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub student: StudentId,
    pub question: QuestionId,
    pub timestamp: i64,
    pub label: bool,
    pub prediction: Prediction,
}

/// Which model answers the prompts.
#[derive(Clone, Copy)]
pub enum Predictor<'c> {
    Mock,
    Client(&'c dyn LlmClient),
}

pub fn predict_all(
    d: &Dataset,
    m: &IrtModel,
    retrieved: &RetrievalArtifact,
    window: usize,
    mask: AblationMask,
    predictor: Predictor<'_>,
) -> Result<Vec<PredictionRecord>> {
    let targets = test_targets(d);
    if targets.len() != retrieved.targets.len() {
        return Err(Error::Config(format!(
            "retrieval artifact has {} targets, dataset has {}",
            retrieved.targets.len(),
            targets.len()
        )));
    }
    let index = HistoryIndex::new(d);
    let jobs: Vec<(&Interaction, &TargetPeers)> = targets.into_iter().zip(&retrieved.targets).collect();
    let one = |&(x, t): &(&Interaction, &TargetPeers)| -> Result<PredictionRecord> {
        if x.student != t.student || x.question != t.question || x.timestamp != t.timestamp {
            return Err(Error::Config(format!(
                "retrieval target {}/{} does not match test interaction {}/{}",
                t.student, t.question, x.student, x.question
            )));
        }
        let peers: Vec<StudentId> = t.peers.iter().map(|p| p.student.clone()).collect();
        let bundle = predict::build_prompt(x, &peers, m, &index, mask, window)?;
        let prediction = match predictor {
            Predictor::Mock => predict::mock_predict(&bundle),
            Predictor::Client(c) => predict::predict(&bundle, c)?,
        };
        Ok(PredictionRecord {
            student: x.student.clone(),
            question: x.question.clone(),
            timestamp: x.timestamp,
            label: x.correct,
            prediction,
        })
    };
    let results = match predictor {
        Predictor::Mock => jobs.par_iter().map(one).collect::<Vec<_>>(),
        Predictor::Client(c) => bounded_map(&jobs, c.max_in_flight(), one),
    };
    results.into_iter().collect()
}
