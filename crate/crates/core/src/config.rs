//! Resolved run configuration and stage fingerprints.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::Variant;
use crate::hashing::fingerprint_bytes;
use crate::llm::LlmSettings;
use crate::pathscore::SelectionMode;
use crate::predict::AblationMask;
use crate::retrieval::{Centering, PairSource, RetrievalMode};

pub use crate::pathscore::ScoreBackend as ScoreBackendKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackendKind {
    Mock,
    Http,
}

/// Every field has a default except `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub min_records: usize,
    pub n_walks: usize,
    pub walk_len: usize,
    pub top_k: usize,
    pub top_s: usize,
    pub c: f64,
    pub window: usize,
    pub pair_sample: usize,
    pub pair_source: PairSource,
    pub centering: Centering,
    pub seed: u64,
    pub runs: usize,
    pub score_backend: ScoreBackendKind,
    pub llm_backend: LlmBackendKind,
    pub llm: LlmSettings,
    pub selection: SelectionMode,
    pub retrieval_mode: RetrievalMode,
    pub mask: AblationMask,
    pub variants: Vec<Variant>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            cache_dir: PathBuf::from(".hisekt-cache"),
            out_dir: PathBuf::from("out"),
            min_records: crate::dataset::MIN_RECORDS,
            n_walks: crate::mrhin::DEFAULT_WALKS,
            walk_len: crate::mrhin::DEFAULT_WALK_LEN,
            top_k: 5,
            top_s: 1,
            c: crate::retrieval::DEFAULT_DECAY,
            window: crate::predict::DEFAULT_WINDOW,
            pair_sample: crate::retrieval::DEFAULT_PAIR_SAMPLE,
            pair_source: PairSource::Random,
            centering: Centering::Origin,
            seed: 0,
            runs: 1,
            score_backend: ScoreBackendKind::Formula,
            llm_backend: LlmBackendKind::Mock,
            llm: LlmSettings::default(),
            selection: SelectionMode::Top,
            retrieval_mode: RetrievalMode::Similar,
            mask: AblationMask::NONE,
            variants: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ingest,
    FitIrt,
    BuildHin,
    SamplePaths,
    ScorePaths,
    Retrieve,
    Predict,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::FitIrt,
        Stage::BuildHin,
        Stage::SamplePaths,
        Stage::ScorePaths,
        Stage::Retrieve,
        Stage::Predict,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::FitIrt => "fit-irt",
            Stage::BuildHin => "build-hin",
            Stage::SamplePaths => "sample-paths",
            Stage::ScorePaths => "score-paths",
            Stage::Retrieve => "retrieve",
            Stage::Predict => "predict",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|&s| s == self)?;
        i.checked_sub(1).map(|j| Self::ALL[j])
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_walks", self.n_walks),
            ("top_k", self.top_k),
            ("top_s", self.top_s),
            ("window", self.window),
            ("pair_sample", self.pair_sample),
            ("runs", self.runs),
            ("min_records", self.min_records),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.walk_len < 2 {
            return Err(Error::Config("walk_len must be at least 2".into()));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config(format!("c must be positive, got {}", self.c)));
        }
        Ok(())
    }

    pub fn data_path(&self) -> Result<&PathBuf> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Config("no input data path given".into()))
    }

    /// Hash of the fully resolved configuration. Cache and output locations
    /// are excluded so moving them does not invalidate anything.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.cache_dir = PathBuf::new();
        c.out_dir = PathBuf::new();
        fingerprint_bytes(&serde_json::to_vec(&c).expect("config serializes"))
    }

    /// The settings a stage's output depends on, beyond its upstream input.
    pub fn stage_inputs(&self, stage: Stage) -> serde_json::Value {
        match stage {
            Stage::Ingest => json!({ "min_records": self.min_records, "seed": self.seed }),
            Stage::FitIrt | Stage::BuildHin => json!({}),
            Stage::SamplePaths => json!({
                "n_walks": self.n_walks,
                "walk_len": self.walk_len,
                "seed": self.seed,
            }),
            Stage::ScorePaths => json!({
                "score_backend": self.score_backend,
                "llm_backend": self.llm_backend,
                "llm": self.llm,
            }),
            Stage::Retrieve => json!({
                "top_k": self.top_k,
                "top_s": self.top_s,
                "c": self.c,
                "pair_sample": self.pair_sample,
                "pair_source": self.pair_source,
                "centering": self.centering,
                "selection": self.selection,
                "retrieval_mode": self.retrieval_mode,
                "seed": self.seed,
            }),
            Stage::Predict => json!({
                "window": self.window,
                "mask": self.mask,
                "llm_backend": self.llm_backend,
                "llm": self.llm,
            }),
            Stage::Evaluate => json!({ "config": self.fingerprint() }),
        }
    }

    /// Chains the upstream fingerprint with this stage's own inputs.
    pub fn stage_fingerprint(&self, stage: Stage, upstream: &str) -> String {
        let body = json!({
            "stage": stage.name(),
            "upstream": upstream,
            "inputs": self.stage_inputs(stage),
        });
        fingerprint_bytes(&serde_json::to_vec(&body).expect("json serializes"))
    }
}
