//! Knowledge tracing over a multi-relationship heterogeneous information
//! network.
//!
//! The pipeline runs in stages:
//!
//! 1. [`dataset`] ingests interaction logs, filters sparse students and
//!    questions to a fixed point and cuts each student's sequence 8:1:1 in
//!    time order.
//! 2. [`irt`] fits a penalized two-parameter logistic model on the train
//!    split and discretizes ability and difficulty into three levels.
//! 3. [`mrhin`] builds the typed graph over students, questions, knowledge
//!    concepts, ability levels and difficulty levels, and samples meta-path
//!    instances with seeded equal-probability walks.
//! 4. [`pathscore`] rates every instance on four quality dimensions and
//!    keeps the Top-K per template.
//! 5. [`retrieval`] turns retained paths into a candidate peer set and ranks
//!    peers by Mahalanobis distance over five pair features.
//! 6. [`predict`] renders the structured prompt and obtains a prediction
//!    with a three-sentence report from an LLM backend or the offline mock.
//! 7. [`eval`] computes ACC/AUC and drives the ablation variants.

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod ids;
pub mod irt;
pub mod llm;
pub mod mrhin;
pub mod pathscore;
pub mod pipeline;
pub mod predict;
pub mod retrieval;
pub mod synthetic;

pub use config::{LlmBackendKind, RunConfig, ScoreBackendKind, Stage};
pub use dataset::{Dataset, IngestStats, Interaction, Split};
pub use error::{Error, Result};
pub use eval::{auc, EvalReport, Variant};
pub use ids::{KcId, QuestionId, StudentId};
pub use irt::{IrtModel, Level};
pub use llm::{ChatMessage, LlmClient};
pub use mrhin::{MetaPathTemplate, Mrhin, NodeId, NodeKind, PathInstance};
pub use pathscore::{PathScore, ScoredInstance, SelectionMode};
pub use predict::{AblationMask, Prediction, PromptBundle};
pub use retrieval::{CandidateSet, FeatureVector, RetrievalMode, SimilarityModel};
