use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use hisekt_core::eval::{self, Backends, Metrics, Prepared};
use hisekt_core::hashing::fingerprint_bytes;
use hisekt_core::llm::HttpClient;
use hisekt_core::mrhin::{self, InstanceStore};
use hisekt_core::pipeline::{self, PredictionRecord, Predictor, RetrievalArtifact, ScoredStore};
use hisekt_core::{irt, Dataset, EvalReport, IngestStats, IrtModel, LlmBackendKind, LlmClient, Mrhin};
use hisekt_core::{Result, RunConfig, ScoreBackendKind, Stage};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::Cache;

#[derive(Serialize, Deserialize)]
struct Ingested {
    stats: IngestStats,
    dataset: Dataset,
}

#[derive(Serialize, Deserialize)]
struct Predicted {
    metrics: Metrics,
    records: Vec<PredictionRecord>,
}

pub struct Runner {
    cfg: RunConfig,
    cache: Cache,
    report_path: PathBuf,
    expected: BTreeMap<Stage, String>,
    http: Option<HttpClient>,
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    Ok(serde_json::to_value(x)?)
}

impl Runner {
    pub fn new(cfg: RunConfig, report_path: PathBuf) -> Result<Self> {
        let data = fs::read(cfg.data_path()?)?;
        let mut expected = BTreeMap::new();
        let mut upstream = fingerprint_bytes(&data);
        for stage in Stage::ALL {
            upstream = cfg.stage_fingerprint(stage, &upstream);
            expected.insert(stage, upstream.clone());
        }
        let http = match cfg.llm_backend {
            LlmBackendKind::Mock => None,
            LlmBackendKind::Http => Some(HttpClient::new(cfg.llm.clone())?),
        };
        Ok(Self {
            cache: Cache::new(cfg.cache_dir.clone()),
            cfg,
            report_path,
            expected,
            http,
        })
    }

    fn fp(&self, stage: Stage) -> &str {
        &self.expected[&stage]
    }

    fn dataset(&self) -> Result<Dataset> {
        let x: Ingested = self.cache.require_as(Stage::Ingest, self.fp(Stage::Ingest))?;
        Ok(x.dataset)
    }

    fn irt(&self) -> Result<IrtModel> {
        self.cache.require_as(Stage::FitIrt, self.fp(Stage::FitIrt))
    }

    fn graph(&self) -> Result<Mrhin> {
        let v = self.cache.require(Stage::BuildHin, self.fp(Stage::BuildHin))?;
        Mrhin::from_json(&v.to_string())
    }

    fn client(&self) -> Option<&dyn LlmClient> {
        self.http.as_ref().map(|c| c as &dyn LlmClient)
    }

    fn backends(&self) -> Backends<'_> {
        Backends {
            predictor: match self.client() {
                Some(c) => Predictor::Client(c),
                None => Predictor::Mock,
            },
            scorer: match self.cfg.score_backend {
                ScoreBackendKind::Llm => self.client(),
                ScoreBackendKind::Formula => None,
            },
        }
    }

    /// Runs `stage` unless its artifact is already cached under the current
    /// fingerprint. Returns whether it was a cache hit.
    pub fn run(&self, stage: Stage) -> Result<bool> {
        let fp = self.fp(stage);
        if let Some(payload) = self.cache.probe(stage, fp)? {
            println!("{stage}: cache hit ({})", &fp[..12]);
            if stage == Stage::Evaluate {
                self.write_report(&serde_json::from_value(payload)?)?;
            }
            return Ok(true);
        }
        let payload = self.compute(stage)?;
        self.cache.store(stage, fp, payload)?;
        println!("{stage}: done ({})", &fp[..12]);
        Ok(false)
    }

    /// Each arm reads its direct upstream first so a missing dependency is
    /// reported by that stage's name.
    fn compute(&self, stage: Stage) -> Result<Value> {
        let cfg = &self.cfg;
        match stage {
            Stage::Ingest => {
                let (dataset, stats) = pipeline::ingest_path(cfg.data_path()?, cfg)?;
                println!(
                    "ingest: {} of {} rows kept ({} incomplete, {} duplicate; {} students and {} questions filtered)",
                    dataset.len(),
                    stats.rows_read,
                    stats.dropped_missing,
                    stats.dropped_duplicate,
                    stats.removed_students,
                    stats.removed_questions
                );
                to_value(&Ingested { stats, dataset })
            }
            Stage::FitIrt => to_value(&irt::fit(&self.dataset()?)),
            Stage::BuildHin => {
                let m = self.irt()?;
                let g = mrhin::build(&self.dataset()?, &m);
                Ok(serde_json::from_str(&g.to_json()?)?)
            }
            Stage::SamplePaths => {
                let g = self.graph()?;
                let store = pipeline::sample_paths(&self.dataset()?, &g, cfg, cfg.seed);
                to_value(&store)
            }
            Stage::ScorePaths => {
                let store: InstanceStore = self.cache.require_as(Stage::SamplePaths, self.fp(Stage::SamplePaths))?;
                let g = self.graph()?;
                let scored = pipeline::score_paths(&g, &store.instances(&g)?, cfg.score_backend, self.backends().scorer)?;
                to_value(&ScoredStore::from_scored(&g, &scored))
            }
            Stage::Retrieve => {
                let store: ScoredStore = self.cache.require_as(Stage::ScorePaths, self.fp(Stage::ScorePaths))?;
                let g = self.graph()?;
                let r = pipeline::retrieve(
                    &self.dataset()?,
                    &self.irt()?,
                    &g,
                    &store.scored(&g)?,
                    cfg,
                    cfg.selection,
                    cfg.retrieval_mode,
                    cfg.seed,
                )?;
                to_value(&r)
            }
            Stage::Predict => {
                let r: RetrievalArtifact = self.cache.require_as(Stage::Retrieve, self.fp(Stage::Retrieve))?;
                let records = pipeline::predict_all(
                    &self.dataset()?,
                    &self.irt()?,
                    &r,
                    cfg.window,
                    cfg.mask,
                    self.backends().predictor,
                )?;
                let metrics = Metrics::of(&records)?;
                println!("predict: acc {:.4} auc {:.4} over {}", metrics.acc, metrics.auc, metrics.n);
                to_value(&Predicted { metrics, records })
            }
            Stage::Evaluate => {
                self.cache.require(Stage::Predict, self.fp(Stage::Predict))?;
                let prepared = Prepared {
                    dataset: self.dataset()?,
                    irt: self.irt()?,
                    graph: self.graph()?,
                };
                let report = eval::run_experiment(cfg, &prepared, self.backends())?;
                self.write_report(&report)?;
                to_value(&report)
            }
        }
    }

    fn write_report(&self, report: &EvalReport) -> Result<()> {
        if let Some(dir) = self.report_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&self.report_path, report.to_json()?)?;
        print!("{}", report.render_table());
        println!("report: {}", self.report_path.display());
        Ok(())
    }
}
