//! Metrics and the ablation experiment driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::irt::{self, IrtModel};
use crate::llm::LlmClient;
use crate::mrhin::{self, Mrhin};
use crate::pathscore::SelectionMode;
use crate::pipeline::{self, PredictionRecord, Predictor, RetrievalArtifact, ScoredPaths};
use crate::predict::{AblationMask, Outcome};
use crate::retrieval::RetrievalMode;

/// Mann-Whitney AUC; tied pairs count one half.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::UndefinedMetric(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied groups stay integral.
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 averaged, doubled.
        let doubled_rank = (i + 1 + j + 1) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        doubled_rank_sum += doubled_rank * pos_in_group;
        i = j + 1;
    }
    let doubled_u = doubled_rank_sum - positives * (positives + 1);
    Ok(doubled_u as f64 / (2 * positives * negatives) as f64)
}

pub fn accuracy(labels: &[bool], predicted: &[bool]) -> Result<f64> {
    if labels.len() != predicted.len() || labels.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "accuracy over {} labels and {} predictions",
            labels.len(),
            predicted.len()
        )));
    }
    let hits = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Full,
    /// Random-K path retention.
    Msr,
    /// Lowest-K path retention.
    Msl,
    /// No similar-student block.
    Simu,
    /// Random peers from the candidate set.
    Rsimu,
    /// No IRT fields in the prompt.
    Irt,
}

impl Variant {
    pub const ABLATIONS: [Variant; 5] = [
        Variant::Msr,
        Variant::Msl,
        Variant::Simu,
        Variant::Rsimu,
        Variant::Irt,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Msr => "msr",
            Variant::Msl => "msl",
            Variant::Simu => "simu",
            Variant::Rsimu => "rsimu",
            Variant::Irt => "irt",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Msr => "w/o MSR",
            Variant::Msl => "w/o MSL",
            Variant::Simu => "w/o SimU",
            Variant::Rsimu => "w/o RSimU",
            Variant::Irt => "w/o IRT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Variant::Full]
            .into_iter()
            .chain(Self::ABLATIONS)
            .find(|v| v.key() == s.trim().to_ascii_lowercase())
    }

    /// The upstream operation modes this variant runs with.
    pub fn modes(self, cfg: &RunConfig) -> (SelectionMode, RetrievalMode, AblationMask) {
        let (mut sel, mut ret, mut mask) = (cfg.selection, cfg.retrieval_mode, cfg.mask);
        match self {
            Variant::Full => {}
            Variant::Msr => sel = SelectionMode::Random,
            Variant::Msl => sel = SelectionMode::Lowest,
            Variant::Simu => mask = mask.union(AblationMask::SIMU),
            Variant::Rsimu => ret = RetrievalMode::Random,
            Variant::Irt => mask = mask.union(AblationMask::IRT),
        }
        (sel, ret, mask)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub n: usize,
}

impl Metrics {
    pub fn of(records: &[PredictionRecord]) -> Result<Self> {
        let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
        let scores: Vec<f64> = records.iter().map(|r| r.prediction.p_correct).collect();
        let predicted: Vec<bool> = records
            .iter()
            .map(|r| r.prediction.outcome == Outcome::Correct)
            .collect();
        Ok(Self {
            acc: accuracy(&labels, &predicted)?,
            auc: auc(&labels, &scores)?,
            n: records.len(),
        })
    }

    fn mean(rows: &[Metrics]) -> Self {
        let k = rows.len().max(1) as f64;
        Self {
            acc: rows.iter().map(|m| m.acc).sum::<f64>() / k,
            auc: rows.iter().map(|m| m.auc).sum::<f64>() / k,
            n: rows.first().map_or(0, |m| m.n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub seed: u64,
    pub metrics: BTreeMap<Variant, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Full-variant means over runs.
    pub acc: f64,
    pub auc: f64,
    pub n: usize,
    pub config_fingerprint: String,
    /// Per-variant means over runs.
    pub per_variant: BTreeMap<Variant, Metrics>,
    pub runs: Vec<RunRow>,
    pub config: RunConfig,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config {}", self.config_fingerprint);
        let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>6}", "variant", "ACC", "AUC", "n");
        for (v, m) in &self.per_variant {
            let _ = writeln!(out, "{:<10} {:>8.4} {:>8.4} {:>6}", v.label(), m.acc, m.auc, m.n);
        }
        if self.runs.len() > 1 {
            for r in &self.runs {
                let cells: Vec<String> = r
                    .metrics
                    .iter()
                    .map(|(v, m)| format!("{} {:.4}", v.key(), m.auc))
                    .collect();
                let _ = writeln!(out, "run {} (seed {}): {}", r.run, r.seed, cells.join(", "));
            }
        }
        out
    }
}

/// Stage outputs that do not depend on the run seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub irt: IrtModel,
    pub graph: Mrhin,
}

impl Prepared {
    pub fn new(dataset: Dataset) -> Self {
        let irt = irt::fit(&dataset);
        let graph = mrhin::build(&dataset, &irt);
        Self {
            dataset,
            irt,
            graph,
        }
    }
}

#[derive(Clone, Copy)]
pub struct Backends<'c> {
    pub predictor: Predictor<'c>,
    pub scorer: Option<&'c dyn LlmClient>,
}

impl Default for Backends<'_> {
    fn default() -> Self {
        Self {
            predictor: Predictor::Mock,
            scorer: None,
        }
    }
}

/// Variants requested by the config, always led by the full one.
pub fn variants_of(cfg: &RunConfig) -> Vec<Variant> {
    let mut v = vec![Variant::Full];
    for &x in &cfg.variants {
        if !v.contains(&x) {
            v.push(x);
        }
    }
    v
}

/// Scored paths for one run seed.
pub fn scored_paths(p: &Prepared, cfg: &RunConfig, seed: u64, scorer: Option<&dyn LlmClient>) -> Result<ScoredPaths> {
    let store = pipeline::sample_paths(&p.dataset, &p.graph, cfg, seed);
    let instances = store.instances(&p.graph)?;
    pipeline::score_paths(&p.graph, &instances, cfg.score_backend, scorer)
}

/// Retrieval and prediction for each variant over one run's scored paths.
/// Variants with the same selection and retrieval modes share retrieval.
pub fn evaluate_run(
    p: &Prepared,
    cfg: &RunConfig,
    scored: &ScoredPaths,
    seed: u64,
    variants: &[Variant],
    predictor: Predictor<'_>,
) -> Result<BTreeMap<Variant, Metrics>> {
    let mut retrieved: BTreeMap<(SelectionMode, RetrievalMode), RetrievalArtifact> = BTreeMap::new();
    let mut out = BTreeMap::new();
    for &v in variants {
        let (sel, ret, mask) = v.modes(cfg);
        if !retrieved.contains_key(&(sel, ret)) {
            let r = pipeline::retrieve(&p.dataset, &p.irt, &p.graph, scored, cfg, sel, ret, seed)?;
            retrieved.insert((sel, ret), r);
        }
        let records = pipeline::predict_all(&p.dataset, &p.irt, &retrieved[&(sel, ret)], cfg.window, mask, predictor)?;
        let m = Metrics::of(&records)?;
        log::info!("seed {seed} {}: acc {:.4} auc {:.4}", v.label(), m.acc, m.auc);
        out.insert(v, m);
    }
    Ok(out)
}

/// Averages runs into a report.
pub fn report(cfg: &RunConfig, runs: Vec<RunRow>) -> EvalReport {
    let mut per_variant = BTreeMap::new();
    if let Some(first) = runs.first() {
        for &v in first.metrics.keys() {
            let rows: Vec<Metrics> = runs.iter().filter_map(|r| r.metrics.get(&v).copied()).collect();
            per_variant.insert(v, Metrics::mean(&rows));
        }
    }
    let full = per_variant.get(&Variant::Full).copied().unwrap_or(Metrics {
        acc: 0.0,
        auc: 0.0,
        n: 0,
    });
    EvalReport {
        acc: full.acc,
        auc: full.auc,
        n: full.n,
        config_fingerprint: cfg.fingerprint(),
        per_variant,
        runs,
        config: cfg.clone(),
    }
}

/// `cfg.runs` runs with seeds `cfg.seed + r`, every requested variant each.
pub fn run_experiment(cfg: &RunConfig, p: &Prepared, backends: Backends<'_>) -> Result<EvalReport> {
    cfg.validate()?;
    let variants = variants_of(cfg);
    let mut runs = Vec::with_capacity(cfg.runs);
    for r in 0..cfg.runs {
        let seed = cfg.seed.wrapping_add(r as u64);
        let scored = scored_paths(p, cfg, seed, backends.scorer)?;
        let metrics = evaluate_run(p, cfg, &scored, seed, &variants, backends.predictor)?;
        runs.push(RunRow { run: r, seed, metrics });
    }
    Ok(report(cfg, runs))
}
