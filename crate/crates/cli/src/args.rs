use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hisekt_core::eval::Variant;
use hisekt_core::{LlmBackendKind, RunConfig, ScoreBackendKind};
use hisekt_core::pathscore::SelectionMode;
use hisekt_core::retrieval::{Centering, RetrievalMode};
use serde::de::DeserializeOwned;

#[derive(Debug, Parser)]
#[command(name = "hisekt", version, about = "Knowledge tracing over a heterogeneous student graph")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read the interaction log, filter it and split it.
    Ingest(Common),
    /// Fit the 2PL model on the train split.
    FitIrt(Common),
    /// Build the student/question/concept graph.
    BuildHin(Common),
    /// Sample meta-path instances for every test question.
    SamplePaths(Common),
    /// Score the sampled instances.
    ScorePaths(Common),
    /// Select paths and retrieve similar students for every test interaction.
    Retrieve(Common),
    /// Predict every test interaction.
    Predict(Common),
    /// Run the base configuration and the requested variants.
    Evaluate(Common),
    /// Every stage in order, reusing cached artifacts.
    Pipeline(Common),
    /// Write a synthetic interaction log.
    Generate(Generate),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Interaction log (CSV).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Report path; defaults to `<out_dir>/report.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub n_walks: Option<usize>,
    #[arg(long)]
    pub walk_len: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub top_s: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub pair_sample: Option<usize>,
    #[arg(long, value_parser = lowercase_enum::<SelectionMode>)]
    pub selection: Option<SelectionMode>,
    #[arg(long, value_parser = lowercase_enum::<RetrievalMode>)]
    pub retrieval_mode: Option<RetrievalMode>,
    #[arg(long, value_parser = lowercase_enum::<Centering>)]
    pub centering: Option<Centering>,
    #[arg(long, value_parser = lowercase_enum::<ScoreBackendKind>)]
    pub score_backend: Option<ScoreBackendKind>,
    #[arg(long, value_parser = lowercase_enum::<LlmBackendKind>)]
    pub llm_backend: Option<LlmBackendKind>,
    /// Comma-separated ablations: msr, msl, simu, rsimu, irt.
    #[arg(long, value_delimiter = ',', value_parser = variant)]
    pub variants: Option<Vec<Variant>>,
}

#[derive(Debug, Args)]
pub struct Generate {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// `clustered` (planted peer structure) or `irt` (complete 2PL matrix).
    #[arg(long, default_value = "clustered", value_parser = ["clustered", "irt"])]
    pub kind: String,
    #[arg(long, default_value_t = 500)]
    pub students: usize,
    #[arg(long, default_value_t = 100)]
    pub questions: usize,
}

fn lowercase_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

fn variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).ok_or_else(|| format!("unknown variant `{s}`"))
}

fn relative_to(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p
    }
}

impl Common {
    /// Defaults, then the config file, then flags. Relative paths in the
    /// file resolve against the file's directory.
    pub fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
                let mut cfg: RunConfig =
                    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
                let base = path.parent().unwrap_or(Path::new(""));
                cfg.data = cfg.data.map(|p| relative_to(base, p));
                cfg.cache_dir = relative_to(base, cfg.cache_dir);
                cfg.out_dir = relative_to(base, cfg.out_dir);
                cfg
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        set!(cache_dir, seed, runs, n_walks, walk_len, top_k, top_s, window, pair_sample);
        set!(selection, retrieval_mode, centering, score_backend, llm_backend, variants);
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn report_path(&self, cfg: &RunConfig) -> PathBuf {
        self.out.clone().unwrap_or_else(|| cfg.out_dir.join("report.json"))
    }
}
