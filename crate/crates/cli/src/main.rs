mod args;
mod cache;
mod stages;

use std::fs::File;
use std::io::BufWriter;
use std::process::ExitCode;

use clap::Parser;
use hisekt_core::synthetic::{self, ClusterSpec};
use hisekt_core::Stage;

use args::{Cli, Command, Common, Generate};
use stages::Runner;

enum Failure {
    Usage(String),
    Stage(Stage, hisekt_core::Error),
    Other(String),
}

fn run_stages(common: &Common, stages: &[Stage]) -> Result<(), Failure> {
    let cfg = common.resolve().map_err(Failure::Usage)?;
    let report = common.report_path(&cfg);
    let runner = Runner::new(cfg, report).map_err(|e| Failure::Usage(e.to_string()))?;
    for &stage in stages {
        runner.run(stage).map_err(|e| Failure::Stage(stage, e))?;
    }
    Ok(())
}

fn generate(g: &Generate) -> Result<(), Failure> {
    let dataset = match g.kind.as_str() {
        "irt" => synthetic::irt_responses(g.students, g.questions, g.seed).map(|x| x.0),
        _ => synthetic::clustered(&ClusterSpec {
            seed: g.seed,
            ..ClusterSpec::default()
        })
        .map(|x| x.0),
    }
    .map_err(|e| Failure::Other(e.to_string()))?;
    let file = File::create(&g.out).map_err(|e| Failure::Other(format!("{}: {e}", g.out.display())))?;
    dataset
        .write_csv(BufWriter::new(file))
        .map_err(|e| Failure::Other(e.to_string()))?;
    println!("wrote {} interactions to {}", dataset.len(), g.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Ingest(c) => run_stages(c, &[Stage::Ingest]),
        Command::FitIrt(c) => run_stages(c, &[Stage::FitIrt]),
        Command::BuildHin(c) => run_stages(c, &[Stage::BuildHin]),
        Command::SamplePaths(c) => run_stages(c, &[Stage::SamplePaths]),
        Command::ScorePaths(c) => run_stages(c, &[Stage::ScorePaths]),
        Command::Retrieve(c) => run_stages(c, &[Stage::Retrieve]),
        Command::Predict(c) => run_stages(c, &[Stage::Predict]),
        Command::Evaluate(c) => run_stages(c, &[Stage::Evaluate]),
        Command::Pipeline(c) => run_stages(c, &Stage::ALL),
        Command::Generate(g) => generate(g),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(stage, e)) => {
            eprintln!("error: stage `{stage}` failed: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
