use std::path::PathBuf;

use treesync_simnet::{run_experiment, run_experiment_traced, trace_to_jsonl, ExperimentConfig, MetricsReport};

use crate::error::CliError;

pub struct SimOptions {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub report: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

fn write(path: &PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub fn run(opts: &SimOptions) -> Result<MetricsReport, CliError> {
    let mut config = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| CliError::Input(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = opts.seed {
        config.seed = seed;
    }
    let report = match &opts.trace {
        Some(path) => {
            let (report, trace) = run_experiment_traced(&config).map_err(|e| CliError::Input(e.to_string()))?;
            write(path, &trace_to_jsonl(&trace))?;
            report
        }
        None => run_experiment(&config).map_err(|e| CliError::Input(e.to_string()))?,
    };
    if let Some(path) = &opts.report {
        write(path, &report.to_json())?;
    }
    Ok(report)
}
