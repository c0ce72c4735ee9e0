use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use blo_core::io::Blo1Array;
use blo_core::meta_opt::{run_training, TrainingOutcome};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const RUN_CSV: &str = "run.csv";
pub const FINAL_PHI: &str = "final_phi.bin";
pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const RUN_META: &str = "run_meta.json";

/// Timestamps and status of a run, kept apart from the deterministic artifacts.
#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    started_unix: f64,
    finished_unix: f64,
    elapsed_seconds: f64,
    threads: usize,
    steps_completed: usize,
    status: &'a str,
    error: Option<String>,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub outcome: TrainingOutcome,
}

/// Executes the configured training run and writes its artifacts into `out`
/// (or the config's `output_dir`). A divergence still writes every artifact
/// and is then reported as an error.
pub fn cmd_run(config: &ExperimentConfig, out: Option<&Path>) -> CliResult<RunSummary> {
    let out_dir = out
        .map(Path::to_path_buf)
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| {
            CliError::Config("output_dir: no output directory given (use --out)".into())
        })?;
    let problem = config
        .problem
        .build()
        .map_err(|e| CliError::Config(format!("problem: {e}")))?;
    fs::create_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;

    let started = unix_now();
    let clock = Instant::now();
    let outcome = run_training(problem.as_ref(), &config.training())?;
    let elapsed = clock.elapsed().as_secs_f64();

    let resolved = ExperimentConfig {
        output_dir: None,
        ..config.clone()
    };
    write(
        &out_dir.join(RESOLVED_CONFIG),
        resolved.to_json().as_bytes(),
    )?;
    let mut csv = Vec::new();
    outcome.record.write_csv(&mut csv)?;
    write(&out_dir.join(RUN_CSV), &csv)?;
    let phi = out_dir.join(FINAL_PHI);
    Blo1Array::vector(outcome.phi.as_slice().to_vec())
        .write_file(&phi)
        .map_err(|e| CliError::io(&phi, e))?;
    let meta = RunMeta {
        started_unix: started,
        finished_unix: unix_now(),
        elapsed_seconds: elapsed,
        threads: rayon::current_num_threads(),
        steps_completed: outcome
            .record
            .rows()
            .iter()
            .filter(|r| r.meta_loss.is_finite())
            .count(),
        status: if outcome.error.is_some() {
            "diverged"
        } else {
            "ok"
        },
        error: outcome.error.as_ref().map(ToString::to_string),
    };
    write(
        &out_dir.join(RUN_META),
        serde_json::to_string_pretty(&meta)
            .expect("meta serializes")
            .as_bytes(),
    )?;

    if let Some(e) = &outcome.error {
        return Err(CliError::Core(e.clone()));
    }
    Ok(RunSummary { out_dir, outcome })
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}
