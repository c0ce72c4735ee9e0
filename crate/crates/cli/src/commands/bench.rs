use std::io::Write;
use std::time::Instant;

use blo_core::footprint::FloatMeter;
use blo_core::math::derive_seed;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub threads: usize,
    pub b: usize,
    pub seconds_per_meta_step: f64,
    pub peak_resident_floats: usize,
    pub estimator: String,
    pub t_steps: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Whether every thread count produced the same gradient bits.
    pub identical_bits: bool,
}

/// Times `repeats` hypergradient estimates of the configured phase-2
/// estimator at the initial meta point for every thread count.
pub fn bench(
    config: &ExperimentConfig,
    threads: &[usize],
    repeats: usize,
) -> CliResult<BenchReport> {
    if threads.is_empty() || threads.contains(&0) {
        return Err(CliError::Config(
            "threads: need a non-empty list of positive counts".into(),
        ));
    }
    if repeats == 0 {
        return Err(CliError::Config("repeats must be >= 1".into()));
    }
    let problem = config
        .problem
        .build()
        .map_err(|e| CliError::Config(format!("problem: {e}")))?;
    let spec = &config.schedule.phase2.estimator;
    let t_steps = config.t_steps();
    spec.validate(t_steps)
        .map_err(|e| CliError::Config(format!("schedule.phase2: {e}")))?;
    let phi = problem.initial_meta();
    let seed = derive_seed(config.master_seed, 1);
    let (run_seed, dirs_seed) = (derive_seed(seed, 0), derive_seed(seed, 1));

    let mut rows = Vec::new();
    let mut reference: Option<Vec<u64>> = None;
    let mut identical_bits = true;
    for &n_threads in threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n_threads)
            .build()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
        let meter = FloatMeter::new();
        let (bits, seconds) = pool.install(|| -> CliResult<_> {
            let start = Instant::now();
            let mut bits = Vec::new();
            for _ in 0..repeats {
                let est = spec.estimate_metered(
                    problem.as_ref(),
                    &phi,
                    None,
                    t_steps,
                    run_seed,
                    dirs_seed,
                    &meter,
                )?;
                bits = est.grad.iter().map(|x| x.to_bits()).collect();
            }
            Ok((bits, start.elapsed().as_secs_f64() / repeats as f64))
        })?;
        match &reference {
            Some(r) => identical_bits &= *r == bits,
            None => reference = Some(bits),
        }
        rows.push(BenchRow {
            threads: n_threads,
            b: if spec.kind.uses_directions() {
                spec.b
            } else {
                0
            },
            seconds_per_meta_step: seconds,
            peak_resident_floats: meter.peak(),
            estimator: spec.kind.as_str().to_string(),
            t_steps,
        });
    }
    Ok(BenchReport {
        rows,
        identical_bits,
    })
}

pub fn write_rows<W: Write>(rows: &[BenchRow], w: W) -> CliResult<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::io("bench csv", e))
}
