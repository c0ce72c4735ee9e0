use std::io::{Read, Write};

use blo_core::estimators::validate_variance;
use blo_core::problem::{quadratic_true_hypergradient, QuadraticSpec};
use blo_core::BilevelProblem;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Relative tolerance on `empirical_ratio / predicted_ratio - 1`.
pub const VARIANCE_TOL: f64 = 0.05;
/// Below this many samples a row is always low-confidence.
pub const MIN_CONFIDENT_SAMPLES: usize = 1000;
pub const VARIANCE_T_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub n: usize,
    pub b: usize,
    pub predicted_ratio: f64,
    pub empirical_ratio: f64,
    pub std_error: f64,
    pub samples: usize,
    pub within_tolerance: bool,
    pub low_confidence: bool,
}

impl VarianceRow {
    pub fn relative_deviation(&self) -> f64 {
        (self.empirical_ratio / self.predicted_ratio - 1.0).abs()
    }
}

/// Monte Carlo check of the forward-gradient variance identity on a quadratic
/// with `M = N = n`. Rows with too few samples or a standard error above half
/// the tolerance band are flagged low-confidence and do not gate success.
pub fn variance_study(
    n: usize,
    bs: &[usize],
    samples: usize,
    seed: u64,
) -> CliResult<Vec<VarianceRow>> {
    if n < 2 {
        return Err(CliError::Config("n must be >= 2".into()));
    }
    if bs.is_empty() || bs.contains(&0) {
        return Err(CliError::Config(
            "b: need a non-empty list of positive batch sizes".into(),
        ));
    }
    if samples == 0 {
        return Err(CliError::Config("samples must be >= 1".into()));
    }
    let p = QuadraticSpec {
        m: n,
        n,
        seed,
        ..Default::default()
    }
    .build()?;
    let phi = p.initial_meta();
    let truth = quadratic_true_hypergradient(&p, &phi, VARIANCE_T_STEPS, seed)?;
    bs.iter()
        .map(|&b| {
            let r = validate_variance(
                &p,
                &phi,
                VARIANCE_T_STEPS,
                seed,
                &truth,
                b,
                samples,
                seed ^ b as u64,
            )?;
            let low_confidence = samples < MIN_CONFIDENT_SAMPLES
                || r.ratio_std_error > 0.5 * VARIANCE_TOL * r.predicted_ratio;
            let deviation = (r.empirical_ratio / r.predicted_ratio - 1.0).abs();
            Ok(VarianceRow {
                n,
                b,
                predicted_ratio: r.predicted_ratio,
                empirical_ratio: r.empirical_ratio,
                std_error: r.ratio_std_error,
                samples,
                within_tolerance: deviation <= VARIANCE_TOL,
                low_confidence,
            })
        })
        .collect()
}

/// Error when a confident row misses the tolerance band.
pub fn check_rows(rows: &[VarianceRow]) -> CliResult<()> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.low_confidence && !r.within_tolerance)
        .map(|r| {
            format!(
                "b={}: empirical {:.4} vs predicted {:.4} ({:.1}% off)",
                r.b,
                r.empirical_ratio,
                r.predicted_ratio,
                100.0 * r.relative_deviation()
            )
        })
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(CliError::Tolerance(bad.join("; ")))
    }
}

pub fn write_rows<W: Write>(rows: &[VarianceRow], w: W) -> CliResult<()> {
    let mut writer = csv::Writer::from_writer(w);
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    writer.flush().map_err(|e| CliError::io("variance csv", e))
}

pub fn read_rows<R: Read>(r: R) -> CliResult<Vec<VarianceRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(|e| CliError::Config(format!("variance csv: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smallest_case_is_exact() {
        let rows = variance_study(2, &[1], 2000, 0).unwrap();
        assert!((rows[0].empirical_ratio - 1.0).abs() < 1e-12, "{rows:?}");
        check_rows(&rows).unwrap();
    }

    #[test]
    fn few_samples_are_low_confidence() {
        let rows = variance_study(20, &[1, 4], 10, 0).unwrap();
        assert!(rows.iter().all(|r| r.low_confidence));
        check_rows(&rows).unwrap();
    }

    #[test]
    fn csv_round_trip() {
        let rows = variance_study(6, &[1, 3], 50, 2).unwrap();
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("n,b,predicted_ratio,empirical_ratio"));
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn breach_is_reported() {
        let mut rows = variance_study(6, &[1], 2000, 3).unwrap();
        rows[0].within_tolerance = false;
        rows[0].low_confidence = false;
        assert_eq!(
            check_rows(&rows).unwrap_err().exit_code(),
            crate::error::EXIT_TOLERANCE
        );
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(variance_study(1, &[1], 10, 0).is_err());
        assert!(variance_study(5, &[0], 10, 0).is_err());
        assert!(variance_study(5, &[], 10, 0).is_err());
        assert!(variance_study(5, &[1], 0, 0).is_err());
    }
}
