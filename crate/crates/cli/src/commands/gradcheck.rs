use std::fmt;

use blo_core::estimators::fg2u_estimate;
use blo_core::math::{fd_gradient, max_rel_diff, DirectionBatch};
use blo_core::problem::{DistillationSpec, QuadraticSpec};
use blo_core::unroll::{fgu_full, rgu, trgu, unroll, DEFAULT_FGU_CAP};
use blo_core::{BilevelProblem, MetaVector};
use clap::ValueEnum;

use crate::error::{CliError, CliResult};
use crate::fixtures::CorruptedJvp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GradcheckProblem {
    /// Quadratic oracle with M = 3, N = 2.
    Quadratic,
    /// Synthetic distillation toy.
    Distillation,
    /// Quadratic oracle with a perturbed forward tangent map (must fail).
    QuadraticCorrupted,
}

/// Central-difference step used for the finite-difference column.
pub const GRADCHECK_FD_EPS: f64 = 1e-5;
/// Threshold between two exact methods.
pub const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PairCheck {
    pub a: &'static str,
    pub b: &'static str,
    pub max_rel: f64,
    pub threshold: f64,
}

impl PairCheck {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.threshold
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub problem: GradcheckProblem,
    pub t_steps: usize,
    pub seed: u64,
    pub gradients: Vec<(&'static str, MetaVector)>,
    pub pairs: Vec<PairCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.pairs.iter().all(PairCheck::passed)
    }

    pub fn pair(&self, a: &str, b: &str) -> Option<&PairCheck> {
        self.pairs
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
    }

    pub fn into_result(self) -> CliResult<Self> {
        if self.passed() {
            return Ok(self);
        }
        let bad: Vec<String> = self
            .pairs
            .iter()
            .filter(|p| !p.passed())
            .map(|p| {
                format!(
                    "{} vs {}: {:.3e} > {:.0e}",
                    p.a, p.b, p.max_rel, p.threshold
                )
            })
            .collect();
        Err(CliError::Tolerance(bad.join("; ")))
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck problem={:?} T={} seed={}",
            self.problem, self.t_steps, self.seed
        )?;
        writeln!(
            f,
            "{:<10} {:<10} {:>12} {:>10}  status",
            "a", "b", "max_rel", "threshold"
        )?;
        for p in &self.pairs {
            writeln!(
                f,
                "{:<10} {:<10} {:>12.3e} {:>10.0e}  {}",
                p.a,
                p.b,
                p.max_rel,
                p.threshold,
                if p.passed() { "ok" } else { "BREACH" }
            )?;
        }
        Ok(())
    }
}

/// Pairwise comparison of finite differences, dense forward mode, reverse
/// mode, full-length truncated reverse mode and the forward-gradient
/// estimator on the coordinate basis.
pub fn gradcheck(
    problem: GradcheckProblem,
    t_steps: usize,
    seed: u64,
) -> CliResult<GradcheckReport> {
    if t_steps == 0 {
        return Err(CliError::Config("T must be >= 1".into()));
    }
    let quadratic = || {
        QuadraticSpec {
            m: 3,
            n: 2,
            seed,
            ..Default::default()
        }
        .build()
    };
    let (gradients, fd_tol) = match problem {
        GradcheckProblem::Quadratic => (all_gradients(&quadratic()?, t_steps, seed)?, 1e-6),
        GradcheckProblem::QuadraticCorrupted => (
            all_gradients(&CorruptedJvp::new(quadratic()?, 1e-3), t_steps, seed)?,
            1e-6,
        ),
        GradcheckProblem::Distillation => {
            let p = DistillationSpec {
                seed,
                ..Default::default()
            }
            .build()?;
            (all_gradients(&p, t_steps, seed)?, 1e-5)
        }
    };
    let mut pairs = Vec::new();
    for i in 0..gradients.len() {
        for j in i + 1..gradients.len() {
            let (a, ga) = &gradients[i];
            let (b, gb) = &gradients[j];
            let threshold = if *a == "fd" || *b == "fd" {
                fd_tol
            } else {
                EXACT_TOL
            };
            pairs.push(PairCheck {
                a,
                b,
                max_rel: max_rel_diff(ga, gb),
                threshold,
            });
        }
    }
    Ok(GradcheckReport {
        problem,
        t_steps,
        seed,
        gradients,
        pairs,
    })
}

fn all_gradients<P: BilevelProblem>(
    p: &P,
    t_steps: usize,
    run_seed: u64,
) -> CliResult<Vec<(&'static str, MetaVector)>> {
    let phi = p.initial_meta();
    let fd = fd_gradient(
        |x| p.black_box_h(x, t_steps, run_seed),
        &phi,
        GRADCHECK_FD_EPS,
    )?;
    let (fgu, _) = fgu_full(p, &phi, t_steps, run_seed, DEFAULT_FGU_CAP)?;
    let reverse = rgu(p, &phi, t_steps, run_seed)?;
    let (_, traj) = unroll(p, &phi, t_steps, run_seed, true)?;
    let truncated = trgu(p, &traj.expect("trajectory requested"), t_steps)?;
    let basis = DirectionBatch::coordinate_basis(p.meta_dim())?;
    let forward = fg2u_estimate(p, &phi, t_steps, run_seed, &basis)?.grad;
    Ok(vec![
        ("fd", fd),
        ("fgu_full", fgu),
        ("rgu", reverse),
        ("trgu", truncated),
        ("fg2u", forward),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let report = gradcheck(GradcheckProblem::Quadratic, 5, 0).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.pairs.len(), 10);
        assert!(report.pair("fg2u", "rgu").unwrap().max_rel <= 1e-10);
    }

    #[test]
    fn distillation_passes() {
        let report = gradcheck(GradcheckProblem::Distillation, 10, 1).unwrap();
        assert!(report.passed(), "{report}");
        assert!(report.pair("fd", "rgu").unwrap().max_rel <= 1e-5);
    }

    #[test]
    fn corrupted_jvp_is_caught() {
        let report = gradcheck(GradcheckProblem::QuadraticCorrupted, 5, 0).unwrap();
        assert!(!report.passed());
        assert!(report.pair("fd", "rgu").unwrap().passed());
        assert!(!report.pair("fgu_full", "rgu").unwrap().passed());
        assert_eq!(
            report.into_result().unwrap_err().exit_code(),
            crate::error::EXIT_TOLERANCE
        );
    }
}
