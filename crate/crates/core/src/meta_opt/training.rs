use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::record::{RunRecord, RunRow};
use super::{MetaOptimizer, OptimizerSpec};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorSpec};
use crate::math::{derive_seed, MetaVector};
use crate::problem::BilevelProblem;

/// One phase of the schedule: an estimator run for `steps` meta steps,
/// optionally with its own optimizer step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase {
    pub estimator: EstimatorSpec,
    pub steps: usize,
    pub step_size: Option<f64>,
}

impl Default for Phase {
    fn default() -> Self {
        Self {
            estimator: EstimatorSpec::of(EstimatorKind::Fg2u),
            steps: 0,
            step_size: None,
        }
    }
}

impl Phase {
    pub fn new(estimator: EstimatorSpec, steps: usize) -> Self {
        Self {
            estimator,
            steps,
            step_size: None,
        }
    }
}

/// A cheap (possibly biased) first phase followed by a forward-gradient phase.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhaseSchedule {
    pub phase1: Phase,
    pub phase2: Phase,
}

impl PhaseSchedule {
    pub fn single(estimator: EstimatorSpec, steps: usize) -> Self {
        Self {
            phase1: Phase::default(),
            phase2: Phase::new(estimator, steps),
        }
    }

    pub fn two_phase(first: EstimatorSpec, k1: usize, second: EstimatorSpec, k2: usize) -> Self {
        Self {
            phase1: Phase::new(first, k1),
            phase2: Phase::new(second, k2),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.phase1.steps + self.phase2.steps
    }

    fn phases(&self) -> [(u8, &Phase); 2] {
        [(1, &self.phase1), (2, &self.phase2)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSpec {
    pub schedule: PhaseSchedule,
    pub optimizer: OptimizerSpec,
    /// Independent estimates averaged per meta step.
    pub accumulation: usize,
    /// Inner unroll length.
    pub t_steps: usize,
    pub master_seed: u64,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            schedule: PhaseSchedule::default(),
            optimizer: OptimizerSpec::default(),
            accumulation: 1,
            t_steps: 10,
            master_seed: 0,
        }
    }
}

impl TrainingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.accumulation == 0 {
            return Err(Error::invalid("accumulation must be >= 1"));
        }
        if self.t_steps == 0 {
            return Err(Error::invalid("t_steps must be >= 1"));
        }
        self.optimizer.validate()?;
        for (i, phase) in self.schedule.phases() {
            if phase.steps == 0 {
                continue;
            }
            phase
                .estimator
                .validate(self.t_steps)
                .map_err(|e| Error::invalid(format!("schedule.phase{i}: {e}")))?;
            if let Some(s) = phase.step_size {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::invalid(format!(
                        "schedule.phase{i}.step_size must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Seed of meta step `k` (1-based).
    pub fn step_seed(&self, k: usize) -> u64 {
        derive_seed(self.master_seed, k as u64)
    }

    /// Seed of the inner runs used to record the meta loss.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.master_seed, 0)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub phi: MetaVector,
    pub record: RunRecord,
    /// Divergence that terminated the run early, if any.
    pub error: Option<Error>,
}

pub fn run_training<P: BilevelProblem + ?Sized>(
    p: &P,
    spec: &TrainingSpec,
) -> Result<TrainingOutcome> {
    run_training_with(p, spec, p.initial_meta(), |_, _| Ok(()))
}

/// Runs the schedule from `phi0`, calling `observe(k, phi_k)` after every
/// update. Divergence terminates the run with a non-finite final row;
/// configuration errors are returned before any compute.
pub fn run_training_with<P, F>(
    p: &P,
    spec: &TrainingSpec,
    phi0: MetaVector,
    mut observe: F,
) -> Result<TrainingOutcome>
where
    P: BilevelProblem + ?Sized,
    F: FnMut(usize, &MetaVector) -> Result<()>,
{
    spec.validate()?;
    if phi0.len() != p.meta_dim() {
        return Err(Error::DimensionMismatch {
            context: "training phi0",
            expected: p.meta_dim(),
            actual: phi0.len(),
        });
    }
    for (i, phase) in spec.schedule.phases() {
        if phase.steps > 0 && !p.is_differentiable() && !phase.estimator.kind.is_zeroth_order() {
            return Err(Error::invalid(format!(
                "schedule.phase{i}: estimator {} needs derivatives but problem {} is black-box",
                phase.estimator.kind,
                p.name()
            )));
        }
    }

    let start = Instant::now();
    let mut opt = MetaOptimizer::new(spec.optimizer.clone(), p.meta_dim())?;
    let mut record = RunRecord::new();
    let mut phi = phi0;
    let mut phi_prev: Option<MetaVector> = None;
    let mut k = 0usize;
    for (phase_id, phase) in spec.schedule.phases() {
        opt.set_step_size(phase.step_size.unwrap_or(spec.optimizer.step_size))?;
        for _ in 0..phase.steps {
            k += 1;
            let step_seed = spec.step_seed(k);
            let result = meta_step(p, spec, phase, &mut opt, &phi, phi_prev.as_ref(), step_seed)
                .and_then(|(next, gn)| {
                    let loss = p.black_box_h(&next, spec.t_steps, spec.eval_seed())?;
                    if !loss.is_finite() {
                        return Err(Error::divergence(k, loss.abs(), "non-finite meta loss"));
                    }
                    Ok((next, gn, loss))
                });
            match result {
                Ok((next, grad_norm, meta_loss)) => {
                    record.push(RunRow {
                        step: k,
                        phase: phase_id,
                        meta_loss,
                        grad_norm,
                        wall_seconds: start.elapsed().as_secs_f64(),
                        seed: step_seed,
                    })?;
                    phi_prev = Some(std::mem::replace(&mut phi, next));
                    observe(k, &phi)?;
                }
                Err(e) if e.is_divergence() => {
                    record.push(RunRow {
                        step: k,
                        phase: phase_id,
                        meta_loss: f64::NAN,
                        grad_norm: f64::NAN,
                        wall_seconds: start.elapsed().as_secs_f64(),
                        seed: step_seed,
                    })?;
                    return Ok(TrainingOutcome {
                        phi,
                        record,
                        error: Some(e),
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TrainingOutcome {
        phi,
        record,
        error: None,
    })
}

/// Averages `accumulation` independent estimates and applies one update.
fn meta_step<P: BilevelProblem + ?Sized>(
    p: &P,
    spec: &TrainingSpec,
    phase: &Phase,
    opt: &mut MetaOptimizer,
    phi: &MetaVector,
    phi_prev: Option<&MetaVector>,
    step_seed: u64,
) -> Result<(MetaVector, f64)> {
    let mut grad = MetaVector::zeros(p.meta_dim());
    for slot in 0..spec.accumulation as u64 {
        let slot_seed = derive_seed(step_seed, slot);
        let est = phase.estimator.estimate(
            p,
            phi,
            phi_prev,
            spec.t_steps,
            derive_seed(slot_seed, 0),
            derive_seed(slot_seed, 1),
        )?;
        grad.axpy(1.0, &est.grad);
    }
    grad.scale(1.0 / spec.accumulation as f64);
    let next = opt.step(phi, &grad)?;
    Ok((next, grad.norm()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Distribution;
    use crate::problem::{DistillationSpec, QuadraticSpec};

    fn quad(n: usize, seed: u64) -> crate::problem::QuadraticBilevel {
        QuadraticSpec {
            m: n,
            n,
            eig_min: 0.5,
            eig_max: 1.0,
            lambda: 0.01,
            seed,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    fn fg2u(b: usize) -> EstimatorSpec {
        EstimatorSpec {
            b,
            ..EstimatorSpec::of(EstimatorKind::Fg2u)
        }
    }

    #[test]
    fn degenerate_schedule_is_pure_phase2() {
        let p = quad(4, 1);
        let spec = TrainingSpec {
            schedule: PhaseSchedule::single(fg2u(2), 7),
            optimizer: OptimizerSpec::gd(0.1),
            ..Default::default()
        };
        let out = run_training(&p, &spec).unwrap();
        assert!(out.error.is_none());
        assert_eq!(out.record.len(), 7);
        assert!(out.record.rows().iter().all(|r| r.phase == 2));
        assert_eq!(
            out.record.rows().iter().map(|r| r.step).collect::<Vec<_>>(),
            (1..=7).collect::<Vec<_>>()
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let p = quad(6, 2);
        let spec = TrainingSpec {
            schedule: PhaseSchedule::two_phase(
                EstimatorSpec::of(EstimatorKind::HessianFree),
                5,
                fg2u(3),
                5,
            ),
            optimizer: OptimizerSpec::adam(0.05),
            accumulation: 2,
            master_seed: 11,
            ..Default::default()
        };
        let a = run_training(&p, &spec).unwrap();
        let b = run_training(&p, &spec).unwrap();
        let bits = |o: &TrainingOutcome| {
            o.record
                .rows()
                .iter()
                .map(|r| (r.meta_loss.to_bits(), r.seed))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.record.rows()[4].phase, 1);
        assert_eq!(a.record.rows()[5].phase, 2);
    }

    #[test]
    fn meta_loss_is_recorded_after_update() {
        let p = quad(3, 3);
        let spec = TrainingSpec {
            schedule: PhaseSchedule::single(EstimatorSpec::of(EstimatorKind::Rgu), 3),
            optimizer: OptimizerSpec::gd(0.2),
            ..Default::default()
        };
        let mut seen = Vec::new();
        let out = run_training_with(&p, &spec, p.initial_meta(), |_, phi| {
            seen.push(phi.clone());
            Ok(())
        })
        .unwrap();
        for (row, phi) in out.record.rows().iter().zip(&seen) {
            assert_eq!(
                row.meta_loss,
                p.black_box_h(phi, spec.t_steps, spec.eval_seed()).unwrap()
            );
        }
        assert_eq!(seen.last(), Some(&out.phi));
    }

    #[test]
    fn divergence_terminates_and_records() {
        let p = quad(3, 4);
        let spec = TrainingSpec {
            schedule: PhaseSchedule::single(EstimatorSpec::of(EstimatorKind::Rgu), 500),
            optimizer: OptimizerSpec::gd(1e150),
            ..Default::default()
        };
        let out = run_training(&p, &spec).unwrap();
        assert!(out.error.as_ref().is_some_and(Error::is_divergence));
        let last = out.record.last().unwrap();
        assert!(last.meta_loss.is_nan());
        assert!(out.record.rows()[..out.record.len() - 1]
            .iter()
            .all(|r| r.meta_loss.is_finite()));
        assert!(out.record.len() < 500);
    }

    #[test]
    fn configuration_errors_surface_before_compute() {
        let p = quad(3, 5);
        let bad_acc = TrainingSpec {
            accumulation: 0,
            ..Default::default()
        };
        assert!(run_training(&p, &bad_acc).is_err());
        let bad_b = TrainingSpec {
            schedule: PhaseSchedule::single(fg2u(0), 3),
            ..Default::default()
        };
        let msg = run_training(&p, &bad_b).unwrap_err().to_string();
        assert!(msg.contains("phase2") && msg.contains("b"), "{msg}");
        let pde = crate::problem::PdeSpec {
            grid: crate::problem::PdeGrid { n_x: 16, n_t: 16 },
            ..Default::default()
        }
        .build()
        .unwrap();
        let needs_grad = TrainingSpec {
            schedule: PhaseSchedule::single(fg2u(1), 1),
            t_steps: 16,
            ..Default::default()
        };
        assert!(run_training(&pde, &needs_grad).is_err());
    }

    #[test]
    fn accumulation_matches_wider_batch_in_expectation() {
        // one GD step from the same phi: a slots of b directions vs one slot of a*b
        let p = quad(8, 6);
        let (a, b, trials) = (4usize, 2usize, 4000u64);
        let step = |acc: usize, width: usize, seed: u64| {
            let spec = TrainingSpec {
                schedule: PhaseSchedule::single(fg2u(width), 1),
                optimizer: OptimizerSpec::gd(1.0),
                accumulation: acc,
                master_seed: seed,
                ..Default::default()
            };
            run_training(&p, &spec).unwrap().phi
        };
        let n = p.meta_dim();
        let (mut s1, mut q1, mut s2, mut q2) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for seed in 0..trials {
            let x = step(a, b, seed);
            let y = step(1, a * b, seed + trials);
            for i in 0..n {
                s1[i] += x[i];
                q1[i] += x[i] * x[i];
                s2[i] += y[i];
                q2[i] += y[i] * y[i];
            }
        }
        let t = trials as f64;
        for i in 0..n {
            let (m1, m2) = (s1[i] / t, s2[i] / t);
            let v1 = q1[i] / t - m1 * m1;
            let v2 = q2[i] / t - m2 * m2;
            let se = ((v1 + v2) / t).sqrt();
            assert!(
                (m1 - m2).abs() <= 3.0 * se + 1e-12,
                "coord {i}: {m1} vs {m2} (se {se})"
            );
        }
    }

    #[test]
    fn two_phase_beats_pure_forward_gradient() {
        let (mut two, mut pure) = (Vec::new(), Vec::new());
        for seed in 0..10 {
            let p = QuadraticSpec {
                m: 20,
                n: 20,
                eig_min: 0.5,
                eig_max: 1.0,
                lambda: 0.01,
                seed,
                ..Default::default()
            }
            .build()
            .unwrap();
            let base = TrainingSpec {
                optimizer: OptimizerSpec::gd(0.05),
                t_steps: 20,
                master_seed: seed,
                ..Default::default()
            };
            let hf = EstimatorSpec::of(EstimatorKind::HessianFree);
            let two_spec = TrainingSpec {
                schedule: PhaseSchedule::two_phase(hf, 200, fg2u(1), 200),
                ..base.clone()
            };
            let pure_spec = TrainingSpec {
                schedule: PhaseSchedule::single(fg2u(1), 200),
                ..base
            };
            two.push(
                run_training(&p, &two_spec)
                    .unwrap()
                    .record
                    .last()
                    .unwrap()
                    .meta_loss,
            );
            pure.push(
                run_training(&p, &pure_spec)
                    .unwrap()
                    .record
                    .last()
                    .unwrap()
                    .meta_loss,
            );
        }
        assert!(median(&mut two) <= median(&mut pure), "{two:?} vs {pure:?}");
    }

    #[test]
    fn distillation_meta_loss_decreases_early() {
        let mut first = Vec::new();
        let mut fiftieth = Vec::new();
        for seed in 0..5 {
            let p = DistillationSpec {
                seed,
                ..Default::default()
            }
            .build()
            .unwrap();
            let spec = TrainingSpec {
                schedule: PhaseSchedule::single(
                    EstimatorSpec {
                        b: 8,
                        distribution: Distribution::Rademacher,
                        ..EstimatorSpec::of(EstimatorKind::Fg2u)
                    },
                    50,
                ),
                optimizer: OptimizerSpec::adam(0.05),
                t_steps: 20,
                master_seed: seed,
                ..Default::default()
            };
            let initial = p
                .black_box_h(&p.initial_meta(), spec.t_steps, spec.eval_seed())
                .unwrap();
            let out = run_training(&p, &spec).unwrap();
            assert!(out.error.is_none());
            first.push(initial);
            fiftieth.push(out.record.last().unwrap().meta_loss);
        }
        assert!(
            median(&mut fiftieth) < median(&mut first),
            "{first:?} -> {fiftieth:?}"
        );
    }

    fn median(xs: &mut [f64]) -> f64 {
        xs.sort_by(f64::total_cmp);
        xs[xs.len() / 2]
    }
}
