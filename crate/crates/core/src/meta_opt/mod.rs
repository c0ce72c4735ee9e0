//! Outer-loop optimization: meta updates, gradient accumulation and the
//! two-phase training schedule.

mod record;
mod smoothness;
mod training;

pub use record::{RunRecord, RunRow};
pub use smoothness::estimate_smoothness;
pub use training::{
    run_training, run_training_with, Phase, PhaseSchedule, TrainingOutcome, TrainingSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::estimators::GradientEstimate;
use crate::math::MetaVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_size: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerSpec {
    pub fn gd(step_size: f64) -> Self {
        Self {
            kind: OptimizerKind::Gd,
            step_size,
            ..Self::default()
        }
    }

    pub fn adam(step_size: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            step_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::invalid(
                "optimizer.step_size must be positive and finite",
            ));
        }
        for (name, b) in [
            ("optimizer.beta1", self.beta1),
            ("optimizer.beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::invalid("optimizer.eps must be positive"));
        }
        Ok(())
    }
}

/// Stateful meta-parameter update rule.
#[derive(Debug, Clone)]
pub struct MetaOptimizer {
    spec: OptimizerSpec,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl MetaOptimizer {
    pub fn new(spec: OptimizerSpec, n: usize) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            first: vec![0.0; n],
            second: vec![0.0; n],
            steps: 0,
        })
    }

    pub fn spec(&self) -> &OptimizerSpec {
        &self.spec
    }

    pub fn step_size(&self) -> f64 {
        self.spec.step_size
    }

    pub fn set_step_size(&mut self, step_size: f64) -> Result<()> {
        let spec = OptimizerSpec {
            step_size,
            ..self.spec.clone()
        };
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn meta_step(
        &mut self,
        phi: &MetaVector,
        estimate: &GradientEstimate,
    ) -> Result<MetaVector> {
        self.step(phi, &estimate.grad)
    }

    /// Applies one update with gradient `g`; `k` in a divergence report is the update count.
    pub fn step(&mut self, phi: &MetaVector, g: &MetaVector) -> Result<MetaVector> {
        check_len("meta_step phi", self.first.len(), phi.len())?;
        check_len("meta_step gradient", self.first.len(), g.len())?;
        let k = self.steps + 1;
        let lr = self.spec.step_size;
        let next: Vec<f64> = match self.spec.kind {
            OptimizerKind::Gd => phi.iter().zip(g.iter()).map(|(p, g)| p - lr * g).collect(),
            OptimizerKind::Adam => {
                let (b1, b2) = (self.spec.beta1, self.spec.beta2);
                let c1 = 1.0 - b1.powf(k as f64);
                let c2 = 1.0 - b2.powf(k as f64);
                let mut first = self.first.clone();
                let mut second = self.second.clone();
                let next = (0..phi.len())
                    .map(|i| {
                        first[i] = b1 * first[i] + (1.0 - b1) * g[i];
                        second[i] = b2 * second[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = first[i] / c1;
                        let v_hat = second[i] / c2;
                        phi[i] - lr * m_hat / (v_hat.sqrt() + self.spec.eps)
                    })
                    .collect();
                self.first = first;
                self.second = second;
                next
            }
        };
        let next = MetaVector::from(next);
        if !next.is_finite() {
            return Err(Error::divergence(
                k as usize,
                next.norm(),
                "non-finite meta update",
            ));
        }
        self.steps = k;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> MetaVector {
        MetaVector::from(x.to_vec())
    }

    #[test]
    fn gd_arithmetic() {
        let mut opt = MetaOptimizer::new(OptimizerSpec::gd(0.1), 2).unwrap();
        let next = opt.step(&v(&[1.0, 1.0]), &v(&[1.0, -1.0])).unwrap();
        assert!((next[0] - 0.9).abs() < 1e-15 && (next[1] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_phi_unchanged() {
        for spec in [OptimizerSpec::gd(0.5), OptimizerSpec::adam(0.5)] {
            let mut opt = MetaOptimizer::new(spec, 3).unwrap();
            let phi = v(&[0.3, -2.0, 5.0]);
            let mut cur = phi.clone();
            for _ in 0..5 {
                cur = opt.step(&cur, &MetaVector::zeros(3)).unwrap();
            }
            assert_eq!(cur, phi);
        }
    }

    #[test]
    fn adam_first_step_moves_by_step_size() {
        let mut opt = MetaOptimizer::new(OptimizerSpec::adam(0.01), 2).unwrap();
        let next = opt.step(&v(&[0.0, 0.0]), &v(&[3.0, -1e-3])).unwrap();
        assert!((next[0] + 0.01).abs() < 1e-9);
        assert!((next[1] - 0.01).abs() < 1e-7);
    }

    #[test]
    fn adam_matches_reference_recursion() {
        let spec = OptimizerSpec::adam(0.05);
        let mut opt = MetaOptimizer::new(spec.clone(), 1).unwrap();
        let grads = [1.0, -0.5, 0.25, 2.0];
        let (mut m, mut s, mut x, mut y) = (0.0, 0.0, 1.0, v(&[1.0]));
        for (t, &g) in grads.iter().enumerate() {
            let t = (t + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            s = 0.999 * s + 0.001 * g * g;
            x -= 0.05 * (m / (1.0 - 0.9f64.powi(t)))
                / ((s / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
            y = opt.step(&y, &v(&[g])).unwrap();
        }
        assert!((x - y[0]).abs() < 1e-14);
        assert_eq!(opt.steps(), 4);
    }

    #[test]
    fn non_finite_update_is_divergence() {
        let mut opt = MetaOptimizer::new(OptimizerSpec::gd(1.0), 1).unwrap();
        let err = opt.step(&v(&[0.0]), &v(&[f64::NAN])).unwrap_err();
        assert!(err.is_divergence());
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(MetaOptimizer::new(OptimizerSpec::gd(0.0), 1).is_err());
        assert!(MetaOptimizer::new(OptimizerSpec::gd(f64::INFINITY), 1).is_err());
        let bad = OptimizerSpec {
            beta1: 1.0,
            ..OptimizerSpec::default()
        };
        assert!(bad.validate().is_err());
        let mut opt = MetaOptimizer::new(OptimizerSpec::gd(0.1), 2).unwrap();
        assert!(opt.step(&v(&[0.0]), &v(&[0.0])).is_err());
    }
}
