//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use blo_core::meta_opt::{OptimizerSpec, PhaseSchedule, TrainingSpec};
use blo_core::problem::{DistillationSpec, PdeSpec, QuadraticSpec};
use blo_core::BilevelProblem;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_T_STEPS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemConfig {
    Quadratic(QuadraticSpec),
    Distillation(DistillationSpec),
    Pde(PdeSpec),
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig::Quadratic(QuadraticSpec::default())
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> blo_core::Result<()> {
        match self {
            ProblemConfig::Quadratic(s) => s.validate(),
            ProblemConfig::Distillation(s) => s.validate(),
            ProblemConfig::Pde(s) => s.validate(),
        }
    }

    pub fn build(&self) -> blo_core::Result<Box<dyn BilevelProblem>> {
        Ok(match self {
            ProblemConfig::Quadratic(s) => Box::new(s.build()?),
            ProblemConfig::Distillation(s) => Box::new(s.build()?),
            ProblemConfig::Pde(s) => Box::new(s.build()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub schedule: PhaseSchedule,
    pub optimizer: OptimizerSpec,
    /// Independent estimates averaged per meta step.
    pub accumulation: usize,
    /// Inner unroll length; PDE problems default to the solver's time steps.
    pub t_steps: Option<usize>,
    pub master_seed: u64,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validated()
    }

    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Fills defaults that depend on other fields and checks every range.
    pub fn validated(mut self) -> CliResult<Self> {
        if self.accumulation == 0 {
            self.accumulation = 1;
        }
        let cfg_err = |key: &str, e: blo_core::Error| CliError::Config(format!("{key}: {e}"));
        self.problem.validate().map_err(|e| cfg_err("problem", e))?;
        let horizon = match &self.problem {
            ProblemConfig::Pde(s) => Some(s.grid.n_t),
            _ => None,
        };
        let t = self.t_steps.or(horizon).unwrap_or(DEFAULT_T_STEPS);
        if let Some(h) = horizon {
            if t != h {
                return Err(CliError::Config(format!(
                    "t_steps: pde problems unroll exactly grid.n_t = {h} steps"
                )));
            }
        }
        self.t_steps = Some(t);
        self.training()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(self)
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps.unwrap_or(DEFAULT_T_STEPS)
    }

    pub fn training(&self) -> TrainingSpec {
        TrainingSpec {
            schedule: self.schedule.clone(),
            optimizer: self.optimizer.clone(),
            accumulation: self.accumulation.max(1),
            t_steps: self.t_steps(),
            master_seed: self.master_seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_json(r#"{"problem": {"kind": "quadratic"}}"#).unwrap();
        assert_eq!(cfg.t_steps, Some(DEFAULT_T_STEPS));
        assert_eq!(cfg.accumulation, 1);
        assert_eq!(
            cfg.problem,
            ProblemConfig::Quadratic(QuadraticSpec::default())
        );
    }

    #[test]
    fn unknown_keys_are_named() {
        for (json, key) in [
            (r#"{"problme": {}}"#, "problme"),
            (r#"{"problem": {"kind": "quadratic", "mm": 3}}"#, "mm"),
            (
                r#"{"schedule": {"phase2": {"estimator": {"kind": "fg2u", "bb": 1}}}}"#,
                "bb",
            ),
            (r#"{"optimizer": {"lr": 0.1}}"#, "lr"),
        ] {
            let msg = ExperimentConfig::from_json(json).unwrap_err().to_string();
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn range_errors_name_the_key() {
        let cases = [
            (
                r#"{"schedule": {"phase2": {"estimator": {"kind": "fg2u", "b": 0}, "steps": 3}}}"#,
                "b",
            ),
            (r#"{"optimizer": {"step_size": -1.0}}"#, "step_size"),
            (r#"{"t_steps": 0}"#, "t_steps"),
            (r#"{"problem": {"kind": "quadratic", "m": 0}}"#, "m"),
        ];
        for (json, key) in cases {
            let err = ExperimentConfig::from_json(json).unwrap_err();
            assert_eq!(err.exit_code(), crate::error::EXIT_CONFIG);
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn pde_horizon_defaults_to_grid() {
        let json =
            r#"{"problem": {"kind": "pde", "pde": "burgers", "grid": {"n_x": 32, "n_t": 64}}}"#;
        assert_eq!(ExperimentConfig::from_json(json).unwrap().t_steps, Some(64));
        let bad = r#"{"problem": {"kind": "pde", "grid": {"n_x": 32, "n_t": 64}}, "t_steps": 10}"#;
        assert!(ExperimentConfig::from_json(bad).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        for json in [
            r#"{"problem": {"kind": "distillation", "classes": 3}, "accumulation": 2, "master_seed": 9}"#,
            r#"{"problem": {"kind": "pde", "pde": "kdv", "init_nu": 0.004}, "optimizer": {"kind": "gd", "step_size": 0.5}}"#,
            r#"{"schedule": {"phase1": {"estimator": {"kind": "trgu", "trgu_s": 2}, "steps": 4}, "phase2": {"steps": 3}}}"#,
        ] {
            let cfg = ExperimentConfig::from_json(json).unwrap();
            let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(cfg.to_json(), again.to_json());
        }
    }
}
