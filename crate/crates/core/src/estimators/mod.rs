//! Hypergradient estimators.
//!
//! Forward-gradient family: [`fg2u_estimate`] (tangent propagation),
//! [`fg2u_zo_estimate`] (finite differences of a black-box `h`) and
//! [`vr_estimate`] (control-variate baseline at a reference point).
//! Implicit-function family: [`neumann_if_estimate`] and
//! [`hessian_free_estimate`], evaluated at the final inner iterate.
//! [`EstimatorSpec`] dispatches to these and to the exact unrolled modes.

mod forward;
mod implicit;
mod variance;

pub use forward::{
    combine, fg2u_directional, fg2u_estimate, fg2u_estimate_metered, fg2u_zo_estimate,
    truncated_directional, vr_components, vr_estimate,
};
pub use implicit::{
    hessian_free_estimate, neumann_if_estimate, neumann_ihvp, NEUMANN_GROWTH_LIMIT,
};
pub use variance::{validate_variance, VarianceReport};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::footprint::FloatMeter;
use crate::math::{sample_directions, Distribution, MetaVector};
use crate::problem::BilevelProblem;
use crate::unroll::{fgu_full_metered, rgu_metered, trgu, unroll, DEFAULT_FGU_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Fg2u,
    Fg2uZo,
    Fgu,
    Rgu,
    Trgu,
    NeumannIf,
    HessianFree,
    Vr,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 8] = [
        EstimatorKind::Fg2u,
        EstimatorKind::Fg2uZo,
        EstimatorKind::Fgu,
        EstimatorKind::Rgu,
        EstimatorKind::Trgu,
        EstimatorKind::NeumannIf,
        EstimatorKind::HessianFree,
        EstimatorKind::Vr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Fg2u => "fg2u",
            EstimatorKind::Fg2uZo => "fg2u_zo",
            EstimatorKind::Fgu => "fgu",
            EstimatorKind::Rgu => "rgu",
            EstimatorKind::Trgu => "trgu",
            EstimatorKind::NeumannIf => "neumann_if",
            EstimatorKind::HessianFree => "hessian_free",
            EstimatorKind::Vr => "vr",
        }
    }

    pub fn is_zeroth_order(self) -> bool {
        self == EstimatorKind::Fg2uZo
    }

    /// Whether the estimator draws random directions.
    pub fn uses_directions(self) -> bool {
        matches!(
            self,
            EstimatorKind::Fg2u | EstimatorKind::Fg2uZo | EstimatorKind::Vr
        )
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown estimator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: MetaVector,
    pub estimator: EstimatorKind,
    /// Number of random directions; zero for deterministic estimators.
    pub b: usize,
    pub t_steps: usize,
    /// Finite-difference step, present only for the zeroth-order estimator.
    pub mu: Option<f64>,
    pub wall_seconds: f64,
    pub directions_seed: u64,
}

impl GradientEstimate {
    pub(crate) fn new(
        grad: MetaVector,
        estimator: EstimatorKind,
        b: usize,
        t_steps: usize,
        mu: Option<f64>,
        start: Instant,
        directions_seed: u64,
    ) -> Self {
        Self {
            grad,
            estimator,
            b,
            t_steps,
            mu,
            wall_seconds: start.elapsed().as_secs_f64(),
            directions_seed,
        }
    }
}

/// Estimator selection plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    /// Random directions per estimate.
    pub b: usize,
    pub distribution: Distribution,
    /// Finite-difference step of the zeroth-order estimator.
    pub mu: f64,
    /// Neumann step size, or the identity scale of the Hessian-free estimator.
    pub alpha: f64,
    /// Number of Neumann terms beyond the first.
    pub neumann_k: usize,
    /// Kept reverse steps for truncated reverse mode.
    pub trgu_s: usize,
    /// Kept trailing steps of the variance-reduction baseline; full unroll when absent.
    pub vr_truncated_s: Option<usize>,
    /// Cap on `M * N` for the dense forward mode.
    pub fgu_cap: usize,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Fg2u,
            b: 1,
            distribution: Distribution::Rademacher,
            mu: 1e-4,
            alpha: 1.0,
            neumann_k: 20,
            trgu_s: 1,
            vr_truncated_s: None,
            fgu_cap: DEFAULT_FGU_CAP,
        }
    }
}

impl EstimatorSpec {
    pub fn of(kind: EstimatorKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.kind.uses_directions() && self.b == 0 {
            return Err(Error::invalid("estimator.b must be >= 1"));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("estimator.mu must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("estimator.alpha must be positive"));
        }
        if self.kind == EstimatorKind::Trgu && self.trgu_s > t_steps {
            return Err(Error::invalid(format!(
                "estimator.trgu_s = {} exceeds T = {t_steps}",
                self.trgu_s
            )));
        }
        if let Some(s) = self.vr_truncated_s {
            if s > t_steps {
                return Err(Error::invalid(format!(
                    "estimator.vr_truncated_s = {s} exceeds T = {t_steps}"
                )));
            }
        }
        Ok(())
    }

    /// One hypergradient estimate at `phi`. `phi_ref` is the baseline point of
    /// the variance-reduced estimator (defaults to `phi`).
    pub fn estimate<P: BilevelProblem + ?Sized>(
        &self,
        p: &P,
        phi: &MetaVector,
        phi_ref: Option<&MetaVector>,
        t_steps: usize,
        run_seed: u64,
        directions_seed: u64,
    ) -> Result<GradientEstimate> {
        self.estimate_metered(
            p,
            phi,
            phi_ref,
            t_steps,
            run_seed,
            directions_seed,
            &FloatMeter::new(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn estimate_metered<P: BilevelProblem + ?Sized>(
        &self,
        p: &P,
        phi: &MetaVector,
        phi_ref: Option<&MetaVector>,
        t_steps: usize,
        run_seed: u64,
        directions_seed: u64,
        meter: &FloatMeter,
    ) -> Result<GradientEstimate> {
        self.validate(t_steps)?;
        let start = Instant::now();
        let n = p.meta_dim();
        let dirs = || sample_directions(self.distribution, n, self.b, directions_seed);
        let exact = |grad| GradientEstimate::new(grad, self.kind, 0, t_steps, None, start, 0);
        let est = match self.kind {
            EstimatorKind::Fg2u => {
                fg2u_estimate_metered(p, phi, t_steps, run_seed, &dirs()?, meter)?
            }
            EstimatorKind::Fg2uZo => {
                fg2u_zo_estimate(p, phi, t_steps, run_seed, &dirs()?, self.mu)?
            }
            EstimatorKind::Vr => {
                let phi_ref = phi_ref.unwrap_or(phi);
                vr_estimate(
                    p,
                    phi,
                    phi_ref,
                    t_steps,
                    run_seed,
                    &dirs()?,
                    self.vr_truncated_s,
                )?
            }
            EstimatorKind::Fgu => {
                exact(fgu_full_metered(p, phi, t_steps, run_seed, self.fgu_cap, meter)?.0)
            }
            EstimatorKind::Rgu => exact(rgu_metered(p, phi, t_steps, run_seed, meter)?),
            EstimatorKind::Trgu => {
                let (_, traj) = unroll(p, phi, t_steps, run_seed, true)?;
                exact(trgu(p, &traj.expect("trajectory requested"), self.trgu_s)?)
            }
            EstimatorKind::NeumannIf => {
                let (theta, _) = unroll(p, phi, t_steps, run_seed, false)?;
                let mut e = neumann_if_estimate(p, &theta, phi, self.alpha, self.neumann_k)?;
                e.t_steps = t_steps;
                e
            }
            EstimatorKind::HessianFree => {
                let (theta, _) = unroll(p, phi, t_steps, run_seed, false)?;
                let mut e = hessian_free_estimate(p, &theta, phi, self.alpha)?;
                e.t_steps = t_steps;
                e
            }
        };
        meter.alloc(n);
        if !est.grad.is_finite() {
            return Err(Error::divergence(
                t_steps,
                est.grad.norm(),
                "non-finite hypergradient estimate",
            ));
        }
        Ok(GradientEstimate {
            wall_seconds: start.elapsed().as_secs_f64(),
            ..est
        })
    }
}
