//! Coefficient discovery for one-dimensional PDEs.
//!
//! The meta parameter is `phi = [ln nu]`. The inner state is the solution on
//! the spatial grid followed by one accumulator holding the running sum of
//! squared observation misfits; each inner step advances the solver by one
//! time step and adds the misfit of any observation taken at that time.
//! Only zeroth-order access is provided.

mod solver;

pub use solver::{pde_solve, solve_toeplitz_tridiagonal, Pde, PdeField, PdeGrid, Stepper};

use serde::{Deserialize, Serialize};

use super::BilevelProblem;
use crate::error::{check_len, Error, Result};
use crate::math::{InnerVector, MetaVector, Rng};

/// Observations form a `OBS_SIDE x OBS_SIDE` space-time grid.
pub const OBS_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PdeSpec {
    pub pde: Pde,
    pub grid: PdeGrid,
    /// Coefficient generating the observations; the equation's reference value when absent.
    pub nu_true: Option<f64>,
    /// Initial coefficient guess; drawn uniformly from `(0, hi]` when absent.
    pub init_nu: Option<f64>,
    pub seed: u64,
}

impl Default for PdeSpec {
    fn default() -> Self {
        Self {
            pde: Pde::Burgers,
            grid: PdeGrid::default(),
            nu_true: None,
            init_nu: None,
            seed: 0,
        }
    }
}

impl PdeSpec {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate(self.pde)?;
        if self.grid.n_t < OBS_SIDE {
            return Err(Error::invalid(format!("pde grid needs n_t >= {OBS_SIDE}")));
        }
        for (name, v) in [("nu_true", self.nu_true), ("init_nu", self.init_nu)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("pde: {name} must be positive")));
                }
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<PdeDiscoveryProblem> {
        PdeDiscoveryProblem::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct PdeDiscoveryProblem {
    spec: PdeSpec,
    stepper: Stepper,
    nu_true: f64,
    init_nu: f64,
    obs_x: Vec<usize>,
    /// Observation time-step indices, increasing.
    obs_t: Vec<usize>,
    /// `observations[i * OBS_SIDE + j] = u(obs_t[i], obs_x[j])`
    observations: Vec<f64>,
}

impl PdeDiscoveryProblem {
    pub fn new(spec: PdeSpec) -> Result<Self> {
        spec.validate()?;
        let stepper = Stepper::new(spec.pde, spec.grid)?;
        let nu_true = spec.nu_true.unwrap_or_else(|| spec.pde.nu_true());
        let init_nu = spec.init_nu.unwrap_or_else(|| {
            let mut rng = Rng::new(spec.seed);
            spec.pde.init_upper() * (1.0 - rng.uniform())
        });
        let (n_x, n_t) = (spec.grid.n_x, spec.grid.n_t);
        let obs_x = (0..OBS_SIDE)
            .map(|j| (2 * j + 1) * n_x / (2 * OBS_SIDE))
            .collect();
        let obs_t = (1..=OBS_SIDE).map(|i| i * n_t / OBS_SIDE).collect();
        let mut problem = Self {
            spec,
            stepper,
            nu_true,
            init_nu,
            obs_x,
            obs_t,
            observations: Vec::new(),
        };
        // generated through the same ln/exp round trip an optimizer would see
        let field = pde_solve(
            problem.spec.pde,
            problem.nu_true.ln().exp(),
            problem.spec.grid,
        )?;
        problem.observations = problem
            .obs_t
            .iter()
            .flat_map(|&n| problem.obs_x.iter().map(move |&j| (n, j)))
            .map(|(n, j)| field.at(n, j))
            .collect();
        Ok(problem)
    }

    pub fn pde(&self) -> Pde {
        self.spec.pde
    }

    pub fn grid(&self) -> PdeGrid {
        self.spec.grid
    }

    pub fn nu_true(&self) -> f64 {
        self.nu_true
    }

    pub fn init_nu(&self) -> f64 {
        self.init_nu
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    /// Coefficient encoded by `phi`.
    pub fn nu(phi: &MetaVector) -> f64 {
        phi[0].exp()
    }

    pub fn phi_for(nu: f64) -> MetaVector {
        MetaVector::from(vec![nu.ln()])
    }

    /// Relative error `|nu(phi) - nu_true| / nu_true`.
    pub fn relative_error(&self, phi: &MetaVector) -> f64 {
        (Self::nu(phi) - self.nu_true).abs() / self.nu_true
    }

    /// Number of inner steps of one solve.
    pub fn horizon(&self) -> usize {
        self.spec.grid.n_t
    }
}

impl BilevelProblem for PdeDiscoveryProblem {
    fn name(&self) -> &str {
        self.spec.pde.as_str()
    }

    fn meta_dim(&self) -> usize {
        1
    }

    fn inner_dim(&self) -> usize {
        self.spec.grid.n_x + 1
    }

    fn initial_meta(&self) -> MetaVector {
        Self::phi_for(self.init_nu)
    }

    fn is_differentiable(&self) -> bool {
        false
    }

    /// Mean squared misfit over all observations.
    fn meta_loss(&self, theta: &InnerVector, phi: &MetaVector) -> Result<f64> {
        check_len("pde theta", self.inner_dim(), theta.len())?;
        check_len("pde phi", 1, phi.len())?;
        Ok(theta[self.spec.grid.n_x] / self.observations.len() as f64)
    }

    fn inner_init(&self, phi: &MetaVector) -> Result<InnerVector> {
        check_len("pde phi", 1, phi.len())?;
        let mut state = self.stepper.initial_state();
        state.push(0.0);
        Ok(state.into())
    }

    fn transition(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        t: usize,
        _step_seed: u64,
    ) -> Result<InnerVector> {
        check_len("pde theta", self.inner_dim(), theta.len())?;
        check_len("pde phi", 1, phi.len())?;
        let n_x = self.spec.grid.n_x;
        let mut next = self.stepper.step(&theta[..n_x], Self::nu(phi), t)?;
        let mut misfit = theta[n_x];
        if let Ok(row) = self.obs_t.binary_search(&t) {
            let obs = &self.observations[row * OBS_SIDE..(row + 1) * OBS_SIDE];
            for (&j, &target) in self.obs_x.iter().zip(obs) {
                misfit += (next[j] - target).powi(2);
            }
        }
        next.push(misfit);
        Ok(next.into())
    }

    /// Runs the full solver horizon; `t_steps` must equal the grid's `n_t`.
    fn black_box_h(&self, phi: &MetaVector, t_steps: usize, run_seed: u64) -> Result<f64> {
        if t_steps != self.horizon() {
            return Err(Error::invalid(format!(
                "pde problems unroll exactly n_t = {} steps, got T = {t_steps}",
                self.horizon()
            )));
        }
        let (theta, _) = crate::unroll::unroll(self, phi, t_steps, run_seed, false)?;
        self.meta_loss(&theta, phi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{sample_directions, Distribution};

    fn small(pde: Pde) -> PdeDiscoveryProblem {
        PdeSpec {
            pde,
            grid: PdeGrid { n_x: 64, n_t: 128 },
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn misfit_vanishes_at_truth() {
        for pde in [Pde::Burgers, Pde::AllenCahn, Pde::Kdv] {
            let p = PdeSpec {
                pde,
                ..Default::default()
            }
            .build()
            .unwrap();
            let h = p
                .black_box_h(&PdeDiscoveryProblem::phi_for(p.nu_true()), p.horizon(), 0)
                .unwrap();
            assert!(h.abs() < 1e-28, "{pde:?}: {h}");
        }
    }

    #[test]
    fn wrong_viscosity_has_positive_misfit() {
        let p = PdeSpec::default().build().unwrap();
        let h = p
            .black_box_h(
                &PdeDiscoveryProblem::phi_for(10.0 * p.nu_true()),
                p.horizon(),
                0,
            )
            .unwrap();
        assert!(h > 1e-6, "{h}");
    }

    #[test]
    fn observation_layout() {
        let p = PdeSpec::default().build().unwrap();
        assert_eq!(p.observations().len(), 64);
        assert_eq!(p.obs_x.first(), Some(&16));
        assert_eq!(p.obs_x.last(), Some(&240));
        assert_eq!(p.obs_t.last(), Some(&512));
    }

    #[test]
    fn random_init_lies_in_range() {
        for pde in [Pde::Burgers, Pde::AllenCahn, Pde::Kdv] {
            for seed in 0..20 {
                let p = PdeSpec {
                    pde,
                    seed,
                    grid: PdeGrid { n_x: 16, n_t: 16 },
                    ..Default::default()
                }
                .build()
                .unwrap();
                assert!(p.init_nu() > 0.0 && p.init_nu() <= pde.init_upper());
            }
        }
    }

    #[test]
    fn derivative_oracles_are_unavailable() {
        let p = small(Pde::Burgers);
        let phi = p.initial_meta();
        let theta = p.inner_init(&phi).unwrap();
        assert!(matches!(
            p.partial_f_theta(&theta, &phi),
            Err(Error::NotDifferentiable(_))
        ));
        assert!(matches!(
            p.g_hvp(&theta, &phi, &theta),
            Err(Error::NotDifferentiable(_))
        ));
        let dirs = sample_directions(Distribution::Rademacher, 1, 1, 0).unwrap();
        assert!(crate::estimators::fg2u_estimate(&p, &phi, p.horizon(), 0, &dirs).is_err());
    }

    #[test]
    fn zeroth_order_estimate_is_finite() {
        let p = PdeSpec::default().build().unwrap();
        let dirs = sample_directions(Distribution::Rademacher, 1, 1, 0).unwrap();
        let est =
            crate::estimators::fg2u_zo_estimate(&p, &p.initial_meta(), p.horizon(), 0, &dirs, 1e-4)
                .unwrap();
        assert!(est.grad[0].is_finite());
    }

    #[test]
    fn horizon_mismatch_rejected() {
        let p = small(Pde::Kdv);
        assert!(p.black_box_h(&p.initial_meta(), 10, 0).is_err());
    }
}
