//! The inner-loop engine.
//!
//! [`unroll`] runs the seeded inner optimizer. [`unroll_with_tangents`]
//! carries `b` tangents `y_i = Z_t v_i` along a single inner trajectory.
//! [`fgu_full`] materializes the full `M x N` Jacobian `Z_T`, and
//! [`rgu_backward`] / [`trgu`] run the reverse recursion over a stored
//! [`Trajectory`].

use rayon::prelude::*;

use crate::error::{check_len, Error, Result};
use crate::footprint::FloatMeter;
use crate::math::{derive_seed, DirectionBatch, InnerVector, Matrix, MetaVector};
use crate::problem::BilevelProblem;

/// Default cap on `M * N` for dense Jacobian oracles.
pub const DEFAULT_FGU_CAP: usize = 1 << 22;

/// Seed of inner step `t` (1-based) of the run seeded by `run_seed`.
pub fn step_seed(run_seed: u64, t: usize) -> u64 {
    derive_seed(run_seed, t as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    states: Vec<InnerVector>,
    step_seeds: Vec<u64>,
    phi: MetaVector,
}

impl Trajectory {
    /// Assembles a trajectory from parts without replaying it.
    pub fn from_parts(
        states: Vec<InnerVector>,
        step_seeds: Vec<u64>,
        phi: MetaVector,
    ) -> Result<Self> {
        if states.len() != step_seeds.len() + 1 {
            return Err(Error::invalid(format!(
                "trajectory needs T+1 states for T seeds, got {} states and {} seeds",
                states.len(),
                step_seeds.len()
            )));
        }
        Ok(Self {
            states,
            step_seeds,
            phi,
        })
    }

    pub fn states(&self) -> &[InnerVector] {
        &self.states
    }

    pub fn step_seeds(&self) -> &[u64] {
        &self.step_seeds
    }

    pub fn phi(&self) -> &MetaVector {
        &self.phi
    }

    /// Number of inner steps `T`.
    pub fn steps(&self) -> usize {
        self.step_seeds.len()
    }

    pub fn final_state(&self) -> &InnerVector {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    /// Stored floats: `(T+1) M + N`.
    pub fn float_count(&self) -> usize {
        self.states.iter().map(|s| s.len()).sum::<usize>() + self.phi.len()
    }

    /// Recomputes every step and checks it reproduces the stored state bit for bit.
    pub fn verify_replay<P: BilevelProblem + ?Sized>(&self, p: &P) -> Result<()> {
        check_len("trajectory phi", p.meta_dim(), self.phi.len())?;
        if p.inner_init(&self.phi)? != self.states[0] {
            return Err(Error::ReplayMismatch { step: 0 });
        }
        for t in 1..self.states.len() {
            let next = p.transition(&self.states[t - 1], &self.phi, t, self.step_seeds[t - 1])?;
            if next != self.states[t] {
                return Err(Error::ReplayMismatch { step: t });
            }
        }
        Ok(())
    }
}

fn check_finite(v: &[f64], step: usize, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Err(Error::divergence(step, norm, format!("non-finite {what}")))
    }
}

pub fn unroll<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    keep_trajectory: bool,
) -> Result<(InnerVector, Option<Trajectory>)> {
    unroll_metered(
        p,
        phi,
        t_steps,
        run_seed,
        keep_trajectory,
        &FloatMeter::new(),
    )
}

pub fn unroll_metered<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    keep_trajectory: bool,
    meter: &FloatMeter,
) -> Result<(InnerVector, Option<Trajectory>)> {
    check_len("unroll phi", p.meta_dim(), phi.len())?;
    let m = p.inner_dim();
    let mut theta = p.inner_init(phi)?;
    check_finite(&theta, 0, "inner iterate")?;
    meter.alloc(m);
    let mut states = Vec::new();
    let mut seeds = Vec::new();
    if keep_trajectory {
        states.reserve(t_steps + 1);
        seeds.reserve(t_steps);
        states.push(theta.clone());
        meter.alloc(m + phi.len());
    }
    for t in 1..=t_steps {
        let seed = step_seed(run_seed, t);
        theta = p.transition(&theta, phi, t, seed)?;
        check_finite(&theta, t, "inner iterate")?;
        if keep_trajectory {
            states.push(theta.clone());
            seeds.push(seed);
            meter.alloc(m);
        }
    }
    let traj = keep_trajectory.then(|| Trajectory {
        states,
        step_seeds: seeds,
        phi: phi.clone(),
    });
    Ok((theta, traj))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentBundle {
    pub theta: InnerVector,
    pub tangents: Vec<InnerVector>,
    pub directions: DirectionBatch,
}

pub fn unroll_with_tangents<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
) -> Result<TangentBundle> {
    unroll_with_tangents_metered(p, phi, t_steps, run_seed, dirs, &FloatMeter::new())
}

/// Tangents are updated in place; the held state is `theta`, `b` tangents,
/// `phi` and the directions, independent of `T`.
pub fn unroll_with_tangents_metered<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    meter: &FloatMeter,
) -> Result<TangentBundle> {
    let (m, n) = (p.inner_dim(), p.meta_dim());
    check_len("unroll phi", n, phi.len())?;
    if dirs.is_empty() {
        return Err(Error::invalid("direction batch is empty"));
    }
    check_len("direction length", n, dirs.dim())?;
    if !p.is_differentiable() {
        return Err(Error::NotDifferentiable("transition_jvp"));
    }
    let b = dirs.len();
    meter.alloc(n + b * n);

    let mut theta = p.inner_init(phi)?;
    check_finite(&theta, 0, "inner iterate")?;
    meter.alloc(m);
    let mut tangents = first_error(
        dirs.directions()
            .par_iter()
            .map(|v| p.init_jvp(phi, v))
            .collect(),
    )?;
    meter.alloc(b * m);
    for y in &tangents {
        check_finite(y, 0, "tangent")?;
    }

    for t in 1..=t_steps {
        let seed = step_seed(run_seed, t);
        let results: Vec<Result<()>> = tangents
            .par_iter_mut()
            .zip(dirs.directions().par_iter())
            .map(|(y, v)| {
                *y = p.transition_jvp(&theta, phi, t, seed, y, v)?;
                check_finite(y, t, "tangent")
            })
            .collect();
        results.into_iter().collect::<Result<()>>()?;
        theta = p.transition(&theta, phi, t, seed)?;
        check_finite(&theta, t, "inner iterate")?;
    }
    Ok(TangentBundle {
        theta,
        tangents,
        directions: dirs.clone(),
    })
}

/// Index-ordered collection of parallel results: the first failing index wins.
pub(crate) fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

/// Exact hypergradient `d_T Z_T + c_T` with the full Jacobian `Z_T` carried forward.
pub fn fgu_full<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    cap: usize,
) -> Result<(MetaVector, Matrix)> {
    fgu_full_metered(p, phi, t_steps, run_seed, cap, &FloatMeter::new())
}

pub fn fgu_full_metered<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    cap: usize,
    meter: &FloatMeter,
) -> Result<(MetaVector, Matrix)> {
    let (m, n) = (p.inner_dim(), p.meta_dim());
    let size = m.saturating_mul(n);
    if size > cap {
        return Err(Error::OracleTooLarge { size, cap });
    }
    let basis: Vec<MetaVector> = (0..n)
        .map(|j| {
            let mut e = MetaVector::zeros(n);
            e[j] = 1.0;
            e
        })
        .collect();
    let dirs = DirectionBatch::from_directions(basis, crate::math::Distribution::Coordinate)?;
    // The unit basis turns the tangent recursion into the column-wise Z recursion.
    let bundle = unroll_with_tangents_metered(p, phi, t_steps, run_seed, &dirs, meter)?;
    let z = Matrix::from_fn(m, n, |i, j| bundle.tangents[j][i]);
    let d = p.partial_f_theta(&bundle.theta, phi)?;
    let mut grad = p.partial_f_phi(&bundle.theta, phi)?;
    for (j, g) in grad.iter_mut().enumerate() {
        *g += d.dot(&bundle.tangents[j]);
    }
    Ok((grad, z))
}

/// Reverse-mode hypergradient `d_0 Z_0 + c_0` over a stored trajectory.
pub fn rgu_backward<P: BilevelProblem + ?Sized>(p: &P, traj: &Trajectory) -> Result<MetaVector> {
    traj.verify_replay(p)?;
    let phi = traj.phi();
    let t_steps = traj.steps();
    let (d, c) = reverse_sweep(p, traj, t_steps)?;
    let mut grad = c;
    grad.axpy(1.0, &p.init_vjp(phi, &d)?);
    Ok(grad)
}

/// Unroll with a stored trajectory followed by [`rgu_backward`].
pub fn rgu<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
) -> Result<MetaVector> {
    rgu_metered(p, phi, t_steps, run_seed, &FloatMeter::new())
}

pub fn rgu_metered<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    meter: &FloatMeter,
) -> Result<MetaVector> {
    let (_, traj) = unroll_metered(p, phi, t_steps, run_seed, true, meter)?;
    let traj = traj.expect("trajectory requested");
    // adjoint d and accumulator c
    meter.alloc(p.inner_dim() + p.meta_dim());
    rgu_backward(p, &traj)
}

/// Truncated reverse mode: `c_{T-s} = c_T + sum_{t=T-s+1}^{T} d_t B_t`.
///
/// The remaining implicit term, including `d_0 Z_0` when `s = T`, is dropped.
pub fn trgu<P: BilevelProblem + ?Sized>(p: &P, traj: &Trajectory, s: usize) -> Result<MetaVector> {
    if s > traj.steps() {
        return Err(Error::invalid(format!(
            "truncation s = {s} exceeds the number of inner steps T = {}",
            traj.steps()
        )));
    }
    check_len("trajectory phi", p.meta_dim(), traj.phi().len())?;
    let (_, c) = reverse_sweep(p, traj, s)?;
    Ok(c)
}

/// Runs `s` reverse steps from `T`, returning `(d_{T-s}, c_{T-s})`.
fn reverse_sweep<P: BilevelProblem + ?Sized>(
    p: &P,
    traj: &Trajectory,
    s: usize,
) -> Result<(InnerVector, MetaVector)> {
    let phi = traj.phi();
    let t_steps = traj.steps();
    let states = traj.states();
    let mut d = p.partial_f_theta(&states[t_steps], phi)?;
    let mut c = p.partial_f_phi(&states[t_steps], phi)?;
    for t in (t_steps + 1 - s..=t_steps).rev() {
        let (da, db) = p.transition_vjp(&states[t - 1], phi, t, traj.step_seeds()[t - 1], &d)?;
        c.axpy(1.0, &db);
        d = da;
        check_finite(&d, t, "adjoint")?;
    }
    Ok((d, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{max_abs, max_rel_diff, sample_directions, sub, Distribution};
    use crate::problem::{quadratic_true_hypergradient, QuadraticSpec};

    fn quad(init_coupling: bool) -> crate::problem::QuadraticBilevel {
        QuadraticSpec {
            m: 3,
            n: 2,
            init_coupling,
            noise: 0.05,
            seed: 21,
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_init() {
        let p = quad(true);
        let phi = p.initial_meta();
        let (theta, traj) = unroll(&p, &phi, 0, 1, true).unwrap();
        assert_eq!(theta, p.inner_init(&phi).unwrap());
        let traj = traj.unwrap();
        assert!(traj.step_seeds().is_empty());
        assert_eq!(traj.states().len(), 1);
    }

    #[test]
    fn trajectory_replays_exactly() {
        let p = quad(false);
        let (_, traj) = unroll(&p, &p.initial_meta(), 12, 4, true).unwrap();
        traj.unwrap().verify_replay(&p).unwrap();
    }

    #[test]
    fn converges_to_inner_fixed_point() {
        let p = QuadraticSpec {
            m: 4,
            n: 3,
            seed: 2,
            ..Default::default()
        }
        .build()
        .unwrap();
        let phi = p.initial_meta();
        let t = 200;
        let (theta, _) = unroll(&p, &phi, t, 0, false).unwrap();
        let rhs = p.b() * nalgebra::DVector::from_column_slice(&phi);
        let fixed = p.a().clone().cholesky().unwrap().solve(&rhs);
        let err = crate::math::norm(&sub(&theta, fixed.as_slice()));
        let bound = (1.0 - p.eta() * p.alpha()).powi(t as i32) * fixed.norm();
        assert!(err <= bound * (1.0 + 1e-9) + 1e-14, "{err} > {bound}");
    }

    #[test]
    fn tangent_base_case_is_init_jvp() {
        let p = quad(true);
        let phi = p.initial_meta();
        let dirs = sample_directions(Distribution::Gaussian, 2, 3, 8).unwrap();
        let bundle = unroll_with_tangents(&p, &phi, 0, 0, &dirs).unwrap();
        for (y, v) in bundle.tangents.iter().zip(dirs.directions()) {
            assert_eq!(y, &p.init_jvp(&phi, v).unwrap());
        }
    }

    #[test]
    fn tangents_match_dense_jacobian() {
        let p = quad(true);
        let phi = p.initial_meta();
        let (_, z) = fgu_full(&p, &phi, 5, 3, DEFAULT_FGU_CAP).unwrap();
        let dirs = sample_directions(Distribution::Gaussian, 2, 4, 1).unwrap();
        let bundle = unroll_with_tangents(&p, &phi, 5, 3, &dirs).unwrap();
        for (y, v) in bundle.tangents.iter().zip(dirs.directions()) {
            let zv = &z * nalgebra::DVector::from_column_slice(v);
            assert!(max_abs(&sub(y, zv.as_slice())) < 1e-10);
        }
    }

    #[test]
    fn zero_direction_has_zero_tangent() {
        let p = quad(true);
        let dirs =
            DirectionBatch::from_directions(vec![MetaVector::zeros(2)], Distribution::Gaussian)
                .unwrap();
        let bundle = unroll_with_tangents(&p, &p.initial_meta(), 6, 0, &dirs).unwrap();
        assert!(bundle.tangents[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negated_directions_negate_tangents() {
        let p = quad(true);
        let dirs = sample_directions(Distribution::Rademacher, 2, 3, 5).unwrap();
        let a = unroll_with_tangents(&p, &p.initial_meta(), 6, 0, &dirs).unwrap();
        let b = unroll_with_tangents(&p, &p.initial_meta(), 6, 0, &dirs.negated()).unwrap();
        for (x, y) in a.tangents.iter().zip(&b.tangents) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| *p == -*q));
        }
    }

    #[test]
    fn forward_and_reverse_agree_with_closed_form() {
        for coupling in [false, true] {
            let p = quad(coupling);
            let phi = p.initial_meta();
            let truth = quadratic_true_hypergradient(&p, &phi, 5, 7).unwrap();
            let (fwd, _) = fgu_full(&p, &phi, 5, 7, DEFAULT_FGU_CAP).unwrap();
            let rev = rgu(&p, &phi, 5, 7).unwrap();
            assert!(max_rel_diff(&fwd, &truth) < 1e-10);
            assert!(max_rel_diff(&rev, &fwd) < 1e-10);
        }
    }

    #[test]
    fn no_implicit_gradient_when_b_vanishes() {
        let p = crate::problem::QuadraticBilevel::new(
            Matrix::identity(2, 2) * 0.5,
            Matrix::zeros(2, 3),
            vec![1.0, 2.0].into(),
            1.0,
            0.25,
        )
        .unwrap();
        let phi: MetaVector = vec![1.0, -1.0, 2.0].into();
        let (g, _) = fgu_full(&p, &phi, 4, 0, DEFAULT_FGU_CAP).unwrap();
        assert_eq!(g, phi.scaled(0.25));
    }

    #[test]
    fn fgu_cap_enforced() {
        let p = quad(false);
        let err = fgu_full(&p, &p.initial_meta(), 2, 0, 5).unwrap_err();
        assert_eq!(err, Error::OracleTooLarge { size: 6, cap: 5 });
    }

    #[test]
    fn trgu_endpoints() {
        let p = quad(false);
        let phi = p.initial_meta();
        let (theta, traj) = unroll(&p, &phi, 8, 2, true).unwrap();
        let traj = traj.unwrap();
        assert_eq!(
            trgu(&p, &traj, 8).unwrap(),
            rgu_backward(&p, &traj).unwrap()
        );
        assert_eq!(
            trgu(&p, &traj, 0).unwrap(),
            p.partial_f_phi(&theta, &phi).unwrap()
        );
        assert!(matches!(trgu(&p, &traj, 9), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn tampered_trajectory_is_rejected() {
        let p = quad(false);
        let (_, traj) = unroll(&p, &p.initial_meta(), 4, 2, true).unwrap();
        let traj = traj.unwrap();
        let mut states = traj.states().to_vec();
        states[3][0] += 1e-9;
        let bad =
            Trajectory::from_parts(states, traj.step_seeds().to_vec(), traj.phi().clone()).unwrap();
        assert_eq!(
            rgu_backward(&p, &bad).unwrap_err(),
            Error::ReplayMismatch { step: 3 }
        );
    }

    #[test]
    fn divergence_reports_step() {
        // eta beyond 2/lambda_max is rejected by the constructor, so overflow
        // the iterate through the noise scale instead
        let p = QuadraticSpec {
            noise: f64::MAX,
            seed: 3,
            ..Default::default()
        }
        .build()
        .unwrap();
        let err = unroll(&p, &p.initial_meta(), 10, 0, false).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert!(step >= 1),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn tangent_footprint_is_independent_of_t() {
        let p = QuadraticSpec {
            m: 6,
            n: 4,
            ..Default::default()
        }
        .build()
        .unwrap();
        let dirs = sample_directions(Distribution::Rademacher, 4, 3, 0).unwrap();
        let peak = |t| {
            let meter = FloatMeter::new();
            unroll_with_tangents_metered(&p, &p.initial_meta(), t, 0, &dirs, &meter).unwrap();
            meter.peak()
        };
        assert_eq!(peak(10), peak(20));
        assert_eq!(peak(10), (3 + 1) * 6 + 3 * 4 + 4);
    }
}
