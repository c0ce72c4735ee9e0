//! The bi-level problem contract and concrete instances.
//!
//! A problem describes `h(phi) = f(theta_T, phi)` with
//! `theta_0 = init(phi)` and `theta_t = transition(theta_{t-1}, phi, t)`.
//! Writing `A_t = d transition / d theta` and `B_t = d transition / d phi`,
//! the derivative oracles expose `A_t y + B_t v` (forward) and
//! `(d A_t, d B_t)` (reverse) without ever forming the Jacobians.

mod distillation;
pub mod pde;
mod quadratic;

pub use distillation::{DistillationProblem, DistillationSpec, InnerModel, DISTILLATION_FD_EPS};
pub use pde::{Pde, PdeDiscoveryProblem, PdeField, PdeGrid, PdeSpec};
pub use quadratic::{quadratic_true_hypergradient, QuadraticBilevel, QuadraticSpec};

use crate::error::{Error, Result};
use crate::math::{InnerVector, MetaVector};

/// Step index `t` is 1-based: `transition(.., t, ..)` produces `theta_t`.
/// Every inner step receives its own seed; a transition is a pure function
/// of its arguments so black-box perturbation runs see identical batches.
pub trait BilevelProblem: Sync {
    fn name(&self) -> &str;

    fn meta_dim(&self) -> usize;

    fn inner_dim(&self) -> usize;

    /// Starting point for meta optimization.
    fn initial_meta(&self) -> MetaVector;

    fn meta_loss(&self, theta: &InnerVector, phi: &MetaVector) -> Result<f64>;

    fn inner_init(&self, phi: &MetaVector) -> Result<InnerVector>;

    fn transition(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        t: usize,
        step_seed: u64,
    ) -> Result<InnerVector>;

    /// Whether the derivative oracles below are implemented.
    fn is_differentiable(&self) -> bool {
        true
    }

    fn partial_f_theta(&self, _theta: &InnerVector, _phi: &MetaVector) -> Result<InnerVector> {
        Err(Error::NotDifferentiable("partial_f_theta"))
    }

    fn partial_f_phi(&self, _theta: &InnerVector, _phi: &MetaVector) -> Result<MetaVector> {
        Err(Error::NotDifferentiable("partial_f_phi"))
    }

    /// `Z_0 v`
    fn init_jvp(&self, _phi: &MetaVector, _v: &MetaVector) -> Result<InnerVector> {
        Err(Error::NotDifferentiable("init_jvp"))
    }

    /// `d Z_0`
    fn init_vjp(&self, _phi: &MetaVector, _d: &InnerVector) -> Result<MetaVector> {
        Err(Error::NotDifferentiable("init_vjp"))
    }

    /// `A_t y + B_t v`
    fn transition_jvp(
        &self,
        _theta: &InnerVector,
        _phi: &MetaVector,
        _t: usize,
        _step_seed: u64,
        _y: &InnerVector,
        _v: &MetaVector,
    ) -> Result<InnerVector> {
        Err(Error::NotDifferentiable("transition_jvp"))
    }

    /// `(d A_t, d B_t)`
    fn transition_vjp(
        &self,
        _theta: &InnerVector,
        _phi: &MetaVector,
        _t: usize,
        _step_seed: u64,
        _d: &InnerVector,
    ) -> Result<(InnerVector, MetaVector)> {
        Err(Error::NotDifferentiable("transition_vjp"))
    }

    /// Inner Hessian `d^2 g / d theta^2` applied to `u`.
    fn g_hvp(
        &self,
        _theta: &InnerVector,
        _phi: &MetaVector,
        _u: &InnerVector,
    ) -> Result<InnerVector> {
        Err(Error::NotDifferentiable("g_hvp"))
    }

    /// `r^T (d^2 g / d theta d phi)`
    fn g_cross_vjp(
        &self,
        _theta: &InnerVector,
        _phi: &MetaVector,
        _r: &InnerVector,
    ) -> Result<MetaVector> {
        Err(Error::NotDifferentiable("g_cross_vjp"))
    }

    /// `h(phi)` evaluated end to end with the seeded step sequence of `run_seed`.
    fn black_box_h(&self, phi: &MetaVector, t_steps: usize, run_seed: u64) -> Result<f64> {
        let (theta, _) = crate::unroll::unroll(self, phi, t_steps, run_seed, false)?;
        self.meta_loss(&theta, phi)
    }
}

#[cfg(test)]
pub(crate) mod contract {
    //! Shared checks that every differentiable problem must pass.

    use super::*;
    use crate::math::{norm, Rng};

    fn random_inner(m: usize, rng: &mut Rng) -> InnerVector {
        rng.normal_vec(m).into()
    }

    fn random_meta(n: usize, rng: &mut Rng) -> MetaVector {
        rng.normal_vec(n).into()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / (1.0 + a.abs().max(b.abs()))
    }

    pub fn adjoint_consistency<P: BilevelProblem>(
        p: &P,
        theta: &InnerVector,
        phi: &MetaVector,
        seed: u64,
    ) {
        let mut rng = Rng::new(seed);
        for t in 1..4 {
            let d = random_inner(p.inner_dim(), &mut rng);
            let y = random_inner(p.inner_dim(), &mut rng);
            let v = random_meta(p.meta_dim(), &mut rng);
            let jvp = p.transition_jvp(theta, phi, t, seed, &y, &v).unwrap();
            let (da, db) = p.transition_vjp(theta, phi, t, seed, &d).unwrap();
            let lhs = d.dot(&jvp);
            let rhs = da.dot(&y) + db.dot(&v);
            assert!(rel(lhs, rhs) < 1e-10, "adjoint mismatch: {lhs} vs {rhs}");

            let z0v = p.init_jvp(phi, &v).unwrap();
            let dz0 = p.init_vjp(phi, &d).unwrap();
            assert!(rel(d.dot(&z0v), dz0.dot(&v)) < 1e-10);
        }
    }

    pub fn jvp_linearity<P: BilevelProblem>(
        p: &P,
        theta: &InnerVector,
        phi: &MetaVector,
        seed: u64,
    ) {
        let mut rng = Rng::new(seed);
        let (m, n) = (p.inner_dim(), p.meta_dim());
        let (y1, y2) = (random_inner(m, &mut rng), random_inner(m, &mut rng));
        let (v1, v2) = (random_meta(n, &mut rng), random_meta(n, &mut rng));
        let a = 0.7;
        let mut y = y2.clone();
        y.axpy(a, &y1);
        let mut v = v2.clone();
        v.axpy(a, &v1);
        let combined = p.transition_jvp(theta, phi, 1, seed, &y, &v).unwrap();
        let mut expect = p.transition_jvp(theta, phi, 1, seed, &y2, &v2).unwrap();
        expect.axpy(a, &p.transition_jvp(theta, phi, 1, seed, &y1, &v1).unwrap());
        let diff: Vec<f64> = combined
            .iter()
            .zip(expect.iter())
            .map(|(x, y)| x - y)
            .collect();
        assert!(norm(&diff) <= 1e-10 * (1.0 + norm(&expect)));
    }

    pub fn jvp_matches_fd<P: BilevelProblem>(
        p: &P,
        theta: &InnerVector,
        phi: &MetaVector,
        seed: u64,
    ) {
        let mut rng = Rng::new(seed);
        let y = random_inner(p.inner_dim(), &mut rng);
        let v = random_meta(p.meta_dim(), &mut rng);
        let eps = 1e-6;
        let shift = |s: f64| {
            let mut th = theta.clone();
            th.axpy(s, &y);
            let mut ph = phi.clone();
            ph.axpy(s, &v);
            p.transition(&th, &ph, 2, seed).unwrap()
        };
        let (plus, minus) = (shift(eps), shift(-eps));
        let fd: Vec<f64> = plus
            .iter()
            .zip(minus.iter())
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect();
        let jvp = p.transition_jvp(theta, phi, 2, seed, &y, &v).unwrap();
        let diff: Vec<f64> = fd.iter().zip(jvp.iter()).map(|(a, b)| a - b).collect();
        assert!(
            norm(&diff) <= 1e-5 * (1.0 + jvp.norm()),
            "jvp vs fd: |diff| = {}",
            norm(&diff)
        );
    }

    pub fn hvp_symmetry<P: BilevelProblem>(
        p: &P,
        theta: &InnerVector,
        phi: &MetaVector,
        seed: u64,
    ) {
        let mut rng = Rng::new(seed);
        let u1 = random_inner(p.inner_dim(), &mut rng);
        let u2 = random_inner(p.inner_dim(), &mut rng);
        let a = u1.dot(&p.g_hvp(theta, phi, &u2).unwrap());
        let b = u2.dot(&p.g_hvp(theta, phi, &u1).unwrap());
        assert!(
            (a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-300),
            "{a} vs {b}"
        );
    }

    pub fn replay_is_bit_exact<P: BilevelProblem>(
        p: &P,
        theta: &InnerVector,
        phi: &MetaVector,
        seed: u64,
    ) {
        let a = p.transition(theta, phi, 3, seed).unwrap();
        let b = p.transition(theta, phi, 3, seed).unwrap();
        assert_eq!(a, b);
    }

    pub fn run_all<P: BilevelProblem>(p: &P, theta: &InnerVector, phi: &MetaVector, seed: u64) {
        adjoint_consistency(p, theta, phi, seed);
        jvp_linearity(p, theta, phi, seed ^ 1);
        jvp_matches_fd(p, theta, phi, seed ^ 2);
        hvp_symmetry(p, theta, phi, seed ^ 3);
        replay_is_bit_exact(p, theta, phi, seed ^ 4);
    }
}
