//! Deliberately broken problems used as negative controls.

use blo_core::{BilevelProblem, InnerVector, MetaVector, Result};

/// Wraps a problem and perturbs its forward tangent map by a relative `error`,
/// leaving every other oracle intact.
pub struct CorruptedJvp<P> {
    inner: P,
    error: f64,
}

impl<P: BilevelProblem> CorruptedJvp<P> {
    pub fn new(inner: P, error: f64) -> Self {
        Self { inner, error }
    }
}

impl<P: BilevelProblem> BilevelProblem for CorruptedJvp<P> {
    fn name(&self) -> &str {
        "corrupted"
    }

    fn meta_dim(&self) -> usize {
        self.inner.meta_dim()
    }

    fn inner_dim(&self) -> usize {
        self.inner.inner_dim()
    }

    fn initial_meta(&self) -> MetaVector {
        self.inner.initial_meta()
    }

    fn meta_loss(&self, theta: &InnerVector, phi: &MetaVector) -> Result<f64> {
        self.inner.meta_loss(theta, phi)
    }

    fn inner_init(&self, phi: &MetaVector) -> Result<InnerVector> {
        self.inner.inner_init(phi)
    }

    fn transition(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        t: usize,
        step_seed: u64,
    ) -> Result<InnerVector> {
        self.inner.transition(theta, phi, t, step_seed)
    }

    fn is_differentiable(&self) -> bool {
        self.inner.is_differentiable()
    }

    fn partial_f_theta(&self, theta: &InnerVector, phi: &MetaVector) -> Result<InnerVector> {
        self.inner.partial_f_theta(theta, phi)
    }

    fn partial_f_phi(&self, theta: &InnerVector, phi: &MetaVector) -> Result<MetaVector> {
        self.inner.partial_f_phi(theta, phi)
    }

    fn init_jvp(&self, phi: &MetaVector, v: &MetaVector) -> Result<InnerVector> {
        self.inner.init_jvp(phi, v)
    }

    fn init_vjp(&self, phi: &MetaVector, d: &InnerVector) -> Result<MetaVector> {
        self.inner.init_vjp(phi, d)
    }

    fn transition_jvp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        t: usize,
        step_seed: u64,
        y: &InnerVector,
        v: &MetaVector,
    ) -> Result<InnerVector> {
        Ok(self
            .inner
            .transition_jvp(theta, phi, t, step_seed, y, v)?
            .scaled(1.0 + self.error))
    }

    fn transition_vjp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        t: usize,
        step_seed: u64,
        d: &InnerVector,
    ) -> Result<(InnerVector, MetaVector)> {
        self.inner.transition_vjp(theta, phi, t, step_seed, d)
    }

    fn g_hvp(&self, theta: &InnerVector, phi: &MetaVector, u: &InnerVector) -> Result<InnerVector> {
        self.inner.g_hvp(theta, phi, u)
    }

    fn g_cross_vjp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        r: &InnerVector,
    ) -> Result<MetaVector> {
        self.inner.g_cross_vjp(theta, phi, r)
    }
}
