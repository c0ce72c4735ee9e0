use std::time::Instant;

use super::{EstimatorKind, GradientEstimate};
use crate::error::{check_len, Error, Result};
use crate::math::{InnerVector, MetaVector};
use crate::problem::BilevelProblem;

/// Growth of `|r_k| / |r_0|` beyond which the Neumann iteration is declared divergent.
pub const NEUMANN_GROWTH_LIMIT: f64 = 1e6;

/// Truncated Neumann series `alpha sum_{k=0}^{K} r_k` with
/// `r_0 = d`, `r_{k+1} = r_k - alpha H r_k`, approximating `d H^{-1}`.
pub fn neumann_ihvp<P: BilevelProblem + ?Sized>(
    p: &P,
    theta: &InnerVector,
    phi: &MetaVector,
    d: &InnerVector,
    alpha: f64,
    k_terms: usize,
) -> Result<InnerVector> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "neumann alpha must be positive, got {alpha}"
        )));
    }
    check_len("neumann d", p.inner_dim(), d.len())?;
    let r0 = d.norm();
    let mut r = d.clone();
    let mut acc = d.clone();
    for k in 1..=k_terms {
        let hr = p.g_hvp(theta, phi, &r)?;
        r.axpy(-alpha, &hr);
        let growth = r.norm() / r0.max(f64::MIN_POSITIVE);
        if growth.is_nan() || growth > NEUMANN_GROWTH_LIMIT {
            return Err(Error::NeumannDivergence { term: k, growth });
        }
        acc.axpy(1.0, &r);
    }
    acc.scale(alpha);
    Ok(acc)
}

/// Implicit-function hypergradient `c - (d H^{-1}) Y` with the inverse
/// Hessian product replaced by a `K`-term Neumann series.
pub fn neumann_if_estimate<P: BilevelProblem + ?Sized>(
    p: &P,
    theta_t: &InnerVector,
    phi: &MetaVector,
    alpha: f64,
    k_terms: usize,
) -> Result<GradientEstimate> {
    let start = Instant::now();
    let d = p.partial_f_theta(theta_t, phi)?;
    let ihvp = neumann_ihvp(p, theta_t, phi, &d, alpha, k_terms)?;
    let mut grad = p.partial_f_phi(theta_t, phi)?;
    grad.axpy(-1.0, &p.g_cross_vjp(theta_t, phi, &ihvp)?);
    Ok(GradientEstimate::new(
        grad,
        EstimatorKind::NeumannIf,
        0,
        0,
        None,
        start,
        0,
    ))
}

/// Implicit-function hypergradient with the inner Hessian replaced by
/// `alpha^{-1} I`: `c - alpha d Y`.
pub fn hessian_free_estimate<P: BilevelProblem + ?Sized>(
    p: &P,
    theta_t: &InnerVector,
    phi: &MetaVector,
    alpha: f64,
) -> Result<GradientEstimate> {
    let start = Instant::now();
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "hessian-free alpha must be positive, got {alpha}"
        )));
    }
    let d = p.partial_f_theta(theta_t, phi)?;
    let mut grad = p.partial_f_phi(theta_t, phi)?;
    grad.axpy(-alpha, &p.g_cross_vjp(theta_t, phi, &d)?);
    Ok(GradientEstimate::new(
        grad,
        EstimatorKind::HessianFree,
        0,
        0,
        None,
        start,
        0,
    ))
}
