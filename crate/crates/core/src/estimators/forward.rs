use std::time::Instant;

use rayon::prelude::*;

use super::{EstimatorKind, GradientEstimate};
use crate::error::{check_len, Error, Result};
use crate::footprint::FloatMeter;
use crate::math::{DirectionBatch, MetaVector};
use crate::problem::BilevelProblem;
use crate::unroll::{first_error, step_seed, unroll, unroll_with_tangents_metered};

/// `(1/b) sum_i w_i v_i`, accumulated in index order.
pub fn combine(dirs: &DirectionBatch, weights: &[f64]) -> MetaVector {
    let mut g = MetaVector::zeros(dirs.dim());
    for (v, &w) in dirs.directions().iter().zip(weights) {
        g.axpy(w, v);
    }
    g.scale(1.0 / dirs.len() as f64);
    g
}

/// Directional derivatives `w_i = <d_T, Z_T v_i> + <c_T, v_i>` for every direction.
pub fn fg2u_directional<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
) -> Result<Vec<f64>> {
    fg2u_directional_metered(p, phi, t_steps, run_seed, dirs, &FloatMeter::new())
}

fn fg2u_directional_metered<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    meter: &FloatMeter,
) -> Result<Vec<f64>> {
    if !p.is_differentiable() {
        return Err(Error::invalid(format!(
            "problem '{}' is black-box; use the zeroth-order estimator fg2u_zo",
            p.name()
        )));
    }
    let bundle = unroll_with_tangents_metered(p, phi, t_steps, run_seed, dirs, meter)?;
    let d = p.partial_f_theta(&bundle.theta, phi)?;
    let c = p.partial_f_phi(&bundle.theta, phi)?;
    Ok(bundle
        .tangents
        .iter()
        .zip(dirs.directions())
        .map(|(y, v)| d.dot(y) + c.dot(v))
        .collect())
}

pub fn fg2u_estimate<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
) -> Result<GradientEstimate> {
    fg2u_estimate_metered(p, phi, t_steps, run_seed, dirs, &FloatMeter::new())
}

pub fn fg2u_estimate_metered<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    meter: &FloatMeter,
) -> Result<GradientEstimate> {
    let start = Instant::now();
    let w = fg2u_directional_metered(p, phi, t_steps, run_seed, dirs, meter)?;
    let grad = combine(dirs, &w);
    Ok(GradientEstimate::new(
        grad,
        EstimatorKind::Fg2u,
        dirs.len(),
        t_steps,
        None,
        start,
        dirs.base_seed(),
    ))
}

/// Forward-difference zeroth-order estimator
/// `(1/b) sum_i (h(phi + mu v_i) - h(phi)) / mu * v_i`.
///
/// The base value `h(phi)` is shared by all directions, and every run uses
/// `run_seed` so that perturbed and base runs see identical inner batches.
pub fn fg2u_zo_estimate<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    mu: f64,
) -> Result<GradientEstimate> {
    let start = Instant::now();
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid(format!("mu must be positive, got {mu}")));
    }
    check_len("zo phi", p.meta_dim(), phi.len())?;
    if dirs.is_empty() {
        return Err(Error::invalid("direction batch is empty"));
    }
    check_len("direction length", p.meta_dim(), dirs.dim())?;
    let base = p.black_box_h(phi, t_steps, run_seed)?;
    let weights = first_error(
        dirs.directions()
            .par_iter()
            .map(|v| {
                let mut probe = phi.clone();
                probe.axpy(mu, v);
                let h = p.black_box_h(&probe, t_steps, run_seed)?;
                if !h.is_finite() {
                    return Err(Error::divergence(
                        t_steps,
                        h.abs(),
                        "non-finite perturbed objective",
                    ));
                }
                Ok((h - base) / mu)
            })
            .collect(),
    )?;
    let grad = combine(dirs, &weights);
    Ok(GradientEstimate::new(
        grad,
        EstimatorKind::Fg2uZo,
        dirs.len(),
        t_steps,
        Some(mu),
        start,
        dirs.base_seed(),
    ))
}

/// Directional derivatives of the truncated hypergradient: tangents start
/// from zero after step `T - s`, so only the last `s` steps contribute and
/// `w_i = <trgu_s, v_i>`.
pub fn truncated_directional<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    s: usize,
) -> Result<Vec<f64>> {
    if s > t_steps {
        return Err(Error::invalid(format!(
            "truncation s = {s} exceeds T = {t_steps}"
        )));
    }
    let k = t_steps - s;
    let (theta_k, _) = unroll(p, phi, k, run_seed, false)?;
    let mut theta = theta_k;
    let mut tangents = vec![crate::math::InnerVector::zeros(p.inner_dim()); dirs.len()];
    for t in k + 1..=t_steps {
        let seed = step_seed(run_seed, t);
        let updated = first_error(
            tangents
                .par_iter()
                .zip(dirs.directions().par_iter())
                .map(|(y, v)| p.transition_jvp(&theta, phi, t, seed, y, v))
                .collect(),
        )?;
        tangents = updated;
        theta = p.transition(&theta, phi, t, seed)?;
        if !theta.is_finite() {
            return Err(Error::divergence(
                t,
                theta.norm(),
                "non-finite inner iterate",
            ));
        }
    }
    let d = p.partial_f_theta(&theta, phi)?;
    let c = p.partial_f_phi(&theta, phi)?;
    Ok(tangents
        .iter()
        .zip(dirs.directions())
        .map(|(y, v)| d.dot(y) + c.dot(v))
        .collect())
}

/// Per-direction variance-reduced forward gradients
/// `g_i(phi) - [g~_i(phi_ref) - (1/b) sum_j g~_j(phi_ref)]`.
///
/// `g~` is the forward gradient at `phi_ref` along the same directions and
/// inner seeds, either fully unrolled or (with `truncated_s = Some(s)`)
/// keeping only the last `s` inner steps.
pub fn vr_components<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    phi_ref: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    truncated_s: Option<usize>,
) -> Result<Vec<MetaVector>> {
    check_len("vr phi_ref", p.meta_dim(), phi_ref.len())?;
    let w = fg2u_directional(p, phi, t_steps, run_seed, dirs)?;
    let w_ref = match truncated_s {
        None => fg2u_directional(p, phi_ref, t_steps, run_seed, dirs)?,
        Some(s) => truncated_directional(p, phi_ref, t_steps, run_seed, dirs, s)?,
    };
    let baseline_mean = combine(dirs, &w_ref);
    Ok(dirs
        .directions()
        .iter()
        .zip(w.iter().zip(&w_ref))
        .map(|(v, (&wi, &wr))| {
            let mut g = v.scaled(wi - wr);
            g.axpy(1.0, &baseline_mean);
            g
        })
        .collect())
}

pub fn vr_estimate<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    phi_ref: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    dirs: &DirectionBatch,
    truncated_s: Option<usize>,
) -> Result<GradientEstimate> {
    let start = Instant::now();
    let parts = vr_components(p, phi, phi_ref, t_steps, run_seed, dirs, truncated_s)?;
    let mut grad = MetaVector::zeros(p.meta_dim());
    for g in &parts {
        grad.axpy(1.0, g);
    }
    grad.scale(1.0 / parts.len() as f64);
    Ok(GradientEstimate::new(
        grad,
        EstimatorKind::Vr,
        dirs.len(),
        t_steps,
        None,
        start,
        dirs.base_seed(),
    ))
}
