use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::fg2u_estimate;
use crate::error::{Error, Result};
use crate::math::{derive_seed, sample_directions, Distribution, MetaVector};
use crate::problem::BilevelProblem;
use crate::unroll::first_error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub n_samples: usize,
    pub empirical_mse: f64,
    pub true_grad_norm_sq: f64,
    /// `(N - 1) / b`
    pub predicted_ratio: f64,
    pub empirical_ratio: f64,
    /// Standard error of `empirical_ratio` across samples.
    pub ratio_std_error: f64,
}

/// Monte Carlo estimate of `E |g_hat - grad h|^2 / |grad h|^2` for the
/// Rademacher forward-gradient estimator with `b` directions.
///
/// `truth` is the exact hypergradient for `(phi, T, run_seed)`; sample `s`
/// draws its directions from `derive_seed(seed, s)`.
#[allow(clippy::too_many_arguments)]
pub fn validate_variance<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    truth: &MetaVector,
    b: usize,
    n_samples: usize,
    seed: u64,
) -> Result<VarianceReport> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be >= 1"));
    }
    let n = p.meta_dim();
    let errors = first_error(
        (0..n_samples as u64)
            .into_par_iter()
            .map(|s| {
                let dirs = sample_directions(Distribution::Rademacher, n, b, derive_seed(seed, s))?;
                let est = fg2u_estimate(p, phi, t_steps, run_seed, &dirs)?;
                Ok(est
                    .grad
                    .iter()
                    .zip(truth.iter())
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>())
            })
            .collect(),
    )?;
    let norm_sq = truth.dot(truth);
    let count = n_samples as f64;
    let mse = errors.iter().sum::<f64>() / count;
    let var = if n_samples > 1 {
        errors.iter().map(|e| (e - mse).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    let (ratio, ratio_se) = if norm_sq > 0.0 {
        (mse / norm_sq, (var / count).sqrt() / norm_sq)
    } else {
        (0.0, 0.0)
    };
    Ok(VarianceReport {
        n_samples,
        empirical_mse: mse,
        true_grad_norm_sq: norm_sq,
        predicted_ratio: (n as f64 - 1.0) / b as f64,
        empirical_ratio: ratio,
        ratio_std_error: ratio_se,
    })
}
