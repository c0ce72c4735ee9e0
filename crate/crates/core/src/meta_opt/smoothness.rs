use crate::error::{Error, Result};
use crate::math::{derive_seed, norm, sample_direction, Distribution, MetaVector};
use crate::problem::BilevelProblem;
use crate::unroll::rgu;

/// Numerical smoothness constant of `h`: the largest curvature found by power
/// iteration on central differences of the exact hypergradient, taken over
/// `n_points` points sampled within `radius` of `phi` (the first point is `phi`).
#[allow(clippy::too_many_arguments)]
pub fn estimate_smoothness<P: BilevelProblem + ?Sized>(
    p: &P,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
    n_points: usize,
    radius: f64,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    if n_points == 0 || iterations == 0 {
        return Err(Error::invalid(
            "smoothness estimate needs n_points >= 1 and iterations >= 1",
        ));
    }
    let n = p.meta_dim();
    let eps = 1e-5 * (1.0 + phi.norm());
    let mut best: f64 = 0.0;
    for point in 0..n_points as u64 {
        let point_seed = derive_seed(seed, point);
        let center = if point == 0 {
            phi.clone()
        } else {
            let offset = unit(sample_direction(Distribution::Gaussian, n, point_seed, 0));
            MetaVector::from(
                phi.iter()
                    .zip(offset.iter())
                    .map(|(a, o)| a + radius * o)
                    .collect::<Vec<_>>(),
            )
        };
        let mut u = unit(sample_direction(Distribution::Gaussian, n, point_seed, 1));
        let mut curvature = 0.0;
        for _ in 0..iterations {
            let shifted = |sign: f64| {
                MetaVector::from(
                    center
                        .iter()
                        .zip(u.iter())
                        .map(|(c, d)| c + sign * eps * d)
                        .collect::<Vec<_>>(),
                )
            };
            let gp = rgu(p, &shifted(1.0), t_steps, run_seed)?;
            let gm = rgu(p, &shifted(-1.0), t_steps, run_seed)?;
            let hu: Vec<f64> = gp
                .iter()
                .zip(gm.iter())
                .map(|(a, b)| (a - b) / (2.0 * eps))
                .collect();
            curvature = norm(&hu);
            if curvature == 0.0 {
                break;
            }
            u = MetaVector::from(hu.iter().map(|x| x / curvature).collect::<Vec<_>>());
        }
        best = best.max(curvature);
    }
    Ok(best)
}

fn unit(v: MetaVector) -> MetaVector {
    let n = v.norm();
    v.scaled(1.0 / n)
}
