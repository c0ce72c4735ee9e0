//! Vectors, dense matrices, random streams and the finite-difference oracle.

pub mod directions;
pub mod dual;
pub mod fd;
pub mod rng;
pub mod vector;

pub use directions::{sample_direction, sample_directions, DirectionBatch, Distribution};
pub use dual::{Dual, Scalar};
pub use fd::{fd_gradient, DEFAULT_FD_EPS};
pub use rng::{derive_seed, Rng};
pub use vector::{axpy, dot, max_abs, max_rel_diff, norm, rel_err, sub, InnerVector, MetaVector};

/// Dense matrices are only used by oracles and small problem instances.
pub type Matrix = nalgebra::DMatrix<f64>;

pub fn mat_vec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for j in 0..a.ncols() {
        let xj = x[j];
        if xj == 0.0 {
            continue;
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += a[(i, j)] * xj;
        }
    }
    out
}

/// `a^T x`
pub fn mat_t_vec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.nrows(), x.len());
    (0..a.ncols())
        .map(|j| (0..a.nrows()).map(|i| a[(i, j)] * x[i]).sum())
        .collect()
}

/// Random symmetric positive-definite matrix with eigenvalues spread
/// log-uniformly over `[eig_min, eig_max]` (endpoints included when `m >= 2`).
pub fn random_spd(m: usize, eig_min: f64, eig_max: f64, rng: &mut Rng) -> Matrix {
    let q = random_orthogonal(m, rng);
    let eigs: Vec<f64> = (0..m)
        .map(|i| {
            if m == 1 {
                eig_min
            } else {
                let t = i as f64 / (m - 1) as f64;
                eig_min * (eig_max / eig_min).powf(t)
            }
        })
        .collect();
    let d = Matrix::from_diagonal(&nalgebra::DVector::from_vec(eigs));
    let a = &q * d * q.transpose();
    // exact symmetry
    (&a + a.transpose()) * 0.5
}

pub fn random_orthogonal(m: usize, rng: &mut Rng) -> Matrix {
    let g = Matrix::from_fn(m, m, |_, _| rng.normal());
    g.qr().q()
}

pub fn sym_eigenvalues(a: &Matrix) -> Vec<f64> {
    let mut e: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(|x, y| x.partial_cmp(y).unwrap());
    e
}
