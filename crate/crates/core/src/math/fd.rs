use super::vector::MetaVector;
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-6;

/// Central-difference gradient of `h` at `phi`.
///
/// `h` may itself fail (e.g. a diverging unroll); the error is propagated.
pub fn fd_gradient<F>(h: F, phi: &MetaVector, eps: f64) -> Result<MetaVector>
where
    F: Fn(&MetaVector) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "fd eps must be positive, got {eps}"
        )));
    }
    let mut grad = MetaVector::zeros(phi.len());
    let mut probe = phi.clone();
    for i in 0..phi.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = h(&probe)?;
        probe[i] = orig - eps;
        let minus = h(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::divergence(
                i,
                f64::NAN,
                format!("non-finite objective while differencing coordinate {i}"),
            ));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = fd_gradient(|_| Ok(3.5), &MetaVector::from(vec![1.0, -2.0, 0.5]), 1e-6).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_squared_norm() {
        let h = |p: &MetaVector| Ok(0.5 * p.iter().map(|x| x * x).sum::<f64>());
        let g = fd_gradient(h, &MetaVector::from(vec![1.0, 2.0]), 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn nonfinite_evaluation_is_divergence() {
        let h = |p: &MetaVector| Ok(if p[0] > 0.0 { f64::NAN } else { 0.0 });
        let err = fd_gradient(h, &MetaVector::from(vec![0.0]), 1e-3).unwrap_err();
        assert!(err.is_divergence());
    }

    #[test]
    fn bad_eps_rejected() {
        assert!(fd_gradient(|_| Ok(0.0), &MetaVector::zeros(1), 0.0).is_err());
    }
}
