use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

macro_rules! dense_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Default)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Wraps `values`, rejecting non-finite entries.
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if let Some(i) = values.iter().position(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!(
                        concat!(stringify!($name), " entry {} is not finite"),
                        i
                    )));
                }
                Ok(Self(values))
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|x| x.is_finite())
            }

            pub fn norm(&self) -> f64 {
                norm(&self.0)
            }

            pub fn dot(&self, other: &[f64]) -> f64 {
                dot(&self.0, other)
            }

            /// `self += alpha * x`
            pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
                axpy(&mut self.0, alpha, x);
            }

            pub fn scale(&mut self, alpha: f64) {
                self.0.iter_mut().for_each(|v| *v *= alpha);
            }

            pub fn scaled(&self, alpha: f64) -> Self {
                Self(self.0.iter().map(|v| v * alpha).collect())
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl Deref for $name {
            type Target = [f64];
            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }
    };
}

dense_vector!(
    /// Meta parameters phi (length N), and gradients over them.
    MetaVector
);

dense_vector!(
    /// Inner parameters theta (length M), and tangents `Z_t v` living in the same space.
    InnerVector
);

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// `max_i |a_i - b_i| / max(|a|_inf, |b|_inf)`, zero when both vectors vanish.
pub fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = max_abs(a).max(max_abs(b));
    let diff = max_abs(&sub(a, b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// `|a - b| / max(|b|, tiny)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(b).max(f64::MIN_POSITIVE)
}
