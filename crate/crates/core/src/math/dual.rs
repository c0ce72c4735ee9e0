//! Forward-mode dual numbers.
//!
//! A [`Dual`] carries a value and one directional derivative. Code written
//! against [`Scalar`] runs unchanged on `f64` or `Dual`; running a
//! hand-written reverse-mode gradient on `Dual` inputs yields
//! Hessian-vector products (forward-over-reverse).

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    fn constant(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::constant(0.0)
    }
}

impl Scalar for f64 {
    fn constant(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }

    /// Lifts `values` with tangent `tangent` (same length).
    pub fn seed(values: &[f64], tangent: &[f64]) -> Vec<Dual> {
        debug_assert_eq!(values.len(), tangent.len());
        values
            .iter()
            .zip(tangent)
            .map(|(&re, &eps)| Dual { re, eps })
            .collect()
    }

    pub fn split(xs: &[Dual]) -> (Vec<f64>, Vec<f64>) {
        xs.iter().map(|d| (d.re, d.eps)).unzip()
    }
}

impl Scalar for Dual {
    fn constant(x: f64) -> Self {
        Dual { re: x, eps: 0.0 }
    }
    fn value(self) -> f64 {
        self.re
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.eps)
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        Dual::new(
            self.re * inv,
            (self.eps * o.re - self.re * o.eps) * inv * inv,
        )
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual::new(self.re + o, self.eps)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        Dual::new(self.re * o, self.eps * o)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f<S: Scalar>(x: S) -> S {
        (x * x + 1.0).ln() * x.tanh() + x.exp() / (x + 3.0)
    }

    #[test]
    fn derivative_matches_central_difference() {
        for &x in &[-1.3, 0.0, 0.4, 2.1] {
            let d = f(Dual::new(x, 1.0));
            let h = 1e-6;
            let fd = (f(x + h) - f(x - h)) / (2.0 * h);
            assert!((d.re - f(x)).abs() < 1e-15);
            assert!((d.eps - fd).abs() < 1e-8, "x={x}: {} vs {fd}", d.eps);
        }
    }
}
