//! One-dimensional time-dependent solvers.
//!
//! Burgers and Allen-Cahn: second-order central differences on a uniform
//! grid including both Dirichlet endpoints, explicit advection or reaction
//! and implicit (backward Euler) diffusion via a tridiagonal solve.
//! KdV: periodic Fourier pseudo-spectral discretization with an
//! integrating-factor RK4 step, exact in the dispersive term, and 2/3-rule
//! dealiasing of the nonlinear term.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pde {
    /// `u_t + u u_x - nu u_xx = 0`, `u(0,x) = -sin(pi x)`, `u(t,+-1) = 0`.
    Burgers,
    /// `u_t - nu u_xx = 5 (u - u^3)`, `u(0,x) = x^2 cos(pi x)`, `u(t,+-1) = -1`.
    AllenCahn,
    /// `u_t + u u_x + nu u_xxx = 0`, `u(0,x) = cos(pi x)`, periodic.
    Kdv,
}

impl Pde {
    /// Coefficient used to generate synthetic observations.
    pub fn nu_true(self) -> f64 {
        match self {
            Pde::Burgers => 0.01 / PI,
            Pde::AllenCahn => 0.001,
            Pde::Kdv => 0.0025,
        }
    }

    /// Upper end of the `(0, hi]` interval random initial coefficients are drawn from.
    pub fn init_upper(self) -> f64 {
        match self {
            Pde::Burgers => 10.0,
            Pde::AllenCahn => 0.1,
            Pde::Kdv => 0.01,
        }
    }

    /// Default outer step size.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Pde::Burgers | Pde::AllenCahn => 1e-2,
            Pde::Kdv => 1e-3,
        }
    }

    pub fn is_periodic(self) -> bool {
        self == Pde::Kdv
    }

    pub fn initial_condition(self, x: f64) -> f64 {
        match self {
            Pde::Burgers => -(PI * x).sin(),
            Pde::AllenCahn => x * x * (PI * x).cos(),
            Pde::Kdv => (PI * x).cos(),
        }
    }

    fn boundary_value(self) -> f64 {
        match self {
            Pde::Burgers => 0.0,
            Pde::AllenCahn => -1.0,
            Pde::Kdv => 0.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pde::Burgers => "burgers",
            Pde::AllenCahn => "allen_cahn",
            Pde::Kdv => "kdv",
        }
    }
}

/// Space-time resolution: `n_x` spatial points on `[-1, 1]` and `n_t` time
/// steps on `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGrid {
    pub n_x: usize,
    pub n_t: usize,
}

impl Default for PdeGrid {
    fn default() -> Self {
        Self { n_x: 256, n_t: 512 }
    }
}

impl PdeGrid {
    pub fn validate(&self, pde: Pde) -> Result<()> {
        if self.n_x < 8 || self.n_t == 0 {
            return Err(Error::invalid(format!(
                "pde grid needs n_x >= 8 and n_t >= 1, got {}x{}",
                self.n_x, self.n_t
            )));
        }
        if pde.is_periodic() && !self.n_x.is_multiple_of(2) {
            return Err(Error::invalid("periodic grids need an even n_x"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.n_t as f64
    }

    pub fn dx(&self, pde: Pde) -> f64 {
        if pde.is_periodic() {
            2.0 / self.n_x as f64
        } else {
            2.0 / (self.n_x - 1) as f64
        }
    }

    pub fn x(&self, pde: Pde, j: usize) -> f64 {
        -1.0 + j as f64 * self.dx(pde)
    }
}

/// Solution samples `u(t_n, x_j)` for `n = 0..=n_t`, row-major in time.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeField {
    pub n_x: usize,
    pub n_t: usize,
    pub values: Vec<f64>,
}

impl PdeField {
    pub fn at(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.n_x + j]
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.n_x..(n + 1) * self.n_x]
    }
}

/// Guard against blow-up that stays finite: the solutions considered here
/// stay within a small multiple of the initial amplitude.
const AMPLITUDE_LIMIT: f64 = 1e3;

#[derive(Clone)]
pub struct Stepper {
    pde: Pde,
    grid: PdeGrid,
    spectral: Option<Spectral>,
}

#[derive(Clone)]
struct Spectral {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Wavenumbers `pi m` in FFT order.
    k: Vec<f64>,
    /// Nonlinear prefactor `-i dt k / 2`, zeroed outside the 2/3 band.
    g: Vec<Complex64>,
}

impl std::fmt::Debug for Stepper {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stepper")
            .field("pde", &self.pde)
            .field("grid", &self.grid)
            .finish()
    }
}

impl Stepper {
    pub fn new(pde: Pde, grid: PdeGrid) -> Result<Self> {
        grid.validate(pde)?;
        let spectral = pde.is_periodic().then(|| {
            let n = grid.n_x;
            let mut planner = FftPlanner::new();
            let dt = grid.dt();
            let k: Vec<f64> = (0..n)
                .map(|m| {
                    let m = if m <= n / 2 {
                        m as f64
                    } else {
                        m as f64 - n as f64
                    };
                    PI * m
                })
                .collect();
            let cutoff = PI * (n as f64 / 3.0);
            let g = k
                .iter()
                .enumerate()
                .map(|(m, &kk)| {
                    if kk.abs() >= cutoff || m == n / 2 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::new(0.0, -0.5 * dt * kk)
                    }
                })
                .collect();
            Spectral {
                forward: planner.plan_fft_forward(n),
                inverse: planner.plan_fft_inverse(n),
                k,
                g,
            }
        });
        Ok(Self {
            pde,
            grid,
            spectral,
        })
    }

    pub fn pde(&self) -> Pde {
        self.pde
    }

    pub fn grid(&self) -> PdeGrid {
        self.grid
    }

    pub fn initial_state(&self) -> Vec<f64> {
        (0..self.grid.n_x)
            .map(|j| self.pde.initial_condition(self.grid.x(self.pde, j)))
            .collect()
    }

    /// Advances `u` from step `n - 1` to step `n`.
    pub fn step(&self, u: &[f64], nu: f64, n: usize) -> Result<Vec<f64>> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::divergence(
                n,
                nu,
                format!("coefficient nu = {nu} outside (0, inf)"),
            ));
        }
        let next = match self.pde {
            Pde::Burgers | Pde::AllenCahn => self.imex_step(u, nu, n)?,
            Pde::Kdv => self.spectral_step(u, nu),
        };
        let amp = next.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if !amp.is_finite() || amp > AMPLITUDE_LIMIT {
            return Err(Error::divergence(
                n,
                amp,
                format!("{} solution blew up", self.pde.as_str()),
            ));
        }
        Ok(next)
    }

    fn imex_step(&self, u: &[f64], nu: f64, n: usize) -> Result<Vec<f64>> {
        let nx = self.grid.n_x;
        let dt = self.grid.dt();
        let dx = self.grid.dx(self.pde);
        let mut rhs = u.to_vec();
        match self.pde {
            Pde::Burgers => {
                let umax = u.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
                let courant = umax * dt / dx;
                if courant > 1.0 {
                    return Err(Error::divergence(
                        n,
                        courant,
                        "CFL condition violated (Courant number > 1)",
                    ));
                }
                for j in 1..nx - 1 {
                    rhs[j] -= dt * (u[j + 1] * u[j + 1] - u[j - 1] * u[j - 1]) / (4.0 * dx);
                }
            }
            Pde::AllenCahn => {
                for j in 1..nx - 1 {
                    rhs[j] += dt * 5.0 * (u[j] - u[j].powi(3));
                }
            }
            Pde::Kdv => unreachable!("KdV uses the spectral step"),
        }
        let bc = self.pde.boundary_value();
        let r = nu * dt / (dx * dx);
        // interior system: -r u_{j-1} + (1 + 2r) u_j - r u_{j+1} = rhs_j
        let m = nx - 2;
        let mut d: Vec<f64> = rhs[1..nx - 1].to_vec();
        d[0] += r * bc;
        d[m - 1] += r * bc;
        let sol = solve_toeplitz_tridiagonal(-r, 1.0 + 2.0 * r, -r, &d);
        let mut next = Vec::with_capacity(nx);
        next.push(bc);
        next.extend(sol);
        next.push(bc);
        Ok(next)
    }

    fn spectral_step(&self, u: &[f64], nu: f64) -> Vec<f64> {
        let sp = self
            .spectral
            .as_ref()
            .expect("spectral plan for periodic problem");
        let n = u.len();
        let dt = self.grid.dt();
        // linear part: u_t = -nu u_xxx  =>  v_t = i nu k^3 v
        let e: Vec<Complex64> =
            sp.k.iter()
                .map(|&k| Complex64::from_polar(1.0, 0.5 * dt * nu * k.powi(3)))
                .collect();
        let e2: Vec<Complex64> = e.iter().map(|z| z * z).collect();

        let nonlinear = |w: &[Complex64]| -> Vec<Complex64> {
            let mut buf = w.to_vec();
            sp.inverse.process(&mut buf);
            let scale = 1.0 / n as f64;
            for z in buf.iter_mut() {
                let re = z.re * scale;
                *z = Complex64::new(re * re, 0.0);
            }
            sp.forward.process(&mut buf);
            buf.iter().zip(&sp.g).map(|(z, g)| z * g).collect()
        };

        let mut v: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        sp.forward.process(&mut v);
        let a = nonlinear(&v);
        let arg: Vec<Complex64> = (0..n).map(|i| e[i] * (v[i] + a[i] * 0.5)).collect();
        let b = nonlinear(&arg);
        let arg: Vec<Complex64> = (0..n).map(|i| e[i] * v[i] + b[i] * 0.5).collect();
        let c = nonlinear(&arg);
        let arg: Vec<Complex64> = (0..n).map(|i| e2[i] * v[i] + e[i] * c[i]).collect();
        let d = nonlinear(&arg);
        let mut next: Vec<Complex64> = (0..n)
            .map(|i| e2[i] * v[i] + (e2[i] * a[i] + e[i] * (b[i] + c[i]) * 2.0 + d[i]) / 6.0)
            .collect();
        sp.inverse.process(&mut next);
        next.iter().map(|z| z.re / n as f64).collect()
    }
}

/// Thomas algorithm for a constant-coefficient tridiagonal system
/// `lower x_{i-1} + diag x_i + upper x_{i+1} = d_i`.
pub fn solve_toeplitz_tridiagonal(lower: f64, diag: f64, upper: f64, d: &[f64]) -> Vec<f64> {
    let m = d.len();
    let mut c_prime = vec![0.0; m];
    let mut x = vec![0.0; m];
    if m == 0 {
        return x;
    }
    c_prime[0] = upper / diag;
    x[0] = d[0] / diag;
    for i in 1..m {
        let denom = diag - lower * c_prime[i - 1];
        c_prime[i] = upper / denom;
        x[i] = (d[i] - lower * x[i - 1]) / denom;
    }
    for i in (0..m - 1).rev() {
        x[i] -= c_prime[i] * x[i + 1];
    }
    x
}

/// Full space-time solution at coefficient `nu`.
pub fn pde_solve(pde: Pde, nu: f64, grid: PdeGrid) -> Result<PdeField> {
    let stepper = Stepper::new(pde, grid)?;
    let mut u = stepper.initial_state();
    let mut values = Vec::with_capacity((grid.n_t + 1) * grid.n_x);
    values.extend_from_slice(&u);
    for n in 1..=grid.n_t {
        u = stepper.step(&u, nu, n)?;
        values.extend_from_slice(&u);
    }
    Ok(PdeField {
        n_x: grid.n_x,
        n_t: grid.n_t,
        values,
    })
}
