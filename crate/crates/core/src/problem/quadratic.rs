use serde::{Deserialize, Serialize};

use super::BilevelProblem;
use crate::error::{check_len, Error, Result};
use crate::math::{
    mat_t_vec, mat_vec, random_orthogonal, random_spd, sym_eigenvalues, InnerVector, Matrix,
    MetaVector, Rng,
};
use crate::unroll::step_seed;

/// Strongly convex quadratic bi-level problem.
///
/// Inner objective `g = 1/2 theta^T A theta - theta^T B phi`, optimized by
/// gradient descent with step `eta` and optional additive Gaussian gradient
/// noise of scale `noise`. Meta objective
/// `f = 1/2 |theta - theta_star|^2 + lambda/2 |phi|^2`. The initial iterate
/// is `theta0 + C phi`, where the coupling `C` defaults to zero.
#[derive(Debug, Clone)]
pub struct QuadraticBilevel {
    a: Matrix,
    b: Matrix,
    theta_star: InnerVector,
    eta: f64,
    lambda: f64,
    theta0: InnerVector,
    init_coupling: Option<Matrix>,
    noise: f64,
    phi0: MetaVector,
    alpha: f64,
    l_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticSpec {
    pub m: usize,
    pub n: usize,
    pub eig_min: f64,
    pub eig_max: f64,
    /// Inner step size; `1 / eig_max` when absent.
    pub eta: Option<f64>,
    pub lambda: f64,
    pub noise: f64,
    /// Draw a random `C` so that `Z_0 != 0`.
    pub init_coupling: bool,
    pub seed: u64,
}

impl Default for QuadraticSpec {
    fn default() -> Self {
        Self {
            m: 3,
            n: 2,
            eig_min: 0.5,
            eig_max: 1.0,
            eta: None,
            lambda: 0.01,
            noise: 0.0,
            init_coupling: false,
            seed: 0,
        }
    }
}

impl QuadraticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid("quadratic: m and n must be >= 1"));
        }
        if !(self.eig_min > 0.0 && self.eig_max >= self.eig_min && self.eig_max.is_finite()) {
            return Err(Error::invalid("quadratic: need 0 < eig_min <= eig_max"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("quadratic: lambda must be >= 0"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("quadratic: noise must be >= 0"));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<QuadraticBilevel> {
        self.validate()?;
        let mut rng = Rng::new(self.seed);
        let a = random_spd(self.m, self.eig_min, self.eig_max, &mut rng);
        // all nonzero singular values of B equal one
        let q1 = random_orthogonal(self.m, &mut rng);
        let q2 = random_orthogonal(self.n, &mut rng);
        let k = self.m.min(self.n);
        let b = q1.columns(0, k) * q2.rows(0, k);
        let theta_star: InnerVector = rng.normal_vec(self.m).into();
        let phi0: MetaVector = rng.normal_vec(self.n).into();
        let eta = self.eta.unwrap_or(1.0 / self.eig_max);
        let mut p = QuadraticBilevel::new(a, b, theta_star, eta, self.lambda)?
            .with_noise(self.noise)?
            .with_initial_meta(phi0)?;
        if self.init_coupling {
            let c = Matrix::from_fn(self.m, self.n, |_, _| rng.normal() / (self.n as f64).sqrt());
            p = p.with_init_coupling(c)?;
        }
        Ok(p)
    }
}

impl QuadraticBilevel {
    pub fn new(
        a: Matrix,
        b: Matrix,
        theta_star: InnerVector,
        eta: f64,
        lambda: f64,
    ) -> Result<Self> {
        let m = a.nrows();
        if m == 0 || a.ncols() != m {
            return Err(Error::invalid("quadratic: A must be square and non-empty"));
        }
        check_len("quadratic B rows", m, b.nrows())?;
        check_len("quadratic theta_star", m, theta_star.len())?;
        let n = b.ncols();
        if n == 0 {
            return Err(Error::invalid("quadratic: B must have at least one column"));
        }
        if (&a - a.transpose()).amax() > 1e-12 * a.amax().max(1.0) {
            return Err(Error::invalid("quadratic: A must be symmetric"));
        }
        let eigs = sym_eigenvalues(&a);
        let (alpha, l_max) = (eigs[0], eigs[m - 1]);
        if alpha <= 0.0 {
            return Err(Error::invalid(format!(
                "quadratic: A must be positive definite (min eigenvalue {alpha:e})"
            )));
        }
        if !(eta > 0.0 && eta < 2.0 / l_max) {
            return Err(Error::invalid(format!(
                "quadratic: eta = {eta} must lie in (0, 2/lambda_max = {})",
                2.0 / l_max
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid("quadratic: lambda must be >= 0"));
        }
        Ok(Self {
            a,
            b,
            theta_star,
            eta,
            lambda,
            theta0: InnerVector::zeros(m),
            init_coupling: None,
            noise: 0.0,
            phi0: MetaVector::zeros(n),
            alpha,
            l_max,
        })
    }

    pub fn with_theta0(mut self, theta0: InnerVector) -> Result<Self> {
        check_len("quadratic theta0", self.m(), theta0.len())?;
        self.theta0 = theta0;
        Ok(self)
    }

    pub fn with_init_coupling(mut self, c: Matrix) -> Result<Self> {
        check_len("quadratic coupling rows", self.m(), c.nrows())?;
        check_len("quadratic coupling cols", self.n(), c.ncols())?;
        self.init_coupling = Some(c);
        Ok(self)
    }

    pub fn with_noise(mut self, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid("quadratic: noise must be >= 0"));
        }
        self.noise = sigma;
        Ok(self)
    }

    pub fn with_initial_meta(mut self, phi0: MetaVector) -> Result<Self> {
        check_len("quadratic phi0", self.n(), phi0.len())?;
        self.phi0 = phi0;
        Ok(self)
    }

    pub fn with_theta_star(mut self, theta_star: InnerVector) -> Result<Self> {
        check_len("quadratic theta_star", self.m(), theta_star.len())?;
        self.theta_star = theta_star;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.a.nrows()
    }

    pub fn n(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Strong convexity constant `lambda_min(A)`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda_max(&self) -> f64 {
        self.l_max
    }

    pub fn theta_star(&self) -> &InnerVector {
        &self.theta_star
    }

    pub fn init_coupling(&self) -> Option<&Matrix> {
        self.init_coupling.as_ref()
    }

    fn step_noise(&self, step_seed: u64) -> Option<Vec<f64>> {
        (self.noise > 0.0).then(|| {
            let mut rng = Rng::new(step_seed);
            rng.normal_vec(self.m())
                .into_iter()
                .map(|x| x * self.noise)
                .collect()
        })
    }

    fn check_theta_phi(&self, theta: &InnerVector, phi: &MetaVector) -> Result<()> {
        check_len("quadratic theta", self.m(), theta.len())?;
        check_len("quadratic phi", self.n(), phi.len())
    }
}

impl BilevelProblem for QuadraticBilevel {
    fn name(&self) -> &str {
        "quadratic"
    }

    fn meta_dim(&self) -> usize {
        self.n()
    }

    fn inner_dim(&self) -> usize {
        self.m()
    }

    fn initial_meta(&self) -> MetaVector {
        self.phi0.clone()
    }

    fn meta_loss(&self, theta: &InnerVector, phi: &MetaVector) -> Result<f64> {
        self.check_theta_phi(theta, phi)?;
        let r: f64 = theta
            .iter()
            .zip(self.theta_star.iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        Ok(0.5 * r + 0.5 * self.lambda * phi.dot(phi))
    }

    fn inner_init(&self, phi: &MetaVector) -> Result<InnerVector> {
        check_len("quadratic phi", self.n(), phi.len())?;
        let mut theta = self.theta0.clone();
        if let Some(c) = &self.init_coupling {
            theta.axpy(1.0, &mat_vec(c, phi));
        }
        Ok(theta)
    }

    fn transition(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        _t: usize,
        step_seed: u64,
    ) -> Result<InnerVector> {
        self.check_theta_phi(theta, phi)?;
        let mut grad = mat_vec(&self.a, theta);
        let bphi = mat_vec(&self.b, phi);
        for (g, x) in grad.iter_mut().zip(&bphi) {
            *g -= x;
        }
        if let Some(xi) = self.step_noise(step_seed) {
            for (g, x) in grad.iter_mut().zip(&xi) {
                *g += x;
            }
        }
        let mut next = theta.clone();
        next.axpy(-self.eta, &grad);
        Ok(next)
    }

    fn partial_f_theta(&self, theta: &InnerVector, phi: &MetaVector) -> Result<InnerVector> {
        self.check_theta_phi(theta, phi)?;
        Ok(theta
            .iter()
            .zip(self.theta_star.iter())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>()
            .into())
    }

    fn partial_f_phi(&self, theta: &InnerVector, phi: &MetaVector) -> Result<MetaVector> {
        self.check_theta_phi(theta, phi)?;
        Ok(phi.scaled(self.lambda))
    }

    fn init_jvp(&self, phi: &MetaVector, v: &MetaVector) -> Result<InnerVector> {
        check_len("quadratic phi", self.n(), phi.len())?;
        check_len("quadratic v", self.n(), v.len())?;
        Ok(match &self.init_coupling {
            Some(c) => mat_vec(c, v).into(),
            None => InnerVector::zeros(self.m()),
        })
    }

    fn init_vjp(&self, phi: &MetaVector, d: &InnerVector) -> Result<MetaVector> {
        check_len("quadratic phi", self.n(), phi.len())?;
        check_len("quadratic d", self.m(), d.len())?;
        Ok(match &self.init_coupling {
            Some(c) => mat_t_vec(c, d).into(),
            None => MetaVector::zeros(self.n()),
        })
    }

    fn transition_jvp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        _t: usize,
        _step_seed: u64,
        y: &InnerVector,
        v: &MetaVector,
    ) -> Result<InnerVector> {
        self.check_theta_phi(theta, phi)?;
        check_len("quadratic y", self.m(), y.len())?;
        check_len("quadratic v", self.n(), v.len())?;
        let ay = mat_vec(&self.a, y);
        let bv = mat_vec(&self.b, v);
        let mut out = y.clone();
        for ((o, a), b) in out.iter_mut().zip(&ay).zip(&bv) {
            *o -= self.eta * (a - b);
        }
        Ok(out)
    }

    fn transition_vjp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        _t: usize,
        _step_seed: u64,
        d: &InnerVector,
    ) -> Result<(InnerVector, MetaVector)> {
        self.check_theta_phi(theta, phi)?;
        check_len("quadratic d", self.m(), d.len())?;
        let mut da = d.clone();
        da.axpy(-self.eta, &mat_vec(&self.a, d));
        let db = MetaVector::from(mat_t_vec(&self.b, d)).scaled(self.eta);
        Ok((da, db))
    }

    fn g_hvp(&self, theta: &InnerVector, phi: &MetaVector, u: &InnerVector) -> Result<InnerVector> {
        self.check_theta_phi(theta, phi)?;
        check_len("quadratic u", self.m(), u.len())?;
        Ok(mat_vec(&self.a, u).into())
    }

    fn g_cross_vjp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        r: &InnerVector,
    ) -> Result<MetaVector> {
        self.check_theta_phi(theta, phi)?;
        check_len("quadratic r", self.m(), r.len())?;
        Ok(MetaVector::from(mat_t_vec(&self.b, r)).scaled(-1.0))
    }
}

/// Exact hypergradient from dense matrix algebra.
///
/// `Z_T = P^T C + sum_{k<T} P^k eta B` with `P = I - eta A`, and `theta_T`
/// from the matrix form of the iteration. Independent of the oracle methods,
/// so it can serve as ground truth for them.
pub fn quadratic_true_hypergradient(
    p: &QuadraticBilevel,
    phi: &MetaVector,
    t_steps: usize,
    run_seed: u64,
) -> Result<MetaVector> {
    check_len("quadratic phi", p.n(), phi.len())?;
    let (m, n) = (p.m(), p.n());
    let phi_v = nalgebra::DVector::from_column_slice(phi);
    let step = Matrix::identity(m, m) - &p.a * p.eta;
    let eta_b = &p.b * p.eta;

    let mut z = match &p.init_coupling {
        Some(c) => step.pow(t_steps as u32) * c,
        None => Matrix::zeros(m, n),
    };
    let mut power = Matrix::identity(m, m);
    for _ in 0..t_steps {
        z += &power * &eta_b;
        power = &step * power;
    }

    let mut theta = nalgebra::DVector::from_column_slice(&p.theta0);
    if let Some(c) = &p.init_coupling {
        theta += c * &phi_v;
    }
    let drive = &eta_b * &phi_v;
    for t in 1..=t_steps {
        theta = &step * theta + &drive;
        if let Some(xi) = p.step_noise(step_seed(run_seed, t)) {
            theta -= nalgebra::DVector::from_vec(xi) * p.eta;
        }
    }
    let residual = theta - nalgebra::DVector::from_column_slice(&p.theta_star);
    let grad = z.transpose() * residual + phi_v * p.lambda;
    Ok(grad.as_slice().to_vec().into())
}
