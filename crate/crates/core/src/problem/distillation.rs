//! Dataset distillation on a synthetic Gaussian-mixture classification task.
//!
//! The meta parameter is a condensed training set (`ipc` points per class,
//! labels fixed one class per point). The inner loop trains a small
//! classifier on the condensed set by full-batch gradient descent from a
//! fixed seeded initialization; the meta loss is the cross-entropy of the
//! trained classifier on the original data.
//!
//! Second-order oracles run the hand-written reverse pass on dual numbers:
//! seeding `(theta, phi)` with tangents `(y, v)` gives
//! `H_tt y + H_tp v` in the dual part of the parameter gradient.

use serde::{Deserialize, Serialize};

use super::BilevelProblem;
use crate::error::{check_len, Error, Result};
use crate::math::{Dual, InnerVector, MetaVector, Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InnerModel {
    /// Multinomial logistic regression.
    Linear,
    /// One tanh hidden layer followed by a softmax layer.
    #[default]
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillationSpec {
    pub classes: usize,
    pub features: usize,
    /// Condensed points per class.
    pub ipc: usize,
    pub model: InnerModel,
    pub hidden: usize,
    /// Original points per class.
    pub samples_per_class: usize,
    /// Standard deviation of the class means.
    pub separation: f64,
    /// Within-class standard deviation.
    pub spread: f64,
    /// Inner gradient-descent step size.
    pub eta: f64,
    /// L2 penalty on the inner parameters.
    pub ridge: f64,
    /// Scale of the random initial condensed set.
    pub meta_init_scale: f64,
    pub seed: u64,
}

impl Default for DistillationSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            features: 5,
            ipc: 1,
            model: InnerModel::Hidden,
            hidden: 5,
            samples_per_class: 50,
            separation: 1.0,
            spread: 1.0,
            eta: 0.5,
            ridge: 1e-3,
            meta_init_scale: 1.0,
            seed: 0,
        }
    }
}

impl DistillationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("distillation: classes must be >= 2"));
        }
        if self.features == 0 || self.ipc == 0 || self.samples_per_class == 0 {
            return Err(Error::invalid(
                "distillation: features, ipc and samples_per_class must be >= 1",
            ));
        }
        if self.model == InnerModel::Hidden && self.hidden == 0 {
            return Err(Error::invalid(
                "distillation: hidden must be >= 1 for the hidden-layer model",
            ));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("spread", self.spread),
            ("meta_init_scale", self.meta_init_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "distillation: {name} must be positive"
                )));
            }
        }
        for (name, v) in [("separation", self.separation), ("ridge", self.ridge)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("distillation: {name} must be >= 0")));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<DistillationProblem> {
        DistillationProblem::new(self.clone())
    }
}

#[derive(Debug, Clone)]
pub struct DistillationProblem {
    spec: DistillationSpec,
    /// Row-major `(classes * samples_per_class) x features`.
    data: Vec<f64>,
    labels: Vec<usize>,
    condensed_labels: Vec<usize>,
    theta0: InnerVector,
    phi0: MetaVector,
}

impl DistillationProblem {
    pub fn new(spec: DistillationSpec) -> Result<Self> {
        spec.validate()?;
        let (c, f) = (spec.classes, spec.features);
        let mut rng = Rng::substream(spec.seed, 0);
        let means: Vec<f64> = (0..c * f).map(|_| spec.separation * rng.normal()).collect();
        let mut data = Vec::with_capacity(c * spec.samples_per_class * f);
        let mut labels = Vec::with_capacity(c * spec.samples_per_class);
        for class in 0..c {
            for _ in 0..spec.samples_per_class {
                data.extend((0..f).map(|k| means[class * f + k] + spec.spread * rng.normal()));
                labels.push(class);
            }
        }
        let condensed_labels = (0..c)
            .flat_map(|class| std::iter::repeat_n(class, spec.ipc))
            .collect();

        let mut init_rng = Rng::substream(spec.seed, 1);
        let theta0 = Self::init_params(&spec, &mut init_rng);
        let mut meta_rng = Rng::substream(spec.seed, 2);
        let phi0 = MetaVector::from(
            (0..c * spec.ipc * f)
                .map(|_| spec.meta_init_scale * meta_rng.normal())
                .collect::<Vec<_>>(),
        );
        Ok(Self {
            spec,
            data,
            labels,
            condensed_labels,
            theta0,
            phi0,
        })
    }

    fn param_count(spec: &DistillationSpec) -> usize {
        let (c, f, h) = (spec.classes, spec.features, spec.hidden);
        match spec.model {
            InnerModel::Linear => c * f + c,
            InnerModel::Hidden => h * f + h + c * h + c,
        }
    }

    fn init_params(spec: &DistillationSpec, rng: &mut Rng) -> InnerVector {
        let (c, f, h) = (spec.classes, spec.features, spec.hidden);
        let mut theta = Vec::with_capacity(Self::param_count(spec));
        match spec.model {
            InnerModel::Linear => {
                theta.extend((0..c * f).map(|_| rng.normal() / (f as f64).sqrt()));
                theta.extend(std::iter::repeat_n(0.0, c));
            }
            InnerModel::Hidden => {
                theta.extend((0..h * f).map(|_| rng.normal() / (f as f64).sqrt()));
                theta.extend(std::iter::repeat_n(0.0, h));
                theta.extend((0..c * h).map(|_| rng.normal() / (h as f64).sqrt()));
                theta.extend(std::iter::repeat_n(0.0, c));
            }
        }
        theta.into()
    }

    pub fn spec(&self) -> &DistillationSpec {
        &self.spec
    }

    pub fn original_data(&self) -> (&[f64], &[usize]) {
        (&self.data, &self.labels)
    }

    /// Classification accuracy of `theta` on the original data.
    pub fn accuracy(&self, theta: &InnerVector) -> Result<f64> {
        check_len("distillation theta", self.inner_dim(), theta.len())?;
        let f = self.spec.features;
        let mut logits = vec![0.0; self.spec.classes];
        let mut hidden = vec![0.0; self.spec.hidden];
        let correct = self
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| {
                self.logits(
                    theta,
                    &self.data[i * f..(i + 1) * f],
                    &mut hidden,
                    &mut logits,
                );
                let best =
                    (0..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
                best == y
            })
            .count();
        Ok(correct as f64 / self.labels.len() as f64)
    }

    /// Accuracy on the original data after training on the condensed set `phi` for `t_steps`.
    pub fn trained_accuracy(&self, phi: &MetaVector, t_steps: usize) -> Result<f64> {
        let (theta, _) = crate::unroll::unroll(self, phi, t_steps, 0, false)?;
        self.accuracy(&theta)
    }

    fn logits(&self, theta: &[f64], x: &[f64], hidden: &mut [f64], out: &mut [f64]) {
        let (c, f, h) = (self.spec.classes, self.spec.features, self.spec.hidden);
        match self.spec.model {
            InnerModel::Linear => {
                let (w, b) = theta.split_at(c * f);
                for (k, o) in out.iter_mut().enumerate() {
                    *o = b[k] + (0..f).map(|j| w[k * f + j] * x[j]).sum::<f64>();
                }
            }
            InnerModel::Hidden => {
                let (w1, rest) = theta.split_at(h * f);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                for (j, a) in hidden.iter_mut().enumerate() {
                    *a = (b1[j] + (0..f).map(|k| w1[j * f + k] * x[k]).sum::<f64>()).tanh();
                }
                for (k, o) in out.iter_mut().enumerate() {
                    *o = b2[k] + (0..h).map(|j| w2[k * h + j] * hidden[j]).sum::<f64>();
                }
            }
        }
    }

    /// Mean cross-entropy over `xs` plus `ridge/2 |theta|^2`, with its gradients
    /// in `theta` and (optionally) in `xs`.
    fn loss_and_grad<S: Scalar>(
        &self,
        theta: &[S],
        xs: &[S],
        labels: &[usize],
        ridge: f64,
        want_x_grad: bool,
    ) -> (S, Vec<S>, Vec<S>) {
        let (c, f, h) = (self.spec.classes, self.spec.features, self.spec.hidden);
        let scale = 1.0 / labels.len() as f64;
        let mut loss = S::zero();
        let mut g_theta = vec![S::zero(); theta.len()];
        let mut g_x = if want_x_grad {
            vec![S::zero(); xs.len()]
        } else {
            Vec::new()
        };
        let mut z = vec![S::zero(); c];
        let mut a = vec![S::zero(); h];
        let mut dz = vec![S::zero(); c];

        for (i, &y) in labels.iter().enumerate() {
            let x = &xs[i * f..(i + 1) * f];
            // forward
            match self.spec.model {
                InnerModel::Linear => {
                    for k in 0..c {
                        let mut acc = theta[c * f + k];
                        for j in 0..f {
                            acc += theta[k * f + j] * x[j];
                        }
                        z[k] = acc;
                    }
                }
                InnerModel::Hidden => {
                    let (o_b1, o_w2, o_b2) = (h * f, h * f + h, h * f + h + c * h);
                    for j in 0..h {
                        let mut acc = theta[o_b1 + j];
                        for k in 0..f {
                            acc += theta[j * f + k] * x[k];
                        }
                        a[j] = acc.tanh();
                    }
                    for k in 0..c {
                        let mut acc = theta[o_b2 + k];
                        for j in 0..h {
                            acc += theta[o_w2 + k * h + j] * a[j];
                        }
                        z[k] = acc;
                    }
                }
            }
            // log-sum-exp shifted by the largest real part
            let shift = z
                .iter()
                .map(|v| v.value())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = S::zero();
            for zk in &z {
                denom += (*zk + (-shift)).exp();
            }
            let lse = denom.ln() + shift;
            loss += (lse - z[y]) * scale;
            for k in 0..c {
                let p = (z[k] + (-shift)).exp() / denom;
                dz[k] = if k == y {
                    (p + (-1.0)) * scale
                } else {
                    p * scale
                };
            }
            // backward
            match self.spec.model {
                InnerModel::Linear => {
                    for k in 0..c {
                        for j in 0..f {
                            g_theta[k * f + j] += dz[k] * x[j];
                        }
                        g_theta[c * f + k] += dz[k];
                    }
                    if want_x_grad {
                        for j in 0..f {
                            let mut acc = S::zero();
                            for k in 0..c {
                                acc += theta[k * f + j] * dz[k];
                            }
                            g_x[i * f + j] += acc;
                        }
                    }
                }
                InnerModel::Hidden => {
                    let (o_b1, o_w2, o_b2) = (h * f, h * f + h, h * f + h + c * h);
                    for k in 0..c {
                        for j in 0..h {
                            g_theta[o_w2 + k * h + j] += dz[k] * a[j];
                        }
                        g_theta[o_b2 + k] += dz[k];
                    }
                    for j in 0..h {
                        let mut da = S::zero();
                        for k in 0..c {
                            da += theta[o_w2 + k * h + j] * dz[k];
                        }
                        let dz1 = da * (S::constant(1.0) - a[j] * a[j]);
                        for k in 0..f {
                            g_theta[j * f + k] += dz1 * x[k];
                        }
                        g_theta[o_b1 + j] += dz1;
                        if want_x_grad {
                            for k in 0..f {
                                g_x[i * f + k] += theta[j * f + k] * dz1;
                            }
                        }
                    }
                }
            }
        }
        if ridge > 0.0 {
            let mut sq = S::zero();
            for (g, &t) in g_theta.iter_mut().zip(theta) {
                *g += t * ridge;
                sq += t * t;
            }
            loss += sq * (0.5 * ridge);
        }
        (loss, g_theta, g_x)
    }

    /// Dual parts of `(grad_theta L, grad_phi L)` of the inner loss along `(y, v)`.
    fn inner_second_order(
        &self,
        theta: &[f64],
        phi: &[f64],
        y: &[f64],
        v: Option<&[f64]>,
    ) -> (Vec<f64>, Vec<f64>) {
        let th = Dual::seed(theta, y);
        let zeros;
        let v = match v {
            Some(v) => v,
            None => {
                zeros = vec![0.0; phi.len()];
                &zeros
            }
        };
        let xs = Dual::seed(phi, v);
        let (_, g_theta, g_x) =
            self.loss_and_grad(&th, &xs, &self.condensed_labels, self.spec.ridge, true);
        (
            g_theta.iter().map(|d| d.eps).collect(),
            g_x.iter().map(|d| d.eps).collect(),
        )
    }

    /// `A_t y + B_t v` by central differences of the transition (validation fallback).
    pub fn transition_jvp_fd(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        y: &InnerVector,
        v: &MetaVector,
        eps: f64,
    ) -> Result<InnerVector> {
        let shifted = |s: f64| {
            let mut th = theta.clone();
            th.axpy(s, y);
            let mut ph = phi.clone();
            ph.axpy(s, v);
            self.transition(&th, &ph, 1, 0)
        };
        let (plus, minus) = (shifted(eps)?, shifted(-eps)?);
        Ok(plus
            .iter()
            .zip(minus.iter())
            .map(|(a, b)| (a - b) / (2.0 * eps))
            .collect::<Vec<_>>()
            .into())
    }

    fn check(&self, theta: &InnerVector, phi: &MetaVector) -> Result<()> {
        check_len("distillation theta", self.inner_dim(), theta.len())?;
        check_len("distillation phi", self.meta_dim(), phi.len())
    }
}

/// Default finite-difference step of [`DistillationProblem::transition_jvp_fd`].
pub const DISTILLATION_FD_EPS: f64 = 1e-5;

impl BilevelProblem for DistillationProblem {
    fn name(&self) -> &str {
        "distillation"
    }

    fn meta_dim(&self) -> usize {
        self.spec.classes * self.spec.ipc * self.spec.features
    }

    fn inner_dim(&self) -> usize {
        Self::param_count(&self.spec)
    }

    fn initial_meta(&self) -> MetaVector {
        self.phi0.clone()
    }

    fn meta_loss(&self, theta: &InnerVector, phi: &MetaVector) -> Result<f64> {
        self.check(theta, phi)?;
        let (loss, _, _) =
            self.loss_and_grad(theta.as_slice(), &self.data, &self.labels, 0.0, false);
        Ok(loss)
    }

    fn inner_init(&self, phi: &MetaVector) -> Result<InnerVector> {
        check_len("distillation phi", self.meta_dim(), phi.len())?;
        Ok(self.theta0.clone())
    }

    fn transition(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        _t: usize,
        _step_seed: u64,
    ) -> Result<InnerVector> {
        self.check(theta, phi)?;
        let (_, g, _) = self.loss_and_grad(
            theta.as_slice(),
            phi.as_slice(),
            &self.condensed_labels,
            self.spec.ridge,
            false,
        );
        let mut next = theta.clone();
        next.axpy(-self.spec.eta, &g);
        Ok(next)
    }

    fn partial_f_theta(&self, theta: &InnerVector, phi: &MetaVector) -> Result<InnerVector> {
        self.check(theta, phi)?;
        let (_, g, _) = self.loss_and_grad(theta.as_slice(), &self.data, &self.labels, 0.0, false);
        Ok(g.into())
    }

    fn partial_f_phi(&self, theta: &InnerVector, phi: &MetaVector) -> Result<MetaVector> {
        self.check(theta, phi)?;
        Ok(MetaVector::zeros(self.meta_dim()))
    }

    fn init_jvp(&self, phi: &MetaVector, v: &MetaVector) -> Result<InnerVector> {
        check_len("distillation phi", self.meta_dim(), phi.len())?;
        check_len("distillation v", self.meta_dim(), v.len())?;
        Ok(InnerVector::zeros(self.inner_dim()))
    }

    fn init_vjp(&self, phi: &MetaVector, d: &InnerVector) -> Result<MetaVector> {
        check_len("distillation phi", self.meta_dim(), phi.len())?;
        check_len("distillation d", self.inner_dim(), d.len())?;
        Ok(MetaVector::zeros(self.meta_dim()))
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
        self.check(theta, phi)?;
        check_len("distillation y", self.inner_dim(), y.len())?;
        check_len("distillation v", self.meta_dim(), v.len())?;
        let (hy, _) = self.inner_second_order(theta, phi, y, Some(v));
        let mut out = y.clone();
        out.axpy(-self.spec.eta, &hy);
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
        self.check(theta, phi)?;
        check_len("distillation d", self.inner_dim(), d.len())?;
        let (hd, cross) = self.inner_second_order(theta, phi, d, None);
        let mut da = d.clone();
        da.axpy(-self.spec.eta, &hd);
        Ok((da, MetaVector::from(cross).scaled(-self.spec.eta)))
    }

    fn g_hvp(&self, theta: &InnerVector, phi: &MetaVector, u: &InnerVector) -> Result<InnerVector> {
        self.check(theta, phi)?;
        check_len("distillation u", self.inner_dim(), u.len())?;
        Ok(self.inner_second_order(theta, phi, u, None).0.into())
    }

    fn g_cross_vjp(
        &self,
        theta: &InnerVector,
        phi: &MetaVector,
        r: &InnerVector,
    ) -> Result<MetaVector> {
        self.check(theta, phi)?;
        check_len("distillation r", self.inner_dim(), r.len())?;
        Ok(self.inner_second_order(theta, phi, r, None).1.into())
    }
}
