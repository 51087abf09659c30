//! Density power divergence and the estimation criterion.
//!
//! For `α > 0` the per-observation criterion is
//! `m(x, θ) = (1 + 1/α) f^α(x; θ) − ∫ f^{1+α}(y; θ) dy`, maximized on average
//! over the sample. At `α = 0` the criterion is `log f(x; θ)`, so the estimator
//! reduces to maximum likelihood. Derivatives are the closed forms
//!
//! ```text
//! ∇m = (1+α) S f^α − (1+α) ∫ S f^{1+α}
//! ∇²m = (1+α) {−i + α S Sᵀ} f^α − (1+α) ∫ {−i + (1+α) S Sᵀ} f^{1+α}
//! ```
//!
//! with `S` the score and `i` the information matrix of the family.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MdpdeError, Result};
use crate::family::{Family, Kernel, Mixture, ParamPoint, LOG_DENSITY_FLOOR, MAX_DIM};
use crate::quadrature::{integrate, Plan, QuadratureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpdConfig {
    pub alpha: f64,
    #[serde(default)]
    pub quad: QuadratureSpec,
}

impl DpdConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let cfg = DpdConfig {
            alpha,
            quad: QuadratureSpec::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_quad(self, quad: QuadratureSpec) -> Self {
        DpdConfig { quad, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(MdpdeError::Config(format!(
                "alpha must be a finite non-negative number, got {}",
                self.alpha
            )));
        }
        self.quad.validate()
    }
}

/// Observations validated against a family's support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    observations: Vec<f64>,
}

impl Sample {
    pub fn new(family: Family, observations: Vec<f64>) -> Result<Self> {
        if observations.is_empty() {
            return Err(MdpdeError::InsufficientData { needed: 1, got: 0 });
        }
        let support = family.support();
        if let Some((i, x)) = observations
            .iter()
            .enumerate()
            .find(|(_, x)| !support.contains(**x))
        {
            return Err(MdpdeError::domain(format!(
                "observation {i} ({x}) lies outside the {family} support"
            )));
        }
        Ok(Sample { observations })
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegralKind {
    /// `∫ f^{1+α}`
    PlainPower,
    /// `∫ S f^{1+α}`
    ScorePower,
    /// `∫ S Sᵀ f^{1+α}`
    ScoreOuterPower,
    /// `∫ i f^{1+α}`
    InfoPower,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntegralValue {
    Scalar(f64),
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
}

/// The four data-free model integrals at one `(θ, α)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelTerms {
    pub p: usize,
    pub plain: f64,
    pub score: [f64; MAX_DIM],
    pub outer: [[f64; MAX_DIM]; MAX_DIM],
    pub info: [[f64; MAX_DIM]; MAX_DIM],
}

impl ModelTerms {
    fn get(&self, kind: IntegralKind) -> IntegralValue {
        let p = self.p;
        match kind {
            IntegralKind::PlainPower => IntegralValue::Scalar(self.plain),
            IntegralKind::ScorePower => IntegralValue::Vector(DVector::from_fn(p, |i, _| self.score[i])),
            IntegralKind::ScoreOuterPower => {
                IntegralValue::Matrix(DMatrix::from_fn(p, p, |i, j| self.outer[i][j]))
            }
            IntegralKind::InfoPower => IntegralValue::Matrix(DMatrix::from_fn(p, p, |i, j| self.info[i][j])),
        }
    }
}

fn closed_form_terms(family: Family, t: &[f64], alpha: f64) -> ModelTerms {
    let p = family.dim();
    let mut m = ModelTerms {
        p,
        plain: f64::NAN,
        score: [f64::NAN; MAX_DIM],
        outer: [[f64::NAN; MAX_DIM]; MAX_DIM],
        info: [[f64::NAN; MAX_DIM]; MAX_DIM],
    };
    let a1 = 1.0 + alpha;
    match family {
        Family::Normal => {
            let sigma = t[1];
            let c = (2.0 * std::f64::consts::PI).powf(-alpha / 2.0) * sigma.powf(-alpha) / a1.sqrt();
            let s2 = sigma * sigma;
            m.plain = c;
            m.score = [0.0, -c * alpha / (a1 * sigma)];
            m.outer = [
                [c / (a1 * s2), 0.0],
                [0.0, c * (3.0 / (a1 * a1) - 2.0 / a1 + 1.0) / s2],
            ];
            m.info = [[c / s2, 0.0], [0.0, c * (3.0 / a1 - 1.0) / s2]];
        }
        Family::Exponential => {
            let lambda = t[0];
            let c = lambda.powf(alpha) / a1;
            m.plain = c;
            m.score[0] = c * alpha / (a1 * lambda);
            m.outer[0][0] = c * (1.0 + alpha * alpha) / (a1 * a1 * lambda * lambda);
            m.info[0][0] = c / (lambda * lambda);
        }
        Family::Gpd => {
            let (sigma, xi) = (t[0], t[1]);
            m.plain = sigma.powf(-alpha) / (1.0 + alpha + alpha * xi);
        }
        Family::Poisson => {}
    }
    m
}

/// Integration plan for the model density alone.
pub(crate) fn model_plan(family: Family, t: &[f64], quad: &QuadratureSpec) -> Result<Plan> {
    Plan::new(family.support(), &[family.anchor(t, quad.tail_mass)], quad)
}

fn quadrature_terms(family: Family, t: &[f64], alpha: f64, plan: &Plan, quad: &QuadratureSpec) -> Result<ModelTerms> {
    let p = family.dim();
    let m = 1 + p + 2 * p * p;
    let r = integrate(plan, quad, m, |x, out| {
        let k = family.kernel(x, t);
        let w = ((1.0 + alpha) * k.log_f).exp();
        out[0] = w;
        for i in 0..p {
            out[1 + i] = k.score[i] * w;
            for j in 0..p {
                out[1 + p + i * p + j] = k.score[i] * k.score[j] * w;
                out[1 + p + p * p + i * p + j] = k.info[i][j] * w;
            }
        }
    })?;
    let v = &r.value;
    let mut terms = ModelTerms {
        p,
        plain: v[0],
        score: [0.0; MAX_DIM],
        outer: [[0.0; MAX_DIM]; MAX_DIM],
        info: [[0.0; MAX_DIM]; MAX_DIM],
    };
    for i in 0..p {
        terms.score[i] = v[1 + i];
        for j in 0..p {
            // average the mirrored entries so the result is exactly symmetric
            terms.outer[i][j] = 0.5 * (v[1 + p + i * p + j] + v[1 + p + j * p + i]);
            terms.info[i][j] = 0.5 * (v[1 + p + p * p + i * p + j] + v[1 + p + p * p + j * p + i]);
        }
    }
    Ok(terms)
}

/// All four model integrals, closed form where the family provides one.
pub(crate) fn model_terms(family: Family, t: &[f64], alpha: f64, quad: &QuadratureSpec) -> Result<ModelTerms> {
    let cf = family.closed_forms();
    let closed = closed_form_terms(family, t, alpha);
    if cf.plain_power && cf.score_power && cf.score_outer_power && cf.info_power {
        return Ok(closed);
    }
    let plan = model_plan(family, t, quad)?;
    let mut terms = quadrature_terms(family, t, alpha, &plan, quad)?;
    if cf.plain_power {
        terms.plain = closed.plain;
    }
    Ok(terms)
}

/// One of the model integrals `∫ f^{1+α}`, `∫ S f^{1+α}`, `∫ S Sᵀ f^{1+α}`,
/// `∫ i f^{1+α}`, using the closed form when the family has one.
pub fn integral_term(
    family: Family,
    theta: &ParamPoint,
    alpha: f64,
    kind: IntegralKind,
    quad: &QuadratureSpec,
) -> Result<IntegralValue> {
    check_alpha(alpha)?;
    family.check_interior(theta)?;
    Ok(model_terms(family, theta.values(), alpha, quad)?.get(kind))
}

/// Same as [`integral_term`] but always by quadrature.
pub fn integral_term_by_quadrature(
    family: Family,
    theta: &ParamPoint,
    alpha: f64,
    kind: IntegralKind,
    quad: &QuadratureSpec,
) -> Result<IntegralValue> {
    check_alpha(alpha)?;
    family.check_interior(theta)?;
    let plan = model_plan(family, theta.values(), quad)?;
    Ok(quadrature_terms(family, theta.values(), alpha, &plan, quad)?.get(kind))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(MdpdeError::Config(format!("alpha must be non-negative, got {alpha}")))
    }
}

/// `expm1(α z)/α`, continuous at `α = 0`.
#[inline]
fn expm1_ratio(alpha: f64, z: f64) -> f64 {
    if alpha == 0.0 {
        z
    } else {
        (alpha * z).exp_m1() / alpha
    }
}

/// `d_α(g, f(·; θ))` by quadrature. At `α = 0` this is the Kullback–Leibler
/// divergence `∫ g log(g/f)`.
///
/// The integrand is rearranged as
/// `f^{1+α} − g f^α − g^{1+α}·expm1(α(log f − log g))/α`, which is pointwise
/// non-negative and has no cancellation as `α → 0`.
pub fn divergence(g: &Mixture, family: Family, theta: &ParamPoint, cfg: &DpdConfig) -> Result<f64> {
    cfg.validate()?;
    family.check_feasible(theta)?;
    if g.support() != family.support() {
        return Err(MdpdeError::domain(format!(
            "true density and {family} model have different supports"
        )));
    }
    let alpha = cfg.alpha;
    let t = theta.values();
    let mut anchors = g.anchors(cfg.quad.tail_mass);
    anchors.push(family.anchor(t, cfg.quad.tail_mass));
    let plan = Plan::new(family.support(), &anchors, &cfg.quad)?;
    let r = integrate(&plan, &cfg.quad, 1, |x, out| {
        let log_f = family.log_density_raw(x, t);
        let gx = g.density(x);
        let fa = (alpha * log_f).exp();
        let f1a = fa * log_f.exp();
        out[0] = if gx <= 0.0 {
            f1a
        } else {
            let log_g = gx.ln();
            let z = log_f - log_g;
            let third = if alpha * z > 1.0 {
                // no cancellation here, and g^{1+α} may underflow while expm1 overflows
                ((log_g + alpha * log_f).exp() - ((1.0 + alpha) * log_g).exp()) / alpha
            } else {
                ((1.0 + alpha) * log_g).exp() * expm1_ratio(alpha, z)
            };
            f1a - gx * fa - third
        };
    })?;
    Ok(r.value[0].max(0.0))
}

/// `∫ (g − f)²` computed directly.
pub fn l2_distance(g: &Mixture, family: Family, theta: &ParamPoint, quad: &QuadratureSpec) -> Result<f64> {
    family.check_feasible(theta)?;
    let t = theta.values();
    let mut anchors = g.anchors(quad.tail_mass);
    anchors.push(family.anchor(t, quad.tail_mass));
    let plan = Plan::new(family.support(), &anchors, quad)?;
    let r = integrate(&plan, quad, 1, |x, out| {
        let d = g.density(x) - family.log_density_raw(x, t).exp();
        out[0] = d * d;
    })?;
    Ok(r.value[0])
}

/// The criterion at one `(θ, α)`. This is the only place the estimator
/// branches on `α = 0`.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Criterion {
    LogLikelihood { p: usize },
    Power { alpha: f64, terms: ModelTerms },
}

impl Criterion {
    pub fn new(family: Family, t: &[f64], alpha: f64, quad: &QuadratureSpec) -> Result<Self> {
        if alpha == 0.0 {
            Ok(Criterion::LogLikelihood { p: family.dim() })
        } else {
            Ok(Criterion::Power {
                alpha,
                terms: model_terms(family, t, alpha, quad)?,
            })
        }
    }

    fn p(&self) -> usize {
        match self {
            Criterion::LogLikelihood { p } => *p,
            Criterion::Power { terms, .. } => terms.p,
        }
    }

    /// `m(x, θ)` from the point kernel.
    #[inline]
    pub fn value(&self, k: &Kernel) -> f64 {
        match self {
            Criterion::LogLikelihood { .. } => k.log_f.max(LOG_DENSITY_FLOOR),
            Criterion::Power { alpha, terms } => {
                (1.0 + 1.0 / alpha) * (alpha * k.log_f).exp() - terms.plain
            }
        }
    }

    /// Accumulates value, gradient and (optionally) Hessian of the sample mean.
    pub fn accumulate(&self, family: Family, t: &[f64], data: &[f64], want_hessian: bool) -> Evaluated {
        let p = self.p();
        let mut v = 0.0;
        let mut g = [0.0; MAX_DIM];
        let mut h = [[0.0; MAX_DIM]; MAX_DIM];
        for &x in data {
            let k = family.kernel(x, t);
            match self {
                Criterion::LogLikelihood { .. } => {
                    v += k.log_f.max(LOG_DENSITY_FLOOR);
                    for i in 0..p {
                        g[i] += k.score[i];
                        if want_hessian {
                            for j in 0..p {
                                h[i][j] -= k.info[i][j];
                            }
                        }
                    }
                }
                Criterion::Power { alpha, .. } => {
                    let fa = (alpha * k.log_f).exp();
                    v += fa;
                    for i in 0..p {
                        g[i] += k.score[i] * fa;
                        if want_hessian {
                            for j in 0..p {
                                h[i][j] += (alpha * k.score[i] * k.score[j] - k.info[i][j]) * fa;
                            }
                        }
                    }
                }
            }
        }
        let n = data.len() as f64;
        match self {
            Criterion::LogLikelihood { .. } => {
                v /= n;
                for i in 0..p {
                    g[i] /= n;
                    for j in 0..p {
                        h[i][j] /= n;
                    }
                }
            }
            Criterion::Power { alpha, terms } => {
                let a1 = 1.0 + alpha;
                v = (1.0 + 1.0 / alpha) * v / n - terms.plain;
                for i in 0..p {
                    g[i] = a1 * (g[i] / n - terms.score[i]);
                    for j in 0..p {
                        h[i][j] = a1 * (h[i][j] / n - (a1 * terms.outer[i][j] - terms.info[i][j]));
                    }
                }
            }
        }
        // exact symmetry
        for i in 0..p {
            for j in 0..i {
                let s = 0.5 * (h[i][j] + h[j][i]);
                h[i][j] = s;
                h[j][i] = s;
            }
        }
        Evaluated {
            p,
            value: v,
            gradient: g,
            hessian: h,
        }
    }
}

/// Fixed-size evaluation result for internal loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Evaluated {
    pub p: usize,
    pub value: f64,
    pub gradient: [f64; MAX_DIM],
    pub hessian: [[f64; MAX_DIM]; MAX_DIM],
}

/// Objective value with its analytic gradient and Hessian (natural coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

impl From<Evaluated> for Evaluation {
    fn from(e: Evaluated) -> Self {
        Evaluation {
            value: e.value,
            gradient: DVector::from_fn(e.p, |i, _| e.gradient[i]),
            hessian: DMatrix::from_fn(e.p, e.p, |i, j| e.hessian[i][j]),
        }
    }
}

/// `m(x, θ)` for a single observation.
pub fn criterion(family: Family, x: f64, theta: &ParamPoint, cfg: &DpdConfig) -> Result<f64> {
    cfg.validate()?;
    family.check_feasible(theta)?;
    if !family.support().contains(x) {
        return Err(MdpdeError::domain(format!("{x} lies outside the {family} support")));
    }
    let c = Criterion::new(family, theta.values(), cfg.alpha, &cfg.quad)?;
    Ok(c.value(&family.kernel(x, theta.values())))
}

/// Value, gradient and Hessian of `m_n(θ)`, sharing one set of model integrals.
pub fn evaluate(family: Family, sample: &Sample, theta: &ParamPoint, cfg: &DpdConfig) -> Result<Evaluation> {
    cfg.validate()?;
    family.check_interior(theta)?;
    let c = Criterion::new(family, theta.values(), cfg.alpha, &cfg.quad)?;
    Ok(c.accumulate(family, theta.values(), sample.observations(), true).into())
}

/// `m_n(θ) = (1/n) Σ m(X_i, θ)`.
pub fn objective(family: Family, sample: &Sample, theta: &ParamPoint, cfg: &DpdConfig) -> Result<f64> {
    cfg.validate()?;
    family.check_feasible(theta)?;
    let c = Criterion::new(family, theta.values(), cfg.alpha, &cfg.quad)?;
    let t = theta.values();
    let sum: f64 = sample
        .observations()
        .iter()
        .map(|&x| c.value(&family.kernel(x, t)))
        .sum();
    Ok(sum / sample.len() as f64)
}

/// The minimizing form `∫ f^{1+α} − (1 + 1/α)(1/n) Σ f^α(X_i)`, for `α > 0`.
/// Equal to `−m_n(θ)`.
pub fn minimizing_objective(family: Family, sample: &Sample, theta: &ParamPoint, cfg: &DpdConfig) -> Result<f64> {
    cfg.validate()?;
    if cfg.alpha == 0.0 {
        return Err(MdpdeError::Config("the minimizing form needs alpha > 0".into()));
    }
    family.check_feasible(theta)?;
    let t = theta.values();
    let plain = model_terms(family, t, cfg.alpha, &cfg.quad)?.plain;
    let mean_fa = sample
        .observations()
        .iter()
        .map(|&x| (cfg.alpha * family.log_density_raw(x, t)).exp())
        .sum::<f64>()
        / sample.len() as f64;
    Ok(plain - (1.0 + 1.0 / cfg.alpha) * mean_fa)
}

pub fn objective_gradient(family: Family, sample: &Sample, theta: &ParamPoint, cfg: &DpdConfig) -> Result<DVector<f64>> {
    cfg.validate()?;
    family.check_interior(theta)?;
    let c = Criterion::new(family, theta.values(), cfg.alpha, &cfg.quad)?;
    let e = c.accumulate(family, theta.values(), sample.observations(), false);
    Ok(DVector::from_fn(e.p, |i, _| e.gradient[i]))
}

pub fn objective_hessian(family: Family, sample: &Sample, theta: &ParamPoint, cfg: &DpdConfig) -> Result<DMatrix<f64>> {
    Ok(evaluate(family, sample, theta, cfg)?.hessian)
}
