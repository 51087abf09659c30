//! Asymptotic covariance of the estimator.
//!
//! With `g` the true density, `S` the score and `i` the information matrix,
//!
//! ```text
//! U = ∫ S f^α g
//! K = ∫ S Sᵀ f^{2α} g − U Uᵀ
//! J = ∫ S Sᵀ f^{1+α} + ∫ {i − α S Sᵀ} (g − f) f^α
//! Σ = J⁻¹ K J⁻¹
//! ```
//!
//! `√n(θ̂ − θ₀)` is asymptotically `N(0, Σ)`. The population objective
//! `M(θ) = E_g m(X, θ)` is maximized at the target `θ₀` and has Hessian
//! `−(1+α) J`. The true density is represented as a finite [`Mixture`].

mod diagnostics;

pub use diagnostics::{
    diagnose_regularity, ConditionCheck, DiagnosticsConfig, DiagnosticsReport, InfoEnvelope,
    LipschitzEnvelope, ScoreBound, Verdict,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dpd::{model_terms, DpdConfig, ModelTerms, Sample};
use crate::error::{MdpdeError, Result};
use crate::family::{Family, Mixture, ParamPoint, LOG_COORD_FLOOR, LOG_DENSITY_FLOOR, MAX_DIM};
use crate::optim::{self, chain_rule};
use crate::quadrature::{integrate, Plan, QuadratureSpec};
use crate::serde_util;

/// Largest condition number of `J` accepted when forming the sandwich.
pub const MAX_CONDITION_NUMBER: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Integrals against a known true density.
    ModelBased,
    /// The empirical distribution substituted for `g`.
    Empirical,
}

/// `K`, `J`, `U` and `Σ = J⁻¹ K J⁻¹`, natural coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichCov {
    #[serde(with = "serde_util::matrix")]
    pub k: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub j: DMatrix<f64>,
    #[serde(with = "serde_util::vector")]
    pub u: DVector<f64>,
    #[serde(with = "serde_util::matrix")]
    pub sigma: DMatrix<f64>,
    pub provenance: Provenance,
    pub condition_number_j: f64,
    /// Non-fatal findings, e.g. `K` indefinite beyond rounding.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl SandwichCov {
    /// Assemble from `K`, `J`, `U`: two linear solves, no explicit inverse.
    pub fn from_parts(k: DMatrix<f64>, j: DMatrix<f64>, u: DVector<f64>, provenance: Provenance) -> Result<Self> {
        let condition_number_j = condition_number(&j);
        if !(condition_number_j < MAX_CONDITION_NUMBER) {
            return Err(MdpdeError::IllConditioned {
                message: "J is singular or ill-conditioned".into(),
                condition_number: condition_number_j,
            });
        }
        let lu = j.clone().lu();
        let jinv_k = lu.solve(&k).ok_or_else(|| MdpdeError::IllConditioned {
            message: "LU solve of J failed".into(),
            condition_number: condition_number_j,
        })?;
        let sigma_t = lu.solve(&jinv_k.transpose()).ok_or_else(|| MdpdeError::IllConditioned {
            message: "LU solve of J failed".into(),
            condition_number: condition_number_j,
        })?;
        let sigma = symmetrize(&sigma_t.transpose());
        let mut warnings = Vec::new();
        let kmin = min_eigenvalue(&k);
        if kmin < -1e-8 * k.norm().max(f64::MIN_POSITIVE) {
            warnings.push(format!("K is indefinite: smallest eigenvalue {kmin:.3e}"));
        }
        Ok(SandwichCov {
            k,
            j,
            u,
            sigma,
            provenance,
            condition_number_j,
            warnings,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.min()
}

/// Integrals against `g` at one parameter value, plus the model integrals.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PopulationTerms {
    pub p: usize,
    pub alpha: f64,
    /// `M(θ)`
    pub value: f64,
    /// `∫ |m(x, θ)| g(x) dx`
    pub abs_value: f64,
    /// `∫ S f^α g`
    pub u: [f64; MAX_DIM],
    /// `∫ S Sᵀ f^{2α} g`
    pub k_raw: [[f64; MAX_DIM]; MAX_DIM],
    /// `∫ {i − α S Sᵀ} (g − f) f^α`
    pub j_second: [[f64; MAX_DIM]; MAX_DIM],
    pub model: ModelTerms,
}

impl PopulationTerms {
    pub fn k(&self) -> DMatrix<f64> {
        let p = self.p;
        DMatrix::from_fn(p, p, |i, j| self.k_raw[i][j] - self.u[i] * self.u[j])
    }

    pub fn u(&self) -> DVector<f64> {
        DVector::from_fn(self.p, |i, _| self.u[i])
    }

    pub fn j(&self) -> DMatrix<f64> {
        let p = self.p;
        DMatrix::from_fn(p, p, |i, j| self.model.outer[i][j] + self.j_second[i][j])
    }

    pub fn gradient(&self) -> DVector<f64> {
        let a1 = 1.0 + self.alpha;
        DVector::from_fn(self.p, |i, _| {
            if self.alpha == 0.0 {
                self.u[i]
            } else {
                a1 * (self.u[i] - self.model.score[i])
            }
        })
    }

    /// `−(1+α) J`
    pub fn hessian(&self) -> DMatrix<f64> {
        self.j() * -(1.0 + self.alpha)
    }
}

/// Plan covering both `g` and the model at θ.
pub(crate) fn joint_plan(family: Family, t: &[f64], g: &Mixture, quad: &QuadratureSpec) -> Result<Plan> {
    if g.support() != family.support() {
        return Err(MdpdeError::domain(format!(
            "true density and {family} model have different supports"
        )));
    }
    let mut anchors = g.anchors(quad.tail_mass);
    anchors.push(family.anchor(t, quad.tail_mass));
    Plan::new(family.support(), &anchors, quad)
}

pub(crate) fn population_terms(
    family: Family,
    t: &[f64],
    alpha: f64,
    g: &Mixture,
    plan: &Plan,
    quad: &QuadratureSpec,
) -> Result<PopulationTerms> {
    let p = family.dim();
    let model = model_terms(family, t, alpha, quad)?;
    let plain = model.plain;
    let m = 2 + p + 2 * p * p;
    let r = integrate(plan, quad, m, |x, out| {
        let k = family.kernel(x, t);
        let gx = g.density(x);
        let fa = (alpha * k.log_f).exp();
        let fx = k.log_f.exp();
        let crit = if alpha == 0.0 {
            k.log_f.max(LOG_DENSITY_FLOOR)
        } else {
            (1.0 + 1.0 / alpha) * fa
        };
        let m_x = if alpha == 0.0 { crit } else { crit - plain };
        out[0] = crit * gx;
        out[1] = m_x.abs() * gx;
        for i in 0..p {
            out[2 + i] = k.score[i] * fa * gx;
            for j in 0..p {
                let ss = k.score[i] * k.score[j];
                out[2 + p + i * p + j] = ss * fa * fa * gx;
                out[2 + p + p * p + i * p + j] = (k.info[i][j] - alpha * ss) * (gx - fx) * fa;
            }
        }
    })?;
    let v = r.value;
    let value = if alpha == 0.0 { v[0] } else { v[0] - plain };
    let mut terms = PopulationTerms {
        p,
        alpha,
        value,
        abs_value: v[1],
        u: [0.0; MAX_DIM],
        k_raw: [[0.0; MAX_DIM]; MAX_DIM],
        j_second: [[0.0; MAX_DIM]; MAX_DIM],
        model,
    };
    for i in 0..p {
        terms.u[i] = v[2 + i];
        for j in 0..p {
            terms.k_raw[i][j] = 0.5 * (v[2 + p + i * p + j] + v[2 + p + j * p + i]);
            terms.j_second[i][j] =
                0.5 * (v[2 + p + p * p + i * p + j] + v[2 + p + p * p + j * p + i]);
        }
    }
    if !terms.abs_value.is_finite() {
        return Err(MdpdeError::domain(
            "criterion is not integrable against g at this parameter",
        ));
    }
    Ok(terms)
}

fn terms_at(family: Family, theta: &ParamPoint, g: &Mixture, cfg: &DpdConfig) -> Result<PopulationTerms> {
    cfg.validate()?;
    family.check_interior(theta)?;
    let plan = joint_plan(family, theta.values(), g, &cfg.quad)?;
    population_terms(family, theta.values(), cfg.alpha, g, &plan, &cfg.quad)
}

/// `M(θ) = (1 + 1/α) ∫ f^α g − ∫ f^{1+α}` (or `∫ g log f` at `α = 0`).
///
/// A quadrature failure here means `∫ |m| g` could not be certified finite, so
/// θ is reported as outside the integrability set.
pub fn population_objective(family: Family, theta: &ParamPoint, g: &Mixture, cfg: &DpdConfig) -> Result<f64> {
    match terms_at(family, theta, g, cfg) {
        Ok(t) => Ok(t.value),
        Err(MdpdeError::Numerical { message, error_estimate }) => Err(MdpdeError::Numerical {
            message: format!("θ = {theta} appears outside the integrability set: {message}"),
            error_estimate,
        }),
        Err(e) => Err(e),
    }
}

/// `K_α(θ)` together with `U_α(θ)`.
pub fn compute_k(family: Family, theta: &ParamPoint, g: &Mixture, cfg: &DpdConfig) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let t = terms_at(family, theta, g, cfg)?;
    Ok((symmetrize(&t.k()), t.u()))
}

pub fn compute_j(family: Family, theta: &ParamPoint, g: &Mixture, cfg: &DpdConfig) -> Result<DMatrix<f64>> {
    Ok(terms_at(family, theta, g, cfg)?.j())
}

/// The second integral of `J`, `∫ {i − α S Sᵀ} (g − f) f^α`, which vanishes
/// when `g` is the model at θ.
pub fn j_misspecification_term(family: Family, theta: &ParamPoint, g: &Mixture, cfg: &DpdConfig) -> Result<DMatrix<f64>> {
    let t = terms_at(family, theta, g, cfg)?;
    let p = t.p;
    Ok(DMatrix::from_fn(p, p, |i, j| t.j_second[i][j]))
}

/// Model-based sandwich at θ under the true density `g`.
pub fn sandwich(family: Family, theta: &ParamPoint, g: &Mixture, cfg: &DpdConfig) -> Result<SandwichCov> {
    let t = terms_at(family, theta, g, cfg)?;
    SandwichCov::from_parts(symmetrize(&t.k()), t.j(), t.u(), Provenance::ModelBased)
}

/// Sandwich with the empirical distribution in place of `g`; model integrals
/// stay exact.
pub fn empirical_sandwich(family: Family, theta: &ParamPoint, sample: &Sample, cfg: &DpdConfig) -> Result<SandwichCov> {
    cfg.validate()?;
    family.check_interior(theta)?;
    let p = family.dim();
    if sample.len() < p + 1 {
        return Err(MdpdeError::InsufficientData {
            needed: p + 1,
            got: sample.len(),
        });
    }
    let alpha = cfg.alpha;
    let t = theta.values();
    let model = model_terms(family, t, alpha, &cfg.quad)?;
    let mut u = [0.0; MAX_DIM];
    let mut k_raw = [[0.0; MAX_DIM]; MAX_DIM];
    let mut j_data = [[0.0; MAX_DIM]; MAX_DIM];
    for &x in sample.observations() {
        let k = family.kernel(x, t);
        let fa = (alpha * k.log_f).exp();
        for i in 0..p {
            u[i] += k.score[i] * fa;
            for j in 0..p {
                let ss = k.score[i] * k.score[j];
                k_raw[i][j] += ss * fa * fa;
                j_data[i][j] += (k.info[i][j] - alpha * ss) * fa;
            }
        }
    }
    let n = sample.len() as f64;
    let u = DVector::from_fn(p, |i, _| u[i] / n);
    let kmat = DMatrix::from_fn(p, p, |i, j| k_raw[i][j] / n - u[i] * u[j]);
    let jmat = DMatrix::from_fn(p, p, |i, j| {
        model.outer[i][j] + j_data[i][j] / n - (model.info[i][j] - alpha * model.outer[i][j])
    });
    SandwichCov::from_parts(symmetrize(&kmat), symmetrize(&jmat), u, Provenance::Empirical)
}

/// The target parameter: the maximizer of `M(θ)`. Equal to the model parameter
/// when `g` is a member of the family; otherwise found by a grid search in
/// transformed coordinates refined by Newton/BFGS on the analytic gradient.
pub fn target_parameter(family: Family, g: &Mixture, cfg: &DpdConfig) -> Result<ParamPoint> {
    cfg.validate()?;
    if let Some(theta) = g.as_member_of(family) {
        return Ok(theta.clone());
    }
    let center = g
        .components()
        .iter()
        .filter(|c| c.family == family)
        .max_by(|a, b| a.weight.total_cmp(&b.weight))
        .map(|c| c.theta.clone())
        .ok_or_else(|| {
            MdpdeError::Config(format!("no component of the true density belongs to {family}"))
        })?;
    let eta0 = family.to_transformed(&center)?;
    let p = family.dim();

    // grid search
    let half_width = 1.5;
    let steps = 15usize;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let total = steps.pow(p as u32);
    for idx in 0..total {
        let mut eta = eta0.clone();
        let mut rem = idx;
        for c in 0..p {
            let k = rem % steps;
            rem /= steps;
            eta[c] += -half_width + 2.0 * half_width * k as f64 / (steps - 1) as f64;
        }
        let theta = family.from_transformed(&eta);
        if let Ok(v) = population_objective(family, &theta, g, cfg) {
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, eta));
            }
        }
    }
    let (_, start) = best.ok_or_else(|| MdpdeError::numerical("population objective undefined on the search grid", f64::NAN))?;

    let lower: Vec<f64> = family
        .log_coordinates()
        .iter()
        .map(|&log| if log { LOG_COORD_FLOOR } else { f64::NEG_INFINITY })
        .collect();
    let opts = optim::Options {
        max_iter: 200,
        grad_tol: 1e-11,
        step_tol: 1e-15,
        lower,
        newton_switch: 1e-2,
        max_step: 1.0,
    };
    let out = optim::maximize(
        |eta| {
            let theta = family.from_transformed(eta);
            let t = terms_at(family, &theta, g, cfg)?;
            let (gradient, hessian) = chain_rule(
                &family.transform_jacobian(&theta),
                &family.transform_curvature(&theta),
                &t.gradient(),
                &t.hessian(),
            );
            Ok(optim::Point {
                value: t.value,
                gradient,
                hessian,
            })
        },
        start,
        &opts,
    )?;
    if !out.converged || out.at_bound {
        return Err(MdpdeError::NonConvergence {
            traces: vec![format!("target parameter search: {}", out.message)],
        });
    }
    Ok(family.from_transformed(&out.x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn normal(mu: f64, sigma: f64) -> ParamPoint {
        Family::Normal.point(&[mu, sigma]).unwrap()
    }

    #[test]
    fn mle_reduction_at_model() {
        let theta = normal(0.5, 2.0);
        let g = Mixture::single(Family::Normal, theta.clone()).unwrap();
        let cfg = DpdConfig::new(0.0).unwrap();
        let s = sandwich(Family::Normal, &theta, &g, &cfg).unwrap();
        // Fisher information of N(mu, sigma) is diag(1/σ², 2/σ²)
        let fisher = DMatrix::from_row_slice(2, 2, &[0.25, 0.0, 0.0, 0.5]);
        assert!((&s.k - &fisher).norm() / fisher.norm() < 1e-9);
        assert!((&s.j - &fisher).norm() / fisher.norm() < 1e-9);
        assert!((&s.k - &s.j).norm() / s.j.norm() < 1e-8);
        assert!(s.u.norm() < 1e-12);
        let inv = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 2.0]);
        assert!((&s.sigma - &inv).norm() / inv.norm() < 1e-8);
    }

    #[test]
    fn exponential_unit_rate() {
        let theta = Family::Exponential.point(&[1.0]).unwrap();
        let g = Mixture::single(Family::Exponential, theta.clone()).unwrap();
        let cfg = DpdConfig::new(0.0).unwrap();
        let (k, u) = compute_k(Family::Exponential, &theta, &g, &cfg).unwrap();
        assert_relative_eq!(k[(0, 0)], 1.0, max_relative = 1e-9);
        assert!(u[0].abs() < 1e-12);
        let s = sandwich(Family::Exponential, &theta, &g, &cfg).unwrap();
        assert_relative_eq!(s.sigma[(0, 0)], 1.0, max_relative = 1e-9);
    }

    #[test]
    fn j_second_term_vanishes_at_model() {
        for (fam, t) in [
            (Family::Normal, vec![0.0, 1.0]),
            (Family::Gpd, vec![1.0, 0.3]),
            (Family::Poisson, vec![4.0]),
        ] {
            let theta = ParamPoint::new(t);
            let g = Mixture::single(fam, theta.clone()).unwrap();
            for alpha in [0.0, 0.5, 1.0] {
                let cfg = DpdConfig::new(alpha).unwrap();
                let second = j_misspecification_term(fam, &theta, &g, &cfg).unwrap();
                assert!(second.norm() < 1e-13, "{fam} alpha {alpha}: {second}");
                let j = compute_j(fam, &theta, &g, &cfg).unwrap();
                let outer = match crate::dpd::integral_term(fam, &theta, alpha, crate::dpd::IntegralKind::ScoreOuterPower, &cfg.quad).unwrap() {
                    crate::dpd::IntegralValue::Matrix(m) => m,
                    _ => unreachable!(),
                };
                assert!((&j - &outer).norm() <= 1e-13 * outer.norm().max(1.0));
            }
        }
    }

    #[test]
    fn population_objective_at_model() {
        let theta = normal(0.0, 1.0);
        let g = Mixture::single(Family::Normal, theta.clone()).unwrap();
        let cfg = DpdConfig::new(0.5).unwrap();
        let m0 = population_objective(Family::Normal, &theta, &g, &cfg).unwrap();
        let plain = (2.0 * std::f64::consts::PI).powf(-0.25) / 1.5f64.sqrt();
        assert_relative_eq!(m0, plain / 0.5, max_relative = 1e-9);
        for dm in [-0.2, -0.1, 0.0, 0.1, 0.2] {
            for ds in [-0.2, -0.1, 0.0, 0.1, 0.2] {
                let v = population_objective(Family::Normal, &normal(dm, 1.0 + ds), &g, &cfg).unwrap();
                assert!(v <= m0 + 1e-14);
            }
        }
    }

    #[test]
    fn sandwich_pieces_are_consistent() {
        let g = Mixture::contaminated(Family::Normal, normal(0.0, 1.0), 0.1, Family::Normal, normal(10.0, 1.0)).unwrap();
        let cfg = DpdConfig::new(0.5).unwrap();
        let theta = normal(0.05, 1.05);
        let s = sandwich(Family::Normal, &theta, &g, &cfg).unwrap();
        let lhs = &s.sigma * &s.j;
        let rhs = s.j.clone().lu().solve(&s.k).unwrap();
        assert!((&lhs - &rhs).norm() < 1e-10 * rhs.norm());
        assert!(min_eigenvalue(&s.k) > 0.0);
        assert!(min_eigenvalue(&s.sigma) > 0.0);
        assert!(s.warnings.is_empty());
    }

    #[test]
    fn sandwich_is_stable_under_node_doubling() {
        let theta = Family::Gpd.point(&[1.0, 0.25]).unwrap();
        let g = Mixture::single(Family::Gpd, theta.clone()).unwrap();
        let cfg = DpdConfig::new(0.5).unwrap();
        let a = sandwich(Family::Gpd, &theta, &g, &cfg).unwrap();
        let b = sandwich(Family::Gpd, &theta, &g, &cfg.with_quad(cfg.quad.with_nodes(64))).unwrap();
        assert!((&a.sigma - &b.sigma).norm() < 10.0 * cfg.quad.rel_tol * a.sigma.norm());
    }

    #[test]
    fn singular_j_is_rejected() {
        let k = DMatrix::identity(2, 2);
        let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            SandwichCov::from_parts(k, j, DVector::zeros(2), Provenance::ModelBased),
            Err(MdpdeError::IllConditioned { .. })
        ));
    }

    #[test]
    fn empirical_sandwich_preconditions() {
        let s = Sample::new(Family::Normal, vec![0.1, 0.2]).unwrap();
        let cfg = DpdConfig::new(0.5).unwrap();
        assert!(matches!(
            empirical_sandwich(Family::Normal, &normal(0.0, 1.0), &s, &cfg),
            Err(MdpdeError::InsufficientData { needed: 3, got: 2 })
        ));
        let xs = vec![0.1, -0.5, 1.2, 0.8, -1.9];
        let mut doubled = xs.clone();
        doubled.extend_from_slice(&xs);
        let a = empirical_sandwich(Family::Normal, &normal(0.0, 1.0), &Sample::new(Family::Normal, xs).unwrap(), &cfg).unwrap();
        let b = empirical_sandwich(Family::Normal, &normal(0.0, 1.0), &Sample::new(Family::Normal, doubled).unwrap(), &cfg).unwrap();
        assert!((&a.sigma - &b.sigma).norm() < 1e-12 * a.sigma.norm());
    }

    #[test]
    fn target_under_contamination_moves_little() {
        let g = Mixture::contaminated(Family::Normal, normal(0.0, 1.0), 0.1, Family::Normal, normal(10.0, 1.0)).unwrap();
        let cfg = DpdConfig::new(0.5).unwrap();
        let t0 = target_parameter(Family::Normal, &g, &cfg).unwrap();
        // robust projection stays near the clean component
        assert!(t0.values()[0].abs() < 0.05, "{t0}");
        assert!((t0.values()[1] - 1.0).abs() < 0.1, "{t0}");
        let t = terms_at(Family::Normal, &t0, &g, &cfg).unwrap();
        assert!(t.gradient().norm() < 1e-10);
    }
}
