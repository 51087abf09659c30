//! Numerical fitting: multi-start maximization of the empirical criterion in
//! transformed coordinates, with sandwich standard errors.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::asymptotics::{empirical_sandwich, SandwichCov};
use crate::dpd::{self, Criterion, DpdConfig, Sample};
use crate::error::{MdpdeError, Result};
use crate::family::{Family, ParamPoint, LOG_COORD_FLOOR};
use crate::optim::{self, chain_rule, Outcome};
use crate::quadrature::QuadratureSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub starts: usize,
    pub max_iter: usize,
    /// Gradient norm, in transformed coordinates, that counts as converged.
    pub grad_tol: f64,
    pub step_tol: f64,
    /// Seed for the perturbed starts.
    pub seed: u64,
    /// Standard deviation of start perturbations in transformed coordinates.
    pub perturbation: f64,
    /// Gradient norm below which Newton steps are tried.
    pub newton_switch: f64,
    pub wald_level: f64,
    /// Distance (transformed coordinates) within which two starts agree.
    pub agree_tol: f64,
    /// Compute the empirical sandwich and standard errors.
    pub standard_errors: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            starts: 5,
            max_iter: 200,
            grad_tol: 1e-8,
            step_tol: 1e-14,
            seed: 0,
            perturbation: 0.5,
            newton_switch: 1e-3,
            wald_level: 0.95,
            agree_tol: 1e-6,
            standard_errors: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.starts == 0 {
            return Err(MdpdeError::Config("starts must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(MdpdeError::Config("max_iter must be at least 1".into()));
        }
        for (name, v) in [
            ("grad_tol", self.grad_tol),
            ("step_tol", self.step_tol),
            ("perturbation", self.perturbation),
            ("newton_switch", self.newton_switch),
            ("agree_tol", self.agree_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MdpdeError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.wald_level > 0.0 && self.wald_level < 1.0) {
            return Err(MdpdeError::Config(format!(
                "wald_level must lie in (0, 1), got {}",
                self.wald_level
            )));
        }
        Ok(())
    }
}

/// What happened to one optimizer start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartTrace {
    pub start: ParamPoint,
    pub theta: ParamPoint,
    /// `None` when the value or gradient was not finite.
    pub value: Option<f64>,
    pub gradient_norm: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub at_bound: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub family: Family,
    pub alpha: f64,
    pub n: usize,
    pub theta_hat: ParamPoint,
    pub objective_value: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    /// The maximizer sits on the lower bound of a log coordinate.
    pub boundary: bool,
    pub n_starts_agreeing: usize,
    pub starts: Vec<StartTrace>,
    pub sandwich: Option<SandwichCov>,
    pub standard_errors: Option<Vec<f64>>,
    pub wald_level: f64,
    pub wald_intervals: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

fn lower_bounds(family: Family) -> Vec<f64> {
    family
        .log_coordinates()
        .iter()
        .map(|&log| if log { LOG_COORD_FLOOR } else { f64::NEG_INFINITY })
        .collect()
}

fn run_start(
    family: Family,
    data: &[f64],
    alpha: f64,
    quad: &QuadratureSpec,
    fit_cfg: &FitConfig,
    eta0: DVector<f64>,
) -> Result<Outcome> {
    let opts = optim::Options {
        max_iter: fit_cfg.max_iter,
        grad_tol: fit_cfg.grad_tol,
        step_tol: fit_cfg.step_tol,
        lower: lower_bounds(family),
        newton_switch: fit_cfg.newton_switch,
        max_step: 1.0,
    };
    optim::maximize(
        |eta| {
            let theta = family.from_transformed(eta);
            let t = theta.values();
            let crit = Criterion::new(family, t, alpha, quad)?;
            let e = dpd::Evaluation::from(crit.accumulate(family, t, data, true));
            let (gradient, hessian) = chain_rule(
                &family.transform_jacobian(&theta),
                &family.transform_curvature(&theta),
                &e.gradient,
                &e.hessian,
            );
            Ok(optim::Point {
                value: e.value,
                gradient,
                hessian,
            })
        },
        eta0,
        &opts,
    )
}

fn trace(family: Family, start: &DVector<f64>, out: &Result<Outcome>) -> StartTrace {
    let start = family.from_transformed(start);
    match out {
        Ok(o) => StartTrace {
            start,
            theta: family.from_transformed(&o.x),
            value: Some(o.value).filter(|v| v.is_finite()),
            gradient_norm: Some(o.grad_norm).filter(|v| v.is_finite()),
            iterations: o.iterations,
            converged: o.converged,
            at_bound: o.at_bound,
            message: o.message.clone(),
        },
        Err(e) => StartTrace {
            theta: start.clone(),
            start,
            value: None,
            gradient_norm: None,
            iterations: 0,
            converged: false,
            at_bound: false,
            message: e.to_string(),
        },
    }
}

/// Maximum likelihood in transformed coordinates, from the moment guess.
fn mle_eta(family: Family, data: &[f64], quad: &QuadratureSpec, fit_cfg: &FitConfig) -> Result<DVector<f64>> {
    let guess = family.to_transformed(&family.initial_guess(data))?;
    match run_start(family, data, 0.0, quad, fit_cfg, guess.clone()) {
        Ok(o) if o.value.is_finite() => Ok(o.x),
        _ => Ok(guess),
    }
}

fn check_sample(family: Family, sample: &Sample) -> Result<()> {
    let p = family.dim();
    if sample.len() < p + 1 {
        return Err(MdpdeError::InsufficientData {
            needed: p + 1,
            got: sample.len(),
        });
    }
    Ok(())
}

/// Fits the minimum density power divergence estimator.
///
/// Start 1 is the maximum likelihood estimate; the others perturb it in
/// transformed coordinates with seeded draws. The best converged start wins,
/// ties (within 1e-10 in objective) going to the one closest to the MLE.
pub fn fit(family: Family, sample: &Sample, cfg: &DpdConfig, fit_cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    fit_cfg.validate()?;
    check_sample(family, sample)?;
    let mle = mle_eta(family, sample.observations(), &cfg.quad, fit_cfg)?;
    fit_with_anchor(family, sample, cfg, fit_cfg, &mle, None)
}

fn fit_with_anchor(
    family: Family,
    sample: &Sample,
    cfg: &DpdConfig,
    fit_cfg: &FitConfig,
    mle: &DVector<f64>,
    warm: Option<&DVector<f64>>,
) -> Result<FitResult> {
    let data = sample.observations();
    let alpha = cfg.alpha;
    let lower = lower_bounds(family);

    let mut starts = vec![mle.clone()];
    if let Some(w) = warm {
        starts.push(w.clone());
    }
    for k in 1..fit_cfg.starts {
        let mut rng = ChaCha8Rng::seed_from_u64(fit_cfg.seed);
        rng.set_stream(k as u64);
        let mut eta = mle.clone();
        for (v, lo) in eta.iter_mut().zip(&lower) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + fit_cfg.perturbation * z).max(*lo);
        }
        starts.push(eta);
    }

    let outcomes: Vec<Result<Outcome>> = starts
        .par_iter()
        .map(|s| run_start(family, data, alpha, &cfg.quad, fit_cfg, s.clone()))
        .collect();
    let traces: Vec<StartTrace> = starts
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| trace(family, s, o))
        .collect();

    let converged: Vec<&Outcome> = outcomes
        .iter()
        .filter_map(|o| o.as_ref().ok())
        .filter(|o| o.converged && o.value.is_finite())
        .collect();
    if converged.is_empty() {
        return Err(MdpdeError::NonConvergence {
            traces: traces
                .iter()
                .enumerate()
                .map(|(i, t)| format!("start {} at {}: {}", i + 1, t.start, t.message))
                .collect(),
        });
    }
    let top = converged.iter().map(|o| o.value).fold(f64::NEG_INFINITY, f64::max);
    let best = converged
        .iter()
        .filter(|o| o.value >= top - 1e-10)
        .min_by(|a, b| (&a.x - mle).norm().total_cmp(&(&b.x - mle).norm()))
        .expect("at least one converged start");
    let n_starts_agreeing = converged
        .iter()
        .filter(|o| (&o.x - &best.x).norm() <= fit_cfg.agree_tol)
        .count();

    let theta_hat = family.from_transformed(&best.x);
    let objective_value = dpd::objective(family, sample, &theta_hat, cfg)?;
    let mut warnings = Vec::new();
    if n_starts_agreeing < converged.len() {
        warnings.push(format!(
            "{} of {} converged starts reached a different local maximum",
            converged.len() - n_starts_agreeing,
            converged.len()
        ));
    }
    if best.at_bound {
        warnings.push("a log coordinate reached its lower bound; the data may be degenerate".into());
    }

    let n = sample.len();
    let (sandwich, standard_errors, wald_intervals) = if fit_cfg.standard_errors {
        match empirical_sandwich(family, &theta_hat, sample, cfg) {
            Ok(s) => {
                let se: Vec<f64> = (0..s.dim()).map(|i| (s.sigma[(i, i)] / n as f64).sqrt()).collect();
                let z = Normal::standard().inverse_cdf(0.5 + 0.5 * fit_cfg.wald_level);
                let ci = theta_hat
                    .values()
                    .iter()
                    .zip(&se)
                    .map(|(t, s)| [t - z * s, t + z * s])
                    .collect();
                (Some(s), Some(se), Some(ci))
            }
            Err(e) => {
                warnings.push(format!("standard errors unavailable: {e}"));
                (None, None, None)
            }
        }
    } else {
        (None, None, None)
    };

    Ok(FitResult {
        family,
        alpha,
        n,
        theta_hat,
        objective_value,
        gradient_norm: best.grad_norm,
        converged: true,
        boundary: best.at_bound,
        n_starts_agreeing,
        starts: traces,
        sandwich,
        standard_errors,
        wald_level: fit_cfg.wald_level,
        wald_intervals,
        warnings,
    })
}

/// Fits along an ascending α grid, warm-starting each fit from the previous
/// estimate. A failure at one α is recorded and the path continues.
pub fn fit_path(
    family: Family,
    sample: &Sample,
    alpha_grid: &[f64],
    quad: &QuadratureSpec,
    fit_cfg: &FitConfig,
) -> Result<Vec<Result<FitResult>>> {
    if alpha_grid.is_empty() {
        return Err(MdpdeError::Config("alpha grid is empty".into()));
    }
    if alpha_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(MdpdeError::Config("alpha grid must be strictly ascending".into()));
    }
    fit_cfg.validate()?;
    check_sample(family, sample)?;
    let mle = mle_eta(family, sample.observations(), quad, fit_cfg)?;
    let mut warm: Option<DVector<f64>> = None;
    let mut out = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let result = DpdConfig::new(alpha).and_then(|cfg| {
            let cfg = cfg.with_quad(*quad);
            fit_with_anchor(family, sample, &cfg, fit_cfg, &mle, warm.as_ref())
        });
        if let Ok(r) = &result {
            warm = family.to_transformed(&r.theta_hat).ok();
        }
        out.push(result);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const FIXTURE: [f64; 20] = [
        0.31, -1.12, 0.57, 1.84, -0.43, 0.09, 2.21, -0.78, 0.66, -1.59, 0.12, 0.95, -0.27, 1.38, -2.04, 0.48,
        -0.61, 0.83, 3.95, -0.15,
    ];

    fn normal_fit(data: &[f64], alpha: f64) -> FitResult {
        let s = Sample::new(Family::Normal, data.to_vec()).unwrap();
        fit(Family::Normal, &s, &DpdConfig::new(alpha).unwrap(), &FitConfig::default()).unwrap()
    }

    #[test]
    fn mle_normal_closed_form() {
        let r = normal_fit(&FIXTURE, 0.0);
        assert_relative_eq!(r.theta_hat.values()[0], 0.32, epsilon = 1e-8);
        assert_relative_eq!(r.theta_hat.values()[1], 1.334810848023045, epsilon = 1e-8);
        assert_relative_eq!(r.objective_value, -1.7077281281442283, epsilon = 1e-10);
        assert!(r.converged && !r.boundary);
        assert_eq!(r.n_starts_agreeing, 5);
    }

    #[test]
    fn normal_half_matches_grid_oracle() {
        let r = normal_fit(&FIXTURE, 0.5);
        assert!((r.theta_hat.values()[0] - 0.1669643382057833).abs() < 1e-6);
        assert!((r.theta_hat.values()[1] - 1.1539118470968635).abs() < 1e-6);
        assert!((r.objective_value - 0.9223732929545405).abs() < 1e-8);
        let se = r.standard_errors.as_ref().unwrap();
        let s = r.sandwich.as_ref().unwrap();
        for i in 0..2 {
            assert_relative_eq!(se[i], (s.sigma[(i, i)] / 20.0).sqrt(), max_relative = 1e-15);
            let [lo, hi] = r.wald_intervals.as_ref().unwrap()[i];
            assert!(lo < r.theta_hat.values()[i] && r.theta_hat.values()[i] < hi);
        }
    }

    #[test]
    fn mle_exponential_closed_form() {
        let data = vec![0.2, 1.7, 0.45, 3.1, 0.9, 0.05, 1.2];
        let s = Sample::new(Family::Exponential, data.clone()).unwrap();
        let r = fit(Family::Exponential, &s, &DpdConfig::new(0.0).unwrap(), &FitConfig::default()).unwrap();
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        assert_relative_eq!(r.theta_hat.values()[0], 1.0 / mean, epsilon = 1e-8);
    }

    #[test]
    fn objective_value_is_self_consistent() {
        let r = normal_fit(&FIXTURE, 0.25);
        let s = Sample::new(Family::Normal, FIXTURE.to_vec()).unwrap();
        let v = dpd::objective(Family::Normal, &s, &r.theta_hat, &DpdConfig::new(0.25).unwrap()).unwrap();
        assert_eq!(v, r.objective_value);
        let h = dpd::objective_hessian(Family::Normal, &s, &r.theta_hat, &DpdConfig::new(0.25).unwrap()).unwrap();
        assert!(crate::asymptotics::min_eigenvalue(&-h) > 0.0);
    }

    #[test]
    fn too_few_observations() {
        let s = Sample::new(Family::Normal, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            fit(Family::Normal, &s, &DpdConfig::new(0.5).unwrap(), &FitConfig::default()),
            Err(MdpdeError::InsufficientData { needed: 3, got: 2 })
        ));
    }

    #[test]
    fn degenerate_sample_hits_boundary() {
        let s = Sample::new(Family::Normal, vec![2.0; 10]).unwrap();
        let r = fit(Family::Normal, &s, &DpdConfig::new(0.5).unwrap(), &FitConfig::default()).unwrap();
        assert!(r.boundary);
        assert_relative_eq!(r.theta_hat.values()[0], 2.0, epsilon = 1e-8);
    }

    #[test]
    fn nonconvergence_reports_traces() {
        let s = Sample::new(Family::Normal, FIXTURE.to_vec()).unwrap();
        let cfg = FitConfig {
            max_iter: 1,
            starts: 2,
            ..FitConfig::default()
        };
        match fit(Family::Normal, &s, &DpdConfig::new(0.5).unwrap(), &cfg) {
            Err(MdpdeError::NonConvergence { traces }) => assert_eq!(traces.len(), 2),
            other => panic!("expected nonconvergence, got {other:?}"),
        }
    }

    #[test]
    fn path_matches_cold_starts() {
        let s = Sample::new(Family::Normal, FIXTURE.to_vec()).unwrap();
        let grid = [0.0, 0.25, 0.5, 1.0];
        let path = fit_path(Family::Normal, &s, &grid, &QuadratureSpec::default(), &FitConfig::default()).unwrap();
        for (alpha, r) in grid.iter().zip(&path) {
            let warm = r.as_ref().unwrap();
            let cold = normal_fit(&FIXTURE, *alpha);
            for i in 0..2 {
                assert!((warm.theta_hat.values()[i] - cold.theta_hat.values()[i]).abs() < 1e-6);
            }
        }
        assert!(fit_path(Family::Normal, &s, &[0.5, 0.25], &QuadratureSpec::default(), &FitConfig::default()).is_err());
    }

    #[test]
    fn contamination_pulls_mle_not_mdpde() {
        let mut data = FIXTURE[..18].to_vec();
        data.extend_from_slice(&[10.0, 10.1]);
        let mle = normal_fit(&data, 0.0);
        let robust = normal_fit(&data, 1.0);
        assert!(robust.theta_hat.values()[0].abs() < mle.theta_hat.values()[0].abs());
    }
}
