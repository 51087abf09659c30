//! Replicated fitting on simulated data: consistency and asymptotic normality
//! studies, and the asymptotic relative efficiency curve.
//!
//! Every replication draws from its own ChaCha stream keyed by
//! `(master_seed, cell, rep)`, and results are merged in key order, so a
//! report does not depend on how many threads produced it.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::asymptotics::{sandwich, target_parameter};
use crate::dpd::{DpdConfig, Sample};
use crate::error::{MdpdeError, Result};
use crate::estimator::{fit, FitConfig};
use crate::family::{Family, Mixture, ParamPoint};
use crate::quadrature::QuadratureSpec;
use crate::serde_util;

/// The data-generating density: a finite mixture of catalog members.
pub type DataGenerator = Mixture;

/// The RNG for one replication.
pub fn replication_rng(master_seed: u64, cell: u64, rep: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&cell.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(rep);
    rng
}

/// `n` i.i.d. draws from `gen`, reproducible from `seed`.
pub fn sample(gen: &DataGenerator, n: usize, seed: u64) -> Result<Sample> {
    draw_sample(gen, n, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn draw_sample(gen: &DataGenerator, n: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    if n == 0 {
        return Err(MdpdeError::Config("sample size must be at least 1".into()));
    }
    let family = gen.components()[0].family;
    Sample::new(family, (0..n).map(|_| gen.draw(rng)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub alphas: Vec<f64>,
    pub master_seed: u64,
    /// Target parameter; computed per α as the population argmax when absent.
    pub theta0: Option<ParamPoint>,
    pub fit: FitConfig,
    pub quad: QuadratureSpec,
    /// Largest acceptable final median error for the consistency verdict.
    pub consistency_threshold: f64,
    /// Fraction of failed replications above which a cell errors out.
    pub max_failure_rate: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_grid: vec![100, 400, 1600, 6400],
            reps: 200,
            alphas: vec![0.5],
            master_seed: 20240101,
            theta0: None,
            fit: FitConfig {
                starts: 1,
                ..FitConfig::default()
            },
            quad: QuadratureSpec::default(),
            consistency_threshold: 0.1,
            max_failure_rate: 0.02,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.contains(&0) {
            return Err(MdpdeError::Config("n grid must be nonempty with positive sizes".into()));
        }
        if self.reps == 0 {
            return Err(MdpdeError::Config("reps must be at least 1".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(MdpdeError::Config("alphas must be nonempty and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.max_failure_rate) {
            return Err(MdpdeError::Config("max_failure_rate must lie in [0, 1]".into()));
        }
        self.fit.validate()?;
        self.quad.validate()
    }

    fn cells(&self) -> Vec<(f64, usize)> {
        self.alphas
            .iter()
            .flat_map(|&a| self.n_grid.iter().map(move |&n| (a, n)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Consistency,
    Normality,
}

/// One replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRow {
    pub cell: usize,
    pub alpha: f64,
    pub n: usize,
    pub rep: usize,
    pub converged: bool,
    /// Converged, but a positive coordinate sits on its lower bound.
    #[serde(default)]
    pub boundary: bool,
    pub theta_hat: Option<Vec<f64>>,
    /// Euclidean distance to θ₀ in transformed coordinates.
    pub error: Option<f64>,
    pub standard_errors: Option<Vec<f64>>,
    pub mahalanobis2: Option<f64>,
    pub covered: Option<Vec<bool>>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub alpha: f64,
    pub n: usize,
    pub theta0: ParamPoint,
    pub reps: usize,
    /// Replications whose fit did not converge.
    pub failures: usize,
    /// Converged fits on the parameter boundary; included in the statistics.
    #[serde(default)]
    pub boundary_hits: usize,
    pub mean_estimate: Vec<f64>,
    pub median_estimate: Vec<f64>,
    pub bias: Vec<f64>,
    pub rmse: Vec<f64>,
    pub median_error: f64,
    /// Empirical covariance of `√n(θ̂ − θ₀)`.
    #[serde(with = "serde_util::matrix")]
    pub covariance: DMatrix<f64>,
    /// Model sandwich at θ₀ (normality study).
    pub sigma: Option<Vec<Vec<f64>>>,
    /// Elementwise covariance error: relative on the diagonal, on the
    /// correlation scale `|C_jk − Σ_jk| / √(Σ_jj Σ_kk)` off it.
    pub covariance_error: Option<Vec<Vec<f64>>>,
    pub max_covariance_error: Option<f64>,
    /// Kolmogorov–Smirnov distance of Mahalanobis² against chi-square(p).
    pub ks_distance: Option<f64>,
    /// Per-coordinate Wald coverage over replications with standard errors.
    pub coverage: Option<Vec<f64>>,
    pub missing_standard_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub alpha: f64,
    pub median_errors: Vec<f64>,
    pub monotone: bool,
    pub final_below_threshold: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub study: StudyKind,
    pub family: Family,
    pub generator: DataGenerator,
    pub config: McConfig,
    pub cells: Vec<CellSummary>,
    /// Per α; absent when the n grid has a single entry.
    pub verdicts: Option<Vec<ConsistencyVerdict>>,
    pub rows: Vec<RepRow>,
}

impl McReport {
    pub fn cell(&self, alpha: f64, n: usize) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.alpha == alpha && c.n == n)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per replication.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let p = self.family.dim();
        let names = self.family.param_names();
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["cell", "alpha", "n", "rep", "converged", "boundary"].iter().map(|s| s.to_string()).collect();
        header.extend(names.iter().map(|n| format!("{n}_hat")));
        header.push("error".into());
        header.push("mahalanobis2".into());
        header.extend(names.iter().map(|n| format!("{n}_se")));
        header.extend(names.iter().map(|n| format!("{n}_covered")));
        let io = |e: csv::Error| MdpdeError::Config(format!("cannot write CSV: {e}"));
        w.write_record(&header).map_err(io)?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for r in &self.rows {
            let mut rec = vec![
                r.cell.to_string(),
                r.alpha.to_string(),
                r.n.to_string(),
                r.rep.to_string(),
                r.converged.to_string(),
                r.boundary.to_string(),
            ];
            for j in 0..p {
                rec.push(opt(r.theta_hat.as_ref().map(|t| t[j])));
            }
            rec.push(opt(r.error));
            rec.push(opt(r.mahalanobis2));
            for j in 0..p {
                rec.push(opt(r.standard_errors.as_ref().map(|s| s[j])));
            }
            for j in 0..p {
                rec.push(r.covered.as_ref().map_or_else(String::new, |c| c[j].to_string()));
            }
            w.write_record(&rec).map_err(io)?;
        }
        w.flush().map_err(|e| MdpdeError::Config(format!("cannot write CSV: {e}")))?;
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory CSV");
        String::from_utf8(buf).expect("CSV is UTF-8")
    }
}

fn resolve_theta0(family: Family, gen: &DataGenerator, alpha: f64, cfg: &McConfig) -> Result<ParamPoint> {
    if let Some(t) = &cfg.theta0 {
        family.check_interior(t)?;
        return Ok(t.clone());
    }
    let dcfg = DpdConfig::new(alpha)?.with_quad(cfg.quad);
    target_parameter(family, gen, &dcfg)
}

struct CellPlan {
    alpha: f64,
    n: usize,
    theta0: ParamPoint,
    eta0: DVector<f64>,
    /// Model sandwich and its inverse, for the normality study.
    sigma: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

fn run_study(kind: StudyKind, gen: &DataGenerator, family: Family, cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    if gen.support() != family.support() {
        return Err(MdpdeError::Config(format!(
            "generator support does not match the {family} family"
        )));
    }
    let mut plans = Vec::new();
    for (cell, (alpha, n)) in cfg.cells().into_iter().enumerate() {
        let study_err = |e: MdpdeError| MdpdeError::Study {
            cell,
            message: e.to_string(),
        };
        let theta0 = resolve_theta0(family, gen, alpha, cfg).map_err(study_err)?;
        let eta0 = family.to_transformed(&theta0).map_err(study_err)?;
        let sigma = if kind == StudyKind::Normality {
            let dcfg = DpdConfig::new(alpha).map_err(study_err)?.with_quad(cfg.quad);
            let s = sandwich(family, &theta0, gen, &dcfg).map_err(study_err)?;
            let inv = s.sigma.clone().try_inverse().ok_or_else(|| MdpdeError::Study {
                cell,
                message: "model sandwich is singular".into(),
            })?;
            Some((s.sigma, inv))
        } else {
            None
        };
        plans.push(CellPlan {
            alpha,
            n,
            theta0,
            eta0,
            sigma,
        });
    }

    let z = Normal::standard().inverse_cdf(0.5 + 0.5 * cfg.fit.wald_level);
    let tasks: Vec<(usize, usize)> = (0..plans.len())
        .flat_map(|c| (0..cfg.reps).map(move |r| (c, r)))
        .collect();
    let rows: Vec<RepRow> = tasks
        .par_iter()
        .map(|&(cell, rep)| {
            let plan = &plans[cell];
            let mut rng = replication_rng(cfg.master_seed, cell as u64, rep as u64);
            replicate(kind, gen, family, cfg, plan, cell, rep, z, &mut rng)
        })
        .collect();

    let mut cells = Vec::with_capacity(plans.len());
    for (cell, plan) in plans.iter().enumerate() {
        let cell_rows: Vec<&RepRow> = rows.iter().filter(|r| r.cell == cell).collect();
        let summary = summarize(family, plan, cell, &cell_rows);
        let rate = summary.failures as f64 / cfg.reps as f64;
        if rate > cfg.max_failure_rate {
            let first = cell_rows.iter().find(|r| !r.converged).map_or("", |r| r.message.as_str());
            return Err(MdpdeError::Study {
                cell,
                message: format!(
                    "{} of {} replications failed (alpha {}, n {}); first failure: {first}",
                    summary.failures, cfg.reps, plan.alpha, plan.n
                ),
            });
        }
        cells.push(summary);
    }

    let verdicts = (cfg.n_grid.len() > 1).then(|| {
        cfg.alphas
            .iter()
            .map(|&alpha| {
                let median_errors: Vec<f64> = cells
                    .iter()
                    .filter(|c| c.alpha == alpha)
                    .map(|c| c.median_error)
                    .collect();
                let monotone = median_errors.windows(2).all(|w| w[1] < w[0]);
                let final_below_threshold = median_errors.last().is_some_and(|e| *e < cfg.consistency_threshold);
                ConsistencyVerdict {
                    alpha,
                    median_errors,
                    monotone,
                    final_below_threshold,
                    pass: monotone && final_below_threshold,
                }
            })
            .collect()
    });

    Ok(McReport {
        study: kind,
        family,
        generator: gen.clone(),
        config: cfg.clone(),
        cells,
        verdicts,
        rows,
    })
}

#[allow(clippy::too_many_arguments)]
fn replicate(
    kind: StudyKind,
    gen: &DataGenerator,
    family: Family,
    cfg: &McConfig,
    plan: &CellPlan,
    cell: usize,
    rep: usize,
    z: f64,
    rng: &mut ChaCha8Rng,
) -> RepRow {
    let mut row = RepRow {
        cell,
        alpha: plan.alpha,
        n: plan.n,
        rep,
        converged: false,
        boundary: false,
        theta_hat: None,
        error: None,
        standard_errors: None,
        mahalanobis2: None,
        covered: None,
        message: String::new(),
    };
    let fit_cfg = FitConfig {
        standard_errors: kind == StudyKind::Normality,
        ..cfg.fit.clone()
    };
    let result = draw_sample(gen, plan.n, rng).and_then(|s| {
        let dcfg = DpdConfig::new(plan.alpha)?.with_quad(cfg.quad);
        fit(family, &s, &dcfg, &fit_cfg)
    });
    let r = match result {
        Ok(r) => r,
        Err(e) => {
            row.message = e.to_string();
            return row;
        }
    };
    row.converged = true;
    if r.boundary {
        row.boundary = true;
        row.message = "estimate on the parameter boundary".into();
    }
    let theta = r.theta_hat.values();
    if let Ok(eta) = family.to_transformed(&r.theta_hat) {
        row.error = Some((eta - &plan.eta0).norm());
    }
    if let Some((_, inv)) = &plan.sigma {
        let d = DVector::from_fn(theta.len(), |i, _| {
            (plan.n as f64).sqrt() * (theta[i] - plan.theta0.values()[i])
        });
        row.mahalanobis2 = Some((d.transpose() * inv * &d)[(0, 0)]);
    }
    if let Some(se) = &r.standard_errors {
        row.covered = Some(
            theta
                .iter()
                .zip(plan.theta0.values())
                .zip(se)
                .map(|((t, t0), s)| (t - t0).abs() <= z * s)
                .collect(),
        );
        row.standard_errors = Some(se.clone());
    }
    row.theta_hat = Some(theta.to_vec());
    row
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m == 0 {
        f64::NAN
    } else if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Kolmogorov–Smirnov distance of a sample against a continuous CDF.
pub fn ks_distance(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / m).abs().max((f - (i + 1) as f64 / m).abs())
        })
        .fold(0.0, f64::max)
}

fn summarize(family: Family, plan: &CellPlan, cell: usize, rows: &[&RepRow]) -> CellSummary {
    let p = family.dim();
    let t0 = plan.theta0.values();
    let ok: Vec<&RepRow> = rows.iter().copied().filter(|r| r.converged).collect();
    let m = ok.len().max(1) as f64;
    let est = |j: usize| ok.iter().map(move |r| r.theta_hat.as_ref().expect("converged row")[j]);

    let mean_estimate: Vec<f64> = (0..p).map(|j| est(j).sum::<f64>() / m).collect();
    let median_estimate: Vec<f64> = (0..p).map(|j| median(&mut est(j).collect::<Vec<_>>())).collect();
    let bias: Vec<f64> = (0..p).map(|j| mean_estimate[j] - t0[j]).collect();
    let rmse: Vec<f64> = (0..p)
        .map(|j| (est(j).map(|t| (t - t0[j]).powi(2)).sum::<f64>() / m).sqrt())
        .collect();
    let median_error = median(&mut ok.iter().filter_map(|r| r.error).collect::<Vec<_>>());

    // covariance of √n(θ̂ − θ₀), centred at the sample mean
    let sqrt_n = (plan.n as f64).sqrt();
    let mut covariance = DMatrix::zeros(p, p);
    for r in &ok {
        let t = r.theta_hat.as_ref().expect("converged row");
        for i in 0..p {
            for j in 0..p {
                covariance[(i, j)] += sqrt_n * (t[i] - mean_estimate[i]) * sqrt_n * (t[j] - mean_estimate[j]);
            }
        }
    }
    covariance /= (ok.len().max(2) - 1) as f64;

    let mut summary = CellSummary {
        cell,
        alpha: plan.alpha,
        n: plan.n,
        theta0: plan.theta0.clone(),
        reps: rows.len(),
        failures: rows.len() - ok.len(),
        boundary_hits: ok.iter().filter(|r| r.boundary).count(),
        mean_estimate,
        median_estimate,
        bias,
        rmse,
        median_error,
        covariance,
        sigma: None,
        covariance_error: None,
        max_covariance_error: None,
        ks_distance: None,
        coverage: None,
        missing_standard_errors: ok.iter().filter(|r| r.standard_errors.is_none()).count(),
    };

    if let Some((sigma, _)) = &plan.sigma {
        let c = &summary.covariance;
        let err: Vec<Vec<f64>> = (0..p)
            .map(|i| {
                (0..p)
                    .map(|j| (c[(i, j)] - sigma[(i, j)]).abs() / (sigma[(i, i)] * sigma[(j, j)]).sqrt())
                    .collect()
            })
            .collect();
        summary.max_covariance_error = Some(err.iter().flatten().copied().fold(0.0, f64::max));
        summary.covariance_error = Some(err);
        summary.sigma = Some((0..p).map(|i| (0..p).map(|j| sigma[(i, j)]).collect()).collect());
        let chi = ChiSquared::new(p as f64).expect("positive degrees of freedom");
        let d2: Vec<f64> = ok.iter().filter_map(|r| r.mahalanobis2).collect();
        summary.ks_distance = Some(ks_distance(&d2, |x| chi.cdf(x)));
        let with_se: Vec<&Vec<bool>> = ok.iter().filter_map(|r| r.covered.as_ref()).collect();
        if !with_se.is_empty() {
            summary.coverage = Some(
                (0..p)
                    .map(|j| with_se.iter().filter(|c| c[j]).count() as f64 / with_se.len() as f64)
                    .collect(),
            );
        }
    }
    summary
}

/// Median estimation error per sample size, with a verdict when the grid has
/// more than one size.
pub fn run_consistency_study(gen: &DataGenerator, family: Family, cfg: &McConfig) -> Result<McReport> {
    run_study(StudyKind::Consistency, gen, family, cfg)
}

/// Covariance of `√n(θ̂ − θ₀)` against the model sandwich, the Mahalanobis
/// chi-square check and Wald coverage.
pub fn run_normality_study(gen: &DataGenerator, family: Family, cfg: &McConfig) -> Result<McReport> {
    run_study(StudyKind::Normality, gen, family, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub alpha: f64,
    /// `diag(Fisher⁻¹) / diag(Σ_α)` per coordinate.
    pub are: Vec<f64>,
}

/// Asymptotic relative efficiency against the MLE at the model, from
/// quadrature sandwiches only.
pub fn efficiency_curve(
    family: Family,
    theta0: &ParamPoint,
    alpha_grid: &[f64],
    quad: &QuadratureSpec,
) -> Result<Vec<EfficiencyRow>> {
    let g = Mixture::single(family, theta0.clone())?;
    let fisher_inv = sandwich(family, theta0, &g, &DpdConfig::new(0.0)?.with_quad(*quad))?.sigma;
    alpha_grid
        .iter()
        .map(|&alpha| {
            let s = sandwich(family, theta0, &g, &DpdConfig::new(alpha)?.with_quad(*quad))?.sigma;
            Ok(EfficiencyRow {
                alpha,
                are: (0..family.dim()).map(|j| fisher_inv[(j, j)] / s[(j, j)]).collect(),
            })
        })
        .collect()
}
