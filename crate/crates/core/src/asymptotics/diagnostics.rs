//! Numerical checks of the regularity conditions behind the asymptotic theory.
//!
//! These are diagnostics, not proofs: every finding is a pass/warn verdict and
//! nothing here fails hard once the inputs are valid.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{joint_plan, population_terms};
use crate::dpd::{integral_term_by_quadrature, Criterion, DpdConfig, IntegralKind, IntegralValue};
use crate::error::{MdpdeError, Result};
use crate::family::{Family, Mixture, ParamPoint, MAX_DIM};
use crate::quadrature::{integrate, QuadratureSpec};
use crate::serde_util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnosticsConfig {
    /// Relative error allowed in the Hessian identity.
    pub hessian_tol: f64,
    /// Discrepancy allowed between the finite-difference and integrated
    /// derivative of `∫ f^{1+α}`.
    pub interchange_tol: f64,
    /// Relative change of the running sup below which it counts as settled.
    pub sup_rel_change: f64,
    /// Consecutive growing doublings that flag a sup as unbounded.
    pub growth_doublings: usize,
    pub max_doublings: usize,
    /// Points per grid window.
    pub grid_points: usize,
    /// Initial half-width of the grid, in model scale units.
    pub initial_window: f64,
    pub ball_directions: usize,
    /// Ball radius as a fraction of `‖η₀‖`, with a floor.
    pub ball_radius_fraction: f64,
    pub ball_radius_floor: f64,
    /// Quadrature for the smooth integrals (Hessian identity, interchange).
    pub quad: QuadratureSpec,
    /// Quadrature for the envelope integrals, whose integrands have kinks.
    pub envelope_quad: QuadratureSpec,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            hessian_tol: 1e-3,
            interchange_tol: 1e-6,
            sup_rel_change: 1e-3,
            growth_doublings: 3,
            max_doublings: 10,
            grid_points: 4001,
            initial_window: 4.0,
            ball_directions: 32,
            ball_radius_fraction: 0.1,
            ball_radius_floor: 0.1,
            quad: QuadratureSpec::precise(),
            envelope_quad: QuadratureSpec {
                abs_tol: 1e-10,
                rel_tol: 1e-6,
                max_subdivisions: 20_000,
                ..QuadratureSpec::default()
            },
        }
    }
}

impl DiagnosticsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.hessian_tol,
            self.interchange_tol,
            self.sup_rel_change,
            self.initial_window,
            self.ball_radius_fraction,
            self.ball_radius_floor,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(MdpdeError::Config("diagnostic tolerances must be positive".into()));
        }
        if self.growth_doublings == 0 || self.max_doublings < self.growth_doublings || self.grid_points < 3 {
            return Err(MdpdeError::Config("invalid grid settings for diagnostics".into()));
        }
        if self.ball_directions < 2 {
            return Err(MdpdeError::Config("ball_directions must be at least 2".into()));
        }
        self.quad.validate()?;
        self.envelope_quad.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Warn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub name: String,
    pub verdict: Verdict,
    pub detail: String,
}

/// Grid sup of `S_j² f^{2α}` for one coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBound {
    pub coordinate: String,
    pub sup: f64,
    /// Running sup after each window.
    pub history: Vec<f64>,
    pub bounded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEnvelope {
    pub ball_radius: f64,
    pub ball_points: usize,
    /// Largest `φ(x)` over the grid window.
    pub uniform_sup: f64,
    /// `∫ φ² g`, `None` when the integral could not be certified.
    pub squared_g_integral: Option<f64>,
}

/// Envelope of one entry of the Hessian of `m` over the ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoEnvelope {
    pub row: usize,
    pub col: usize,
    pub f_integral: Option<f64>,
    pub g_integral: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub family: Family,
    pub theta: ParamPoint,
    pub alpha: f64,
    pub hessian_identity_error: Option<f64>,
    #[serde(with = "serde_util::matrix")]
    pub fd_hessian: DMatrix<f64>,
    #[serde(with = "serde_util::matrix")]
    pub identity_hessian: DMatrix<f64>,
    pub score_bounds: Vec<ScoreBound>,
    pub lipschitz: LipschitzEnvelope,
    pub interchange_error: Option<f64>,
    pub info_envelopes: Vec<InfoEnvelope>,
    pub verdicts: Vec<ConditionCheck>,
    pub config: DiagnosticsConfig,
}

impl DiagnosticsReport {
    pub fn verdict(&self, name: &str) -> Option<Verdict> {
        self.verdicts.iter().find(|c| c.name == name).map(|c| c.verdict)
    }

    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|c| c.verdict == Verdict::Pass)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "regularity diagnostics: {} at θ = {}, α = {}", self.family, self.theta, self.alpha);
        let _ = writeln!(s);
        for c in &self.verdicts {
            let tag = match c.verdict {
                Verdict::Pass => "PASS",
                Verdict::Warn => "WARN",
            };
            let _ = writeln!(s, "  [{tag}] {:<18} {}", c.name, c.detail);
        }
        let _ = writeln!(s);
        for b in &self.score_bounds {
            let _ = writeln!(
                s,
                "  sup S_{}² f^2α = {:.6e} ({}; {} windows)",
                b.coordinate,
                b.sup,
                if b.bounded { "settled" } else { "growing" },
                b.history.len()
            );
        }
        let _ = writeln!(
            s,
            "  lipschitz envelope: uniform sup {:.6e}, ∫φ²g {}",
            self.lipschitz.uniform_sup,
            fmt_opt(self.lipschitz.squared_g_integral)
        );
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "not certified".to_string(), |x| format!("{x:.6e}"))
}

fn check(name: &str, pass: bool, detail: String) -> ConditionCheck {
    ConditionCheck {
        name: name.into(),
        verdict: if pass { Verdict::Pass } else { Verdict::Warn },
        detail,
    }
}

/// Runs every check at `θ₀` under the true density `g`.
pub fn diagnose_regularity(
    family: Family,
    theta0: &ParamPoint,
    g: &Mixture,
    cfg: &DpdConfig,
    dcfg: &DiagnosticsConfig,
) -> Result<DiagnosticsReport> {
    cfg.validate()?;
    dcfg.validate()?;
    family.check_interior(theta0)?;
    if g.support() != family.support() {
        return Err(MdpdeError::domain(format!(
            "true density and {family} model have different supports"
        )));
    }
    let alpha = cfg.alpha;
    let p = family.dim();
    let mut verdicts = Vec::new();

    // Hessian identity
    let (hessian_identity_error, fd_hessian, identity_hessian) = match hessian_identity(family, theta0, g, alpha, &dcfg.quad) {
        Ok((fd, id)) => {
            let err = (&fd - &id).norm() / id.norm();
            (Some(err), fd, id)
        }
        Err(_) => (None, DMatrix::zeros(p, p), DMatrix::zeros(p, p)),
    };
    verdicts.push(check(
        "hessian_identity",
        hessian_identity_error.is_some_and(|e| e < dcfg.hessian_tol),
        format!(
            "relative error {} (tolerance {:.1e})",
            fmt_opt(hessian_identity_error),
            dcfg.hessian_tol
        ),
    ));

    // score bounds
    let score_bounds = score_bounds(family, theta0, alpha, dcfg);
    let unbounded: Vec<&str> = score_bounds
        .iter()
        .filter(|b| !b.bounded)
        .map(|b| b.coordinate.as_str())
        .collect();
    verdicts.push(check(
        "score_bound",
        unbounded.is_empty(),
        if unbounded.is_empty() {
            "S_j² f^2α settles on an expanding grid for every coordinate".into()
        } else {
            format!("grid sup keeps growing for {}", unbounded.join(", "))
        },
    ));

    // Lipschitz and Hessian envelopes over the ball
    let ball = Ball::new(family, theta0, alpha, dcfg)?;
    let lipschitz = ball.lipschitz(family, theta0, g, dcfg);
    verdicts.push(check(
        "lipschitz_envelope",
        lipschitz.squared_g_integral.is_some_and(f64::is_finite),
        format!(
            "∫φ²g {} over a ball of radius {:.3} ({} points)",
            fmt_opt(lipschitz.squared_g_integral),
            lipschitz.ball_radius,
            lipschitz.ball_points
        ),
    ));

    let interchange_error = interchange(family, theta0, alpha, &dcfg.quad).ok();
    verdicts.push(check(
        "interchange",
        interchange_error.is_some_and(|e| e < dcfg.interchange_tol),
        format!(
            "d/dθ ∫f^(1+α) discrepancy {} (tolerance {:.1e})",
            fmt_opt(interchange_error),
            dcfg.interchange_tol
        ),
    ));

    let info_envelopes = ball.info_envelopes(family, theta0, g, dcfg);
    let info_ok = info_envelopes
        .iter()
        .all(|e| e.f_integral.is_some_and(f64::is_finite) && e.g_integral.is_some_and(f64::is_finite));
    verdicts.push(check(
        "info_envelope",
        info_ok,
        if info_ok {
            "∫φ_jk f and ∫φ_jk g finite for every entry".into()
        } else {
            "an envelope integral could not be certified finite".into()
        },
    ));

    Ok(DiagnosticsReport {
        family,
        theta: theta0.clone(),
        alpha,
        hessian_identity_error,
        fd_hessian,
        identity_hessian,
        score_bounds,
        lipschitz,
        interchange_error,
        info_envelopes,
        verdicts,
        config: dcfg.clone(),
    })
}

/// Central-difference Hessian of `M` and `−(1+α) J`, both at θ₀.
fn hessian_identity(
    family: Family,
    theta0: &ParamPoint,
    g: &Mixture,
    alpha: f64,
    quad: &QuadratureSpec,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let t0 = theta0.values();
    let p = t0.len();
    // one plan for every evaluation keeps the quadrature noise smooth in θ
    let plan = joint_plan(family, t0, g, quad)?;
    let m = |t: &[f64]| -> Result<f64> { Ok(population_terms(family, t, alpha, g, &plan, quad)?.value) };
    let h: Vec<f64> = t0.iter().map(|v| 2e-3 * v.abs().max(0.1)).collect();
    let f0 = m(t0)?;
    let mut fd = DMatrix::zeros(p, p);
    let shifted = |di: f64, i: usize, dj: f64, j: usize| -> Result<f64> {
        let mut t = t0.to_vec();
        t[i] += di * h[i];
        t[j] += dj * h[j];
        m(&t)
    };
    for i in 0..p {
        let plus = shifted(1.0, i, 0.0, i)?;
        let minus = shifted(-1.0, i, 0.0, i)?;
        fd[(i, i)] = (plus - 2.0 * f0 + minus) / (h[i] * h[i]);
        for j in 0..i {
            let v = (shifted(1.0, i, 1.0, j)? - shifted(1.0, i, -1.0, j)? - shifted(-1.0, i, 1.0, j)?
                + shifted(-1.0, i, -1.0, j)?)
                / (4.0 * h[i] * h[j]);
            fd[(i, j)] = v;
            fd[(j, i)] = v;
        }
    }
    let identity = population_terms(family, t0, alpha, g, &plan, quad)?.hessian();
    Ok((fd, identity))
}

/// Five-point derivative of `∫ f^{1+α}` against `(1+α) ∫ S f^{1+α}`, both by
/// quadrature. Discrepancy is `max_j |Δ_j| / max(1, |∂_j|)`.
fn interchange(family: Family, theta0: &ParamPoint, alpha: f64, quad: &QuadratureSpec) -> Result<f64> {
    let t0 = theta0.values();
    let plain = |t: Vec<f64>| -> Result<f64> {
        match integral_term_by_quadrature(family, &ParamPoint::new(t), alpha, IntegralKind::PlainPower, quad)? {
            IntegralValue::Scalar(v) => Ok(v),
            _ => unreachable!(),
        }
    };
    let IntegralValue::Vector(score) =
        integral_term_by_quadrature(family, theta0, alpha, IntegralKind::ScorePower, quad)?
    else {
        unreachable!()
    };
    let mut worst: f64 = 0.0;
    for j in 0..t0.len() {
        let h = 1e-3 * t0[j].abs().max(0.1);
        let at = |k: f64| {
            let mut t = t0.to_vec();
            t[j] += k * h;
            plain(t)
        };
        let fd = (-at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?) / (12.0 * h);
        let exact = (1.0 + alpha) * score[j];
        worst = worst.max((fd - exact).abs() / exact.abs().max(1.0));
    }
    Ok(worst)
}

/// Grid window `[lo, hi]` of half-width `w` scale units around the model.
fn window(family: Family, t: &[f64], w: f64) -> (f64, f64) {
    let a = family.anchor(t, 1e-12);
    let support = family.support();
    let lo = (a.center - w * a.scale).max(support.lower);
    let hi = (a.center + w * a.scale).min(support.upper);
    (lo, hi)
}

fn grid(family: Family, lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if family.is_discrete() {
        let hi = hi.floor().min(1e7) as u64;
        let lo = lo.max(0.0).ceil() as u64;
        return (lo..=hi).map(|k| k as f64).collect();
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn score_bounds(family: Family, theta0: &ParamPoint, alpha: f64, dcfg: &DiagnosticsConfig) -> Vec<ScoreBound> {
    let t = theta0.values();
    let p = family.dim();
    let names = family.param_names();
    (0..p)
        .map(|j| {
            let mut history = Vec::new();
            let mut running = 0.0f64;
            let mut growth = 0;
            let mut bounded = false;
            let mut w = dcfg.initial_window;
            for _ in 0..=dcfg.max_doublings {
                let (lo, hi) = window(family, t, w);
                let sup = grid(family, lo, hi, dcfg.grid_points)
                    .into_iter()
                    .map(|x| {
                        let k = family.kernel(x, t);
                        k.score[j] * k.score[j] * (2.0 * alpha * k.log_f).exp()
                    })
                    .filter(|v| v.is_finite())
                    .fold(0.0f64, f64::max);
                let next = running.max(sup);
                if !history.is_empty() {
                    let change = (next - running) / running.max(f64::MIN_POSITIVE);
                    if change < dcfg.sup_rel_change {
                        bounded = true;
                        running = next;
                        history.push(running);
                        break;
                    }
                    growth += 1;
                }
                running = next;
                history.push(running);
                if growth >= dcfg.growth_doublings {
                    break;
                }
                w *= 2.0;
            }
            ScoreBound {
                coordinate: names[j].to_string(),
                sup: running,
                history,
                bounded,
            }
        })
        .collect()
}

/// Parameter points sampled from the ball around θ₀ in transformed
/// coordinates, each with its criterion.
struct Ball {
    points: Vec<(Vec<f64>, DVector<f64>, Criterion)>,
    radius: f64,
}

impl Ball {
    fn new(family: Family, theta0: &ParamPoint, alpha: f64, dcfg: &DiagnosticsConfig) -> Result<Ball> {
        let eta0 = family.to_transformed(theta0)?;
        let p = eta0.len();
        let radius = (dcfg.ball_radius_fraction * eta0.norm()).max(dcfg.ball_radius_floor);
        let dirs: Vec<DVector<f64>> = if p == 1 {
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)]
        } else {
            (0..dcfg.ball_directions)
                .map(|k| {
                    let a = 2.0 * PI * k as f64 / dcfg.ball_directions as f64;
                    DVector::from_vec(vec![a.cos(), a.sin()])
                })
                .collect()
        };
        let mut etas = vec![eta0.clone()];
        for r in [radius, 0.5 * radius] {
            for d in &dirs {
                etas.push(&eta0 + d * r);
            }
        }
        let points = etas
            .into_iter()
            .map(|eta| {
                let theta = family.from_transformed(&eta);
                let crit = Criterion::new(family, theta.values(), alpha, &dcfg.quad)?;
                let jac = family.transform_jacobian(&theta);
                Ok((theta.values().to_vec(), jac, crit))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Ball { points, radius })
    }

    /// `φ(x) = max over the ball of ‖D_η m(x, θ)‖`.
    fn phi(&self, family: Family, x: f64) -> f64 {
        let mut best = 0.0f64;
        for (t, jac, crit) in &self.points {
            let e = crit.accumulate(family, t, &[x], false);
            let norm = (0..e.p).map(|i| (e.gradient[i] * jac[i]).powi(2)).sum::<f64>().sqrt();
            best = best.max(norm);
        }
        best
    }

    /// `φ_jk(x) = max over the ball of |∂²m(x, θ)/∂θ_j∂θ_k|`.
    fn phi_hessian(&self, family: Family, x: f64) -> [[f64; MAX_DIM]; MAX_DIM] {
        let mut best = [[0.0f64; MAX_DIM]; MAX_DIM];
        for (t, _, crit) in &self.points {
            let e = crit.accumulate(family, t, &[x], true);
            for i in 0..e.p {
                for j in 0..e.p {
                    best[i][j] = best[i][j].max(e.hessian[i][j].abs());
                }
            }
        }
        best
    }

    fn lipschitz(&self, family: Family, theta0: &ParamPoint, g: &Mixture, dcfg: &DiagnosticsConfig) -> LipschitzEnvelope {
        let t0 = theta0.values();
        let (lo, hi) = window(family, t0, dcfg.initial_window * 2.0);
        let uniform_sup = grid(family, lo, hi, dcfg.grid_points)
            .into_iter()
            .map(|x| self.phi(family, x))
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let squared_g_integral = joint_plan(family, t0, g, &dcfg.envelope_quad)
            .and_then(|plan| {
                integrate(&plan, &dcfg.envelope_quad, 1, |x, out| {
                    let phi = self.phi(family, x);
                    out[0] = phi * phi * g.density(x);
                })
            })
            .ok()
            .map(|r| r.value[0])
            .filter(|v| v.is_finite());
        LipschitzEnvelope {
            ball_radius: self.radius,
            ball_points: self.points.len(),
            uniform_sup,
            squared_g_integral,
        }
    }

    fn info_envelopes(&self, family: Family, theta0: &ParamPoint, g: &Mixture, dcfg: &DiagnosticsConfig) -> Vec<InfoEnvelope> {
        let t0 = theta0.values();
        let p = family.dim();
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).collect();
        let result = joint_plan(family, t0, g, &dcfg.envelope_quad).and_then(|plan| {
            integrate(&plan, &dcfg.envelope_quad, 2 * pairs.len(), |x, out| {
                let phi = self.phi_hessian(family, x);
                let f = family.log_density_raw(x, t0).exp();
                let gx = g.density(x);
                for (m, &(i, j)) in pairs.iter().enumerate() {
                    out[2 * m] = phi[i][j] * f;
                    out[2 * m + 1] = phi[i][j] * gx;
                }
            })
        });
        pairs
            .iter()
            .enumerate()
            .map(|(m, &(row, col))| {
                let finite = |v: f64| Some(v).filter(|v| v.is_finite());
                let (f_integral, g_integral) = match &result {
                    Ok(r) => (finite(r.value[2 * m]), finite(r.value[2 * m + 1])),
                    Err(_) => (None, None),
                };
                InfoEnvelope {
                    row,
                    col,
                    f_integral,
                    g_integral,
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_report(alpha: f64) -> DiagnosticsReport {
        let theta = Family::Normal.point(&[0.0, 1.0]).unwrap();
        let g = Mixture::single(Family::Normal, theta.clone()).unwrap();
        diagnose_regularity(
            Family::Normal,
            &theta,
            &g,
            &DpdConfig::new(alpha).unwrap(),
            &DiagnosticsConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn normal_half_passes_everything() {
        let r = normal_report(0.5);
        assert!(r.all_pass(), "{}", r.to_text());
        assert!(r.hessian_identity_error.unwrap() < 1e-3);
        assert!(r.score_bounds.iter().all(|b| b.bounded && b.sup.is_finite()));
    }

    #[test]
    fn normal_mle_flags_score_bound_for_location() {
        let r = normal_report(0.0);
        assert_eq!(r.verdict("score_bound"), Some(Verdict::Warn));
        assert!(!r.score_bounds[0].bounded);
        assert_eq!(r.score_bounds[0].coordinate, "mu");
        // the remaining conditions still hold for the MLE
        assert_eq!(r.verdict("hessian_identity"), Some(Verdict::Pass));
        assert_eq!(r.verdict("interchange"), Some(Verdict::Pass));
    }

    #[test]
    fn report_round_trips_through_json() {
        let r = normal_report(0.5);
        let back: DiagnosticsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_text().contains("PASS"));
    }

    #[test]
    fn recorded_errors_are_nonnegative() {
        for alpha in [0.0, 0.25, 1.0] {
            let r = normal_report(alpha);
            assert!(r.hessian_identity_error.unwrap() >= 0.0);
            assert!(r.interchange_error.unwrap() >= 0.0);
            assert!(r.lipschitz.uniform_sup >= 0.0);
        }
    }

    #[test]
    fn rejects_boundary_theta() {
        let theta = ParamPoint::new(vec![0.0, 0.0]);
        let g = Mixture::single(Family::Normal, Family::Normal.point(&[0.0, 1.0]).unwrap()).unwrap();
        assert!(diagnose_regularity(
            Family::Normal,
            &theta,
            &g,
            &DpdConfig::new(0.5).unwrap(),
            &DiagnosticsConfig::default()
        )
        .is_err());
    }
}
