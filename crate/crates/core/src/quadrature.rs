//! Quadrature over a family's support.
//!
//! Continuous supports are split at breakpoints placed around every density
//! involved in the integrand (center ± fractions of a window of `window_sds`
//! scale units). Finite panels are integrated directly; the unbounded tails are
//! mapped onto `[0, 1)` with `x = b ± s·t/(1 − t)`. The adaptive scheme bisects
//! the panel with the largest error until every component of the (vector)
//! integrand meets `max(abs_tol, rel_tol·|I|)`. Discrete supports become sums
//! truncated where the tail mass falls below `tail_mass`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{MdpdeError, Result};
use crate::family::{Anchor, Support, SupportKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureScheme {
    /// Fixed Gauss–Legendre panels over the mapped window, no refinement.
    GaussLegendre,
    /// Gauss–Hermite around the first density's center (full line only).
    GaussHermite,
    /// Gauss–Legendre panels refined by bisection until tolerances are met.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadratureSpec {
    pub scheme: QuadratureScheme,
    /// Nodes per panel (Gauss–Legendre) or in total (Gauss–Hermite).
    pub nodes: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Half-width of the breakpoint window around each density, in scale units.
    pub window_sds: f64,
    pub max_subdivisions: usize,
    /// Truncation threshold for discrete sums.
    pub tail_mass: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            scheme: QuadratureScheme::Adaptive,
            nodes: 32,
            abs_tol: 1e-13,
            rel_tol: 1e-9,
            window_sds: 8.0,
            max_subdivisions: 4000,
            tail_mass: 1e-12,
        }
    }
}

impl QuadratureSpec {
    /// Tighter tolerances for finite-difference work.
    pub fn precise() -> Self {
        QuadratureSpec {
            abs_tol: 1e-14,
            rel_tol: 1e-13,
            tail_mass: 1e-16,
            ..QuadratureSpec::default()
        }
    }

    pub fn with_nodes(self, nodes: usize) -> Self {
        QuadratureSpec { nodes, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 16 {
            return Err(MdpdeError::Config(format!(
                "quadrature needs at least 16 nodes, got {}",
                self.nodes
            )));
        }
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0 && self.tail_mass > 0.0) {
            return Err(MdpdeError::Config(
                "quadrature tolerances must be strictly positive".into(),
            ));
        }
        if !(self.window_sds > 0.0) || self.max_subdivisions == 0 {
            return Err(MdpdeError::Config(
                "quadrature window and subdivision cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Nodes and weights on `[-1, 1]` (Legendre) or `ℝ` with weight `e^{-x²}` (Hermite).
#[derive(Debug)]
pub(crate) struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn rule_cache() -> &'static Mutex<HashMap<(bool, usize), Arc<Rule>>> {
    static CACHE: OnceLock<Mutex<HashMap<(bool, usize), Arc<Rule>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

pub(crate) fn gauss_legendre(n: usize) -> Arc<Rule> {
    let mut cache = rule_cache().lock().expect("rule cache poisoned");
    cache
        .entry((false, n))
        .or_insert_with(|| Arc::new(legendre_rule(n)))
        .clone()
}

pub(crate) fn gauss_hermite(n: usize) -> Arc<Rule> {
    let mut cache = rule_cache().lock().expect("rule cache poisoned");
    cache
        .entry((true, n))
        .or_insert_with(|| Arc::new(hermite_rule(n)))
        .clone()
}

/// Newton iteration on P_n from the Chebyshev-like initial guesses.
fn legendre_rule(n: usize) -> Rule {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

/// Golub–Welsch on the Hermite Jacobi matrix.
fn hermite_rule(n: usize) -> Rule {
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            ((i.max(j)) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let v0 = eig.eigenvectors[(0, k)];
            (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * v0 * v0)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

/// Error attainable relative to `Σ|panel values|` in double precision.
const ROUNDING_FLOOR: f64 = 64.0 * f64::EPSILON;

/// Nodes beyond this magnitude contribute nothing.
const MAX_ABSCISSA: f64 = 1e150;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Map {
    Identity,
    /// `x = base + scale·t/(1 − t)`, `t ∈ [0, 1)`
    RightTail { base: f64, scale: f64 },
    /// `x = base − scale·t/(1 − t)`, `t ∈ [0, 1)`
    LeftTail { base: f64, scale: f64 },
    /// `x = base + scale·(e^u − 1)` with `u = t/(1 − t)`, for polynomial tails.
    RightTailLog { base: f64, scale: f64 },
}

impl Map {
    /// Returns `(x, dx/dt)`.
    #[inline]
    fn apply(&self, t: f64) -> (f64, f64) {
        match *self {
            Map::Identity => (t, 1.0),
            Map::RightTail { base, scale } => {
                let r = 1.0 / (1.0 - t);
                (base + scale * t * r, scale * r * r)
            }
            Map::LeftTail { base, scale } => {
                let r = 1.0 / (1.0 - t);
                (base - scale * t * r, scale * r * r)
            }
            Map::RightTailLog { base, scale } => {
                let r = 1.0 / (1.0 - t);
                let u = t * r;
                (base + scale * u.exp_m1(), scale * u.exp() * r * r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PanelSpec {
    a: f64,
    b: f64,
    map: Map,
}

/// How to integrate over one support, given the densities in the integrand.
/// A plan can be reused across parameter values so that finite differences
/// see a fixed panel layout.
#[derive(Debug, Clone)]
pub(crate) enum Plan {
    Discrete {
        upper: u64,
    },
    Continuous {
        panels: Vec<PanelSpec>,
        /// Center and scale for Gauss–Hermite, full line only.
        hermite: Option<(f64, f64)>,
    },
}

impl Plan {
    pub fn new(support: Support, anchors: &[Anchor], spec: &QuadratureSpec) -> Result<Plan> {
        if anchors.is_empty() {
            return Err(MdpdeError::domain("integration plan needs at least one density"));
        }
        if support.kind == SupportKind::NonNegativeIntegers {
            let upper = anchors
                .iter()
                .map(|a| {
                    a.discrete_upper.unwrap_or_else(|| {
                        (a.center + spec.window_sds * a.scale).max(0.0).ceil() as u64
                    })
                })
                .max()
                .unwrap_or(0);
            return Ok(Plan::Discrete { upper });
        }

        let mut breaks: Vec<f64> = Vec::new();
        let fractions = [-1.0, -0.5, -0.25, -0.125, 0.0, 0.125, 0.25, 0.5, 1.0];
        for a in anchors {
            for f in fractions {
                let b = a.center + f * spec.window_sds * a.scale;
                if b.is_finite() && b >= support.lower && b <= support.upper {
                    breaks.push(b);
                }
            }
        }
        if support.lower.is_finite() {
            breaks.push(support.lower);
        }
        if support.upper.is_finite() {
            breaks.push(support.upper);
        }
        breaks.sort_by(f64::total_cmp);
        let min_scale = anchors.iter().map(|a| a.scale).fold(f64::INFINITY, f64::min);
        let merge = 1e-12 * min_scale.max(f64::MIN_POSITIVE);
        breaks.dedup_by(|a, b| (*a - *b).abs() <= merge);
        let tail_scale = anchors.iter().map(|a| a.scale).fold(0.0, f64::max);
        if breaks.len() == 1 && support.upper.is_finite() && support.lower.is_finite() {
            return Err(MdpdeError::domain("degenerate integration interval"));
        }

        let mut panels = Vec::with_capacity(breaks.len() + 1);
        if support.lower == f64::NEG_INFINITY {
            panels.push(PanelSpec {
                a: 0.0,
                b: 1.0,
                map: Map::LeftTail {
                    base: breaks[0],
                    scale: tail_scale,
                },
            });
        }
        for w in breaks.windows(2) {
            panels.push(PanelSpec {
                a: w[0],
                b: w[1],
                map: Map::Identity,
            });
        }
        if support.upper == f64::INFINITY {
            panels.push(PanelSpec {
                a: 0.0,
                b: 1.0,
                map: if anchors.iter().any(|a| a.heavy_tail) {
                    Map::RightTailLog {
                        base: *breaks.last().unwrap(),
                        scale: tail_scale,
                    }
                } else {
                    Map::RightTail {
                        base: *breaks.last().unwrap(),
                        scale: tail_scale,
                    }
                },
            });
        }
        let hermite = (support.kind == SupportKind::RealLine)
            .then(|| (anchors[0].center, anchors[0].scale));
        Ok(Plan::Continuous { panels, hermite })
    }
}

/// Value and error estimate of a vector integral.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Integral {
    pub value: Vec<f64>,
    pub error: Vec<f64>,
}

/// Integrate an `m`-vector valued function over the plan. The integrand writes
/// its `m` values for point `x` into the output slice.
pub(crate) fn integrate<F>(plan: &Plan, spec: &QuadratureSpec, m: usize, mut f: F) -> Result<Integral>
where
    F: FnMut(f64, &mut [f64]),
{
    let mut buf = vec![0.0; m];
    match plan {
        Plan::Discrete { upper } => {
            let mut value = vec![0.0; m];
            for k in 0..=*upper {
                f(k as f64, &mut buf);
                for (v, b) in value.iter_mut().zip(&buf) {
                    *v += b;
                }
            }
            Ok(Integral {
                value,
                error: vec![spec.tail_mass; m],
            })
        }
        Plan::Continuous { panels, hermite } => match spec.scheme {
            QuadratureScheme::GaussLegendre => {
                let rule = gauss_legendre(spec.nodes);
                let mut value = vec![0.0; m];
                for p in panels {
                    apply_rule(&rule, p.a, p.b, p.map, &mut f, &mut buf, &mut value);
                }
                Ok(Integral {
                    value,
                    error: vec![0.0; m],
                })
            }
            QuadratureScheme::GaussHermite => {
                let (center, scale) = hermite.ok_or_else(|| {
                    MdpdeError::Config("Gauss–Hermite quadrature needs a full-line support".into())
                })?;
                let rule = gauss_hermite(spec.nodes);
                let mut value = vec![0.0; m];
                let s = std::f64::consts::SQRT_2 * scale;
                for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                    f(center + s * t, &mut buf);
                    let wt = w * (t * t).exp() * s;
                    for (v, b) in value.iter_mut().zip(&buf) {
                        *v += wt * b;
                    }
                }
                Ok(Integral {
                    value,
                    error: vec![0.0; m],
                })
            }
            QuadratureScheme::Adaptive => adaptive(panels, spec, m, &mut f, &mut buf),
        },
    }
}

#[inline]
fn apply_rule<F: FnMut(f64, &mut [f64])>(
    rule: &Rule,
    a: f64,
    b: f64,
    map: Map,
    f: &mut F,
    buf: &mut [f64],
    acc: &mut [f64],
) {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let (x, jac) = map.apply(mid + half * t);
        if !(x.abs() < MAX_ABSCISSA && jac.is_finite()) {
            // far end of a log-mapped tail, where squared scores overflow
            continue;
        }
        f(x, buf);
        let wt = w * half * jac;
        for (v, y) in acc.iter_mut().zip(buf.iter()) {
            *v += wt * y;
        }
    }
}

struct Panel {
    spec: PanelSpec,
    left: Vec<f64>,
    right: Vec<f64>,
    error: Vec<f64>,
}

fn make_panel<F: FnMut(f64, &mut [f64])>(
    rule: &Rule,
    spec: PanelSpec,
    coarse: &[f64],
    f: &mut F,
    buf: &mut [f64],
) -> Panel {
    let m = coarse.len();
    let mid = 0.5 * (spec.a + spec.b);
    let mut left = vec![0.0; m];
    let mut right = vec![0.0; m];
    apply_rule(rule, spec.a, mid, spec.map, f, buf, &mut left);
    apply_rule(rule, mid, spec.b, spec.map, f, buf, &mut right);
    let error = (0..m)
        .map(|j| {
            let e = (left[j] + right[j] - coarse[j]).abs();
            if e.is_nan() { f64::INFINITY } else { e }
        })
        .collect();
    Panel {
        spec,
        left,
        right,
        error,
    }
}

fn adaptive<F: FnMut(f64, &mut [f64])>(
    initial: &[PanelSpec],
    spec: &QuadratureSpec,
    m: usize,
    f: &mut F,
    buf: &mut [f64],
) -> Result<Integral> {
    let rule = gauss_legendre(spec.nodes);
    let mut panels: Vec<Panel> = Vec::with_capacity(initial.len() * 2);
    for p in initial {
        let mut coarse = vec![0.0; m];
        apply_rule(&rule, p.a, p.b, p.map, f, buf, &mut coarse);
        panels.push(make_panel(&rule, *p, &coarse, f, buf));
    }

    let mut splits = 0usize;
    loop {
        let mut value = vec![0.0; m];
        let mut error = vec![0.0; m];
        let mut magnitude = vec![0.0; m];
        for p in &panels {
            for j in 0..m {
                value[j] += p.left[j] + p.right[j];
                error[j] += p.error[j];
                magnitude[j] += p.left[j].abs() + p.right[j].abs();
            }
        }
        // below the rounding floor of the panel sums no split can help
        let tol: Vec<f64> = value
            .iter()
            .zip(&magnitude)
            .map(|(v, mag)| {
                spec.abs_tol
                    .max(spec.rel_tol * v.abs())
                    .max(ROUNDING_FLOOR * mag)
            })
            .collect();
        let worst_ratio = |p: &Panel| {
            p.error
                .iter()
                .zip(&tol)
                .map(|(e, t)| e / t)
                .fold(0.0, f64::max)
        };
        if error.iter().zip(&tol).all(|(e, t)| e <= t) {
            if value.iter().any(|v| !v.is_finite()) {
                return Err(MdpdeError::numerical("integral is not finite", f64::INFINITY));
            }
            return Ok(Integral { value, error });
        }
        if splits >= spec.max_subdivisions {
            let worst = error
                .iter()
                .zip(&tol)
                .map(|(e, t)| e / t)
                .fold(0.0, f64::max);
            let estimate = error.iter().cloned().fold(0.0, f64::max);
            return Err(MdpdeError::numerical(
                format!(
                    "adaptive quadrature did not converge after {splits} subdivisions \
                     (error/tolerance {worst:.3e})"
                ),
                estimate,
            ));
        }
        let (idx, _) = panels
            .iter()
            .enumerate()
            .map(|(i, p)| (i, worst_ratio(p)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one panel");
        let parent = panels.swap_remove(idx);
        let mid = 0.5 * (parent.spec.a + parent.spec.b);
        let left = PanelSpec {
            b: mid,
            ..parent.spec
        };
        let right = PanelSpec {
            a: mid,
            ..parent.spec
        };
        if !(mid > parent.spec.a && mid < parent.spec.b) {
            let estimate = error.iter().cloned().fold(0.0, f64::max);
            return Err(MdpdeError::numerical(
                "adaptive quadrature exhausted floating-point resolution",
                estimate,
            ));
        }
        panels.push(make_panel(&rule, left, &parent.left, f, buf));
        panels.push(make_panel(&rule, right, &parent.right, f, buf));
        splits += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::{Family, ParamPoint};
    use approx::assert_relative_eq;

    fn plan_for(fam: Family, t: &[f64], spec: &QuadratureSpec) -> Plan {
        Plan::new(fam.support(), &[fam.anchor(t, spec.tail_mass)], spec).unwrap()
    }

    #[test]
    fn legendre_rule_integrates_polynomials_exactly() {
        let r = legendre_rule(16);
        let s: f64 = r.weights.iter().sum();
        assert_relative_eq!(s, 2.0, max_relative = 1e-14);
        // degree 30 is exact for 16 nodes
        let q: f64 = r
            .nodes
            .iter()
            .zip(&r.weights)
            .map(|(x, w)| w * x.powi(30))
            .sum();
        assert_relative_eq!(q, 2.0 / 31.0, max_relative = 1e-12);
    }

    #[test]
    fn hermite_rule_moments() {
        let r = hermite_rule(20);
        let pi_sqrt = std::f64::consts::PI.sqrt();
        let m0: f64 = r.weights.iter().sum();
        let m2: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x * x).sum();
        assert_relative_eq!(m0, pi_sqrt, max_relative = 1e-12);
        assert_relative_eq!(m2, pi_sqrt / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn densities_integrate_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = QuadratureSpec::default();
        for fam in Family::CATALOG {
            for _ in 0..100 {
                let t: Vec<f64> = match fam {
                    Family::Normal => vec![rng.random_range(-5.0..5.0), rng.random_range(0.05..5.0)],
                    Family::Exponential => vec![rng.random_range(0.05..10.0)],
                    Family::Poisson => vec![rng.random_range(0.05..60.0)],
                    Family::Gpd => vec![rng.random_range(0.1..5.0), rng.random_range(0.02..1.5)],
                };
                let plan = plan_for(fam, &t, &spec);
                let r = integrate(&plan, &spec, 1, |x, out| {
                    out[0] = fam.log_density_raw(x, &t).exp()
                })
                .unwrap();
                assert!(
                    (r.value[0] - 1.0).abs() < 1e-9,
                    "{fam} at {:?}: {}",
                    ParamPoint::new(t.clone()),
                    r.value[0]
                );
            }
        }
    }

    #[test]
    fn fixed_and_hermite_schemes_on_normal() {
        let t = [0.7, 1.3];
        for scheme in [QuadratureScheme::GaussLegendre, QuadratureScheme::GaussHermite] {
            let spec = QuadratureSpec {
                scheme,
                nodes: 128,
                ..QuadratureSpec::default()
            };
            let plan = plan_for(Family::Normal, &t, &spec);
            let r = integrate(&plan, &spec, 2, |x, out| {
                let f = Family::Normal.log_density_raw(x, &t).exp();
                out[0] = f;
                out[1] = x * f;
            })
            .unwrap();
            assert_relative_eq!(r.value[0], 1.0, max_relative = 1e-10);
            assert_relative_eq!(r.value[1], 0.7, max_relative = 1e-10);
        }
    }

    #[test]
    fn hermite_rejects_half_line() {
        let spec = QuadratureSpec {
            scheme: QuadratureScheme::GaussHermite,
            ..QuadratureSpec::default()
        };
        let plan = plan_for(Family::Exponential, &[1.0], &spec);
        assert!(integrate(&plan, &spec, 1, |_, o| o[0] = 1.0).is_err());
    }

    #[test]
    fn divergent_integral_reports_error_estimate() {
        let spec = QuadratureSpec {
            max_subdivisions: 200,
            ..QuadratureSpec::default()
        };
        let plan = plan_for(Family::Exponential, &[1.0], &spec);
        // ∫_0^∞ 1/(1+x) dx diverges
        let err = integrate(&plan, &spec, 1, |x, o| o[0] = 1.0 / (1.0 + x)).unwrap_err();
        match err {
            MdpdeError::Numerical { error_estimate, .. } => assert!(error_estimate > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        assert!(QuadratureSpec::default().validate().is_ok());
        assert!(QuadratureSpec::default().with_nodes(8).validate().is_err());
        let bad = QuadratureSpec {
            rel_tol: 0.0,
            ..QuadratureSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
