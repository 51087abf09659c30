//! Parametric density families.
//!
//! Every family exposes its density, score `∇_θ log f` and information matrix
//! `−∇²_θ log f` in natural coordinates, plus an unconstrained reparameterization
//! (log of every positive coordinate) used by the optimizer. Integrals over the
//! support are taken with respect to Lebesgue measure for continuous families and
//! counting measure for the Poisson family.
//!
//! | name          | parameters (natural) | transformed        | support   |
//! |---------------|----------------------|--------------------|-----------|
//! | `normal`      | `(mu, sigma)`        | `(mu, ln sigma)`   | ℝ         |
//! | `exponential` | `(lambda)`           | `(ln lambda)`      | `[0, ∞)`  |
//! | `poisson`     | `(lambda)`           | `(ln lambda)`      | `{0,1,…}` |
//! | `gpd`         | `(sigma, xi)`        | `(ln sigma, ln xi)`| `[0, ∞)`  |
//!
//! The generalized Pareto family has location fixed at zero and is restricted to
//! the heavy-tailed branch `xi > 0`, where the support does not depend on θ.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{MdpdeError, Result};

/// Largest parameter dimension among the built-in families.
pub const MAX_DIM: usize = 2;

/// Floor applied to log-densities. Below this `exp` underflows to a subnormal.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

/// Lower bound on every log-transformed coordinate during optimization.
pub(crate) const LOG_COORD_FLOOR: f64 = -18.420_680_743_952_367; // ln(1e-8)

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportKind {
    RealLine,
    HalfLine,
    Interval,
    NonNegativeIntegers,
}

/// Support of a family. `lower`/`upper` are infinite where unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub kind: SupportKind,
    pub lower: f64,
    pub upper: f64,
}

impl Support {
    pub fn real_line() -> Self {
        Support {
            kind: SupportKind::RealLine,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn half_line(lower: f64) -> Self {
        Support {
            kind: SupportKind::HalfLine,
            lower,
            upper: f64::INFINITY,
        }
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(MdpdeError::domain(format!(
                "interval support needs finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(Support {
            kind: SupportKind::Interval,
            lower,
            upper,
        })
    }

    pub fn non_negative_integers() -> Self {
        Support {
            kind: SupportKind::NonNegativeIntegers,
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.kind == SupportKind::NonNegativeIntegers
    }

    pub fn contains(&self, x: f64) -> bool {
        if !x.is_finite() {
            return false;
        }
        match self.kind {
            SupportKind::NonNegativeIntegers => x >= 0.0 && x.fract() == 0.0,
            _ => x >= self.lower && x <= self.upper,
        }
    }
}

/// A point θ in a family's parameter space, natural coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamPoint(Vec<f64>);

impl ParamPoint {
    pub fn new(values: Vec<f64>) -> Self {
        ParamPoint(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl From<Vec<f64>> for ParamPoint {
    fn from(values: Vec<f64>) -> Self {
        ParamPoint(values)
    }
}

impl fmt::Display for ParamPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Which model integrals a family can evaluate in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedForms {
    pub plain_power: bool,
    pub score_power: bool,
    pub score_outer_power: bool,
    pub info_power: bool,
}

/// Log-density, score and information at one point, fixed-size for hot loops.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Kernel {
    pub log_f: f64,
    pub score: [f64; MAX_DIM],
    pub info: [[f64; MAX_DIM]; MAX_DIM],
}

/// Center/scale hints that place quadrature breakpoints where a density lives.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Anchor {
    pub center: f64,
    pub scale: f64,
    /// For discrete families: an index beyond which the tail mass is negligible.
    pub discrete_upper: Option<u64>,
    /// Polynomial rather than exponential tail decay.
    pub heavy_tail: bool,
}

/// `A(z) = ln(1+z) − z/(1+z)` and `C(z) = z²/(1+z)² − 2A(z)`, by series near
/// zero where both cancel.
#[inline]
fn gpd_shape_terms(z: f64) -> (f64, f64) {
    if z.abs() < 0.1 {
        let (mut a, mut c) = (0.0, 0.0);
        let mut zk = z * z;
        for k in 2..=24 {
            let kf = k as f64;
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            a += sign * (1.0 - 1.0 / kf) * zk;
            c += sign * (kf - 1.0) * (kf - 2.0) / kf * zk;
            zk *= z;
        }
        (a, c)
    } else {
        let q = z / (1.0 + z);
        let a = z.ln_1p() - q;
        (a, q * q - 2.0 * a)
    }
}

/// The built-in family catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Normal,
    Exponential,
    Poisson,
    Gpd,
}

impl FromStr for Family {
    type Err = MdpdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "gaussian" => Ok(Family::Normal),
            "exponential" | "exp" => Ok(Family::Exponential),
            "poisson" => Ok(Family::Poisson),
            "gpd" | "generalized_pareto" => Ok(Family::Gpd),
            other => Err(MdpdeError::Config(format!(
                "unknown family '{other}' (expected one of normal, exponential, poisson, gpd)"
            ))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Family {
    pub const CATALOG: [Family; 4] = [
        Family::Normal,
        Family::Exponential,
        Family::Poisson,
        Family::Gpd,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::Exponential => "exponential",
            Family::Poisson => "poisson",
            Family::Gpd => "gpd",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Family::Normal | Family::Gpd => 2,
            Family::Exponential | Family::Poisson => 1,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Family::Normal => &["mu", "sigma"],
            Family::Exponential => &["lambda"],
            Family::Poisson => &["lambda"],
            Family::Gpd => &["sigma", "xi"],
        }
    }

    /// Per-coordinate flag: `true` where the coordinate is strictly positive
    /// and optimized on the log scale.
    pub fn log_coordinates(&self) -> &'static [bool] {
        match self {
            Family::Normal => &[false, true],
            Family::Exponential | Family::Poisson => &[true],
            Family::Gpd => &[true, true],
        }
    }

    pub fn support(&self) -> Support {
        match self {
            Family::Normal => Support::real_line(),
            Family::Exponential | Family::Gpd => Support::half_line(0.0),
            Family::Poisson => Support::non_negative_integers(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.support().is_discrete()
    }

    pub fn closed_forms(&self) -> ClosedForms {
        match self {
            Family::Normal | Family::Exponential => ClosedForms {
                plain_power: true,
                score_power: true,
                score_outer_power: true,
                info_power: true,
            },
            Family::Gpd => ClosedForms {
                plain_power: true,
                score_power: false,
                score_outer_power: false,
                info_power: false,
            },
            Family::Poisson => ClosedForms {
                plain_power: false,
                score_power: false,
                score_outer_power: false,
                info_power: false,
            },
        }
    }

    /// Validated constructor for a parameter point.
    pub fn point(&self, values: &[f64]) -> Result<ParamPoint> {
        let p = ParamPoint::new(values.to_vec());
        self.check_feasible(&p)?;
        Ok(p)
    }

    /// Domain error unless θ has the right length and every positive coordinate
    /// is strictly positive and finite.
    pub fn check_feasible(&self, theta: &ParamPoint) -> Result<()> {
        self.check_values(theta.values(), false)
    }

    /// Like [`check_feasible`](Self::check_feasible), but a positive coordinate
    /// equal to zero yields a boundary error.
    pub fn check_interior(&self, theta: &ParamPoint) -> Result<()> {
        self.check_values(theta.values(), true)
    }

    fn check_values(&self, v: &[f64], boundary_is_distinct: bool) -> Result<()> {
        if v.len() != self.dim() {
            return Err(MdpdeError::domain(format!(
                "{} expects {} parameters, got {}",
                self.name(),
                self.dim(),
                v.len()
            )));
        }
        for ((&value, &positive), name) in v
            .iter()
            .zip(self.log_coordinates())
            .zip(self.param_names())
        {
            if !value.is_finite() {
                return Err(MdpdeError::domain(format!("{name} = {value} is not finite")));
            }
            if positive && value <= 0.0 {
                if value == 0.0 && boundary_is_distinct {
                    return Err(MdpdeError::Boundary(format!("{name} = 0")));
                }
                return Err(MdpdeError::domain(format!(
                    "{name} = {value} must be strictly positive"
                )));
            }
        }
        Ok(())
    }

    fn check_observation(&self, x: f64) -> Result<()> {
        if self.is_discrete() && !self.support().contains(x) {
            return Err(MdpdeError::domain(format!(
                "{x} is not a non-negative integer"
            )));
        }
        Ok(())
    }

    /// Log-density with the [`LOG_DENSITY_FLOOR`] applied.
    pub fn log_density(&self, x: f64, theta: &ParamPoint) -> Result<f64> {
        self.check_feasible(theta)?;
        self.check_observation(x)?;
        Ok(self.log_density_raw(x, theta.values()).max(LOG_DENSITY_FLOOR))
    }

    /// Density value. Zero outside a continuous support.
    pub fn density(&self, x: f64, theta: &ParamPoint) -> Result<f64> {
        self.check_feasible(theta)?;
        self.check_observation(x)?;
        Ok(self.log_density_raw(x, theta.values()).exp())
    }

    pub fn score(&self, x: f64, theta: &ParamPoint) -> Result<DVector<f64>> {
        self.check_pointwise_derivative(x, theta)?;
        let k = self.kernel(x, theta.values());
        Ok(DVector::from_fn(self.dim(), |i, _| k.score[i]))
    }

    pub fn info_matrix(&self, x: f64, theta: &ParamPoint) -> Result<DMatrix<f64>> {
        self.check_pointwise_derivative(x, theta)?;
        let k = self.kernel(x, theta.values());
        let p = self.dim();
        Ok(DMatrix::from_fn(p, p, |i, j| k.info[i][j]))
    }

    fn check_pointwise_derivative(&self, x: f64, theta: &ParamPoint) -> Result<()> {
        self.check_interior(theta)?;
        if !self.support().contains(x) {
            return Err(MdpdeError::domain(format!(
                "score undefined at {x}: outside the {} support",
                self.name()
            )));
        }
        Ok(())
    }

    /// Unfloored log-density; `-inf` outside the support. No validation.
    #[inline]
    pub(crate) fn log_density_raw(&self, x: f64, t: &[f64]) -> f64 {
        match self {
            Family::Normal => {
                let z = (x - t[0]) / t[1];
                -0.5 * (2.0 * PI).ln() - t[1].ln() - 0.5 * z * z
            }
            Family::Exponential => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    t[0].ln() - t[0] * x
                }
            }
            Family::Poisson => {
                if x < 0.0 || x.fract() != 0.0 {
                    f64::NEG_INFINITY
                } else {
                    -t[0] + x * t[0].ln() - ln_gamma(x + 1.0)
                }
            }
            Family::Gpd => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let (sigma, xi) = (t[0], t[1]);
                    -sigma.ln() - (1.0 / xi + 1.0) * (xi * x / sigma).ln_1p()
                }
            }
        }
    }

    /// Log-density, score and information at an in-support point. No validation.
    #[inline]
    pub(crate) fn kernel(&self, x: f64, t: &[f64]) -> Kernel {
        let mut k = Kernel {
            log_f: self.log_density_raw(x, t),
            ..Kernel::default()
        };
        match self {
            Family::Normal => {
                let (mu, sigma) = (t[0], t[1]);
                let d = x - mu;
                let s2 = sigma * sigma;
                k.score = [d / s2, d * d / (s2 * sigma) - 1.0 / sigma];
                let off = 2.0 * d / (s2 * sigma);
                k.info = [[1.0 / s2, off], [off, 3.0 * d * d / (s2 * s2) - 1.0 / s2]];
            }
            Family::Exponential => {
                let lambda = t[0];
                k.score[0] = 1.0 / lambda - x;
                k.info[0][0] = 1.0 / (lambda * lambda);
            }
            Family::Poisson => {
                let lambda = t[0];
                k.score[0] = x / lambda - 1.0;
                k.info[0][0] = x / (lambda * lambda);
            }
            Family::Gpd => {
                let (sigma, xi) = (t[0], t[1]);
                let w = sigma + xi * x;
                let d = sigma * w;
                let z = xi * x / sigma;
                let (a, c) = gpd_shape_terms(z);
                let q = z / (1.0 + z);
                k.score = [(x - sigma) / d, a / (xi * xi) - q / xi];
                let h_ss = (-d - (x - sigma) * (2.0 * sigma + xi * x)) / (d * d);
                let h_sx = -(x - sigma) * x / (sigma * w * w);
                let h_xx = c / (xi * xi * xi) + q * q / (xi * xi);
                k.info = [[-h_ss, -h_sx], [-h_sx, -h_xx]];
            }
        }
        k
    }

    /// Natural → transformed (log of positive coordinates).
    pub fn to_transformed(&self, theta: &ParamPoint) -> Result<DVector<f64>> {
        self.check_feasible(theta)?;
        Ok(DVector::from_iterator(
            self.dim(),
            theta
                .values()
                .iter()
                .zip(self.log_coordinates())
                .map(|(&v, &log)| if log { v.ln() } else { v }),
        ))
    }

    /// Transformed → natural.
    pub fn from_transformed(&self, eta: &DVector<f64>) -> ParamPoint {
        ParamPoint::new(
            eta.iter()
                .zip(self.log_coordinates())
                .map(|(&v, &log)| if log { v.exp() } else { v })
                .collect(),
        )
    }

    /// Diagonal of `dθ/dη` at θ (the transform acts coordinatewise).
    pub fn transform_jacobian(&self, theta: &ParamPoint) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            theta
                .values()
                .iter()
                .zip(self.log_coordinates())
                .map(|(&v, &log)| if log { v } else { 1.0 }),
        )
    }

    /// Diagonal of `d²θ/dη²` at θ.
    pub fn transform_curvature(&self, theta: &ParamPoint) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            theta
                .values()
                .iter()
                .zip(self.log_coordinates())
                .map(|(&v, &log)| if log { v } else { 0.0 }),
        )
    }

    pub(crate) fn anchor(&self, t: &[f64], tail_mass: f64) -> Anchor {
        match self {
            Family::Normal => Anchor {
                center: t[0],
                scale: t[1],
                discrete_upper: None,
                heavy_tail: false,
            },
            Family::Exponential => Anchor {
                center: 1.0 / t[0],
                scale: 1.0 / t[0],
                discrete_upper: None,
                heavy_tail: false,
            },
            Family::Gpd => Anchor {
                center: t[0],
                scale: t[0] * (1.0 + t[1]),
                discrete_upper: None,
                heavy_tail: true,
            },
            Family::Poisson => {
                let lambda = t[0];
                Anchor {
                    center: lambda,
                    scale: lambda.sqrt().max(1.0),
                    discrete_upper: Some(poisson_tail_cutoff(lambda, tail_mass)),
                    heavy_tail: false,
                }
            }
        }
    }

    /// A feasible starting point computed from data by moments (probability
    /// weighted moments for the generalized Pareto family).
    pub fn initial_guess(&self, data: &[f64]) -> ParamPoint {
        let n = data.len().max(1) as f64;
        let mean = data.iter().sum::<f64>() / n;
        match self {
            Family::Normal => {
                let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                ParamPoint::new(vec![mean, var.sqrt().max(1e-6)])
            }
            Family::Exponential => ParamPoint::new(vec![1.0 / mean.max(1e-6)]),
            Family::Poisson => ParamPoint::new(vec![mean.max(1e-6)]),
            Family::Gpd => {
                let mut sorted = data.to_vec();
                sorted.sort_by(f64::total_cmp);
                let a1 = sorted
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (1.0 - (i as f64 + 0.65) / n) * x)
                    .sum::<f64>()
                    / n;
                let denom = mean - 2.0 * a1;
                let (sigma, xi) = if denom > 0.0 && mean > 0.0 {
                    (2.0 * mean * a1 / denom, 2.0 - mean / denom)
                } else {
                    (mean.max(1e-6), 0.1)
                };
                let xi = xi.clamp(0.05, 2.0);
                let sigma = if sigma > 0.0 { sigma } else { mean.max(1e-6) };
                ParamPoint::new(vec![sigma, xi])
            }
        }
    }

    /// One draw from the family at θ. θ must be feasible.
    pub fn draw<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> f64 {
        match self {
            Family::Normal => Normal::new(theta[0], theta[1])
                .expect("feasible normal parameters")
                .sample(rng),
            Family::Exponential => Exp::new(theta[0])
                .expect("feasible exponential rate")
                .sample(rng),
            Family::Poisson => Poisson::new(theta[0])
                .expect("feasible poisson rate")
                .sample(rng),
            Family::Gpd => {
                let (sigma, xi) = (theta[0], theta[1]);
                let u: f64 = rng.random();
                // inverse cdf on the survival scale; u in [0, 1)
                sigma * ((-xi * (1.0 - u).ln()).exp_m1()) / xi
            }
        }
    }
}

/// Smallest k such that P(X > k) < tail_mass for X ~ Poisson(lambda).
fn poisson_tail_cutoff(lambda: f64, tail_mass: f64) -> u64 {
    let ln_lambda = lambda.ln();
    let mut k = 0u64;
    let mut log_pmf = -lambda;
    loop {
        let kf = k as f64;
        let ratio = lambda / (kf + 2.0);
        if ratio < 1.0 {
            // P(X > k) <= pmf(k + 1) / (1 - lambda / (k + 2))
            let next = (log_pmf + ln_lambda - (kf + 1.0).ln()).exp();
            if next / (1.0 - ratio) < tail_mass {
                return k;
            }
        }
        k += 1;
        log_pmf += ln_lambda - (k as f64).ln();
    }
}

/// One component of a finite mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub family: Family,
    pub theta: ParamPoint,
    pub weight: f64,
}

/// A finite mixture of catalog members. Stands in for the true density `g`
/// and doubles as the data generator for simulation studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    components: Vec<MixtureComponent>,
}

impl Mixture {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(MdpdeError::domain("mixture needs at least one component"));
        }
        let support = components[0].family.support();
        let mut total = 0.0;
        for c in &components {
            c.family.check_feasible(&c.theta)?;
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(MdpdeError::domain(format!(
                    "mixture weight {} must be non-negative",
                    c.weight
                )));
            }
            if c.family.support() != support {
                return Err(MdpdeError::domain(format!(
                    "mixture components have incompatible supports ({} vs {})",
                    components[0].family, c.family
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(MdpdeError::domain(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(Mixture { components })
    }

    /// The model itself: `g = f(·; θ)`.
    pub fn single(family: Family, theta: ParamPoint) -> Result<Self> {
        Mixture::new(vec![MixtureComponent {
            family,
            theta,
            weight: 1.0,
        }])
    }

    /// `(1 − eps)·f(·; θ) + eps·h`.
    pub fn contaminated(
        family: Family,
        theta: ParamPoint,
        eps: f64,
        outlier_family: Family,
        outlier_theta: ParamPoint,
    ) -> Result<Self> {
        Mixture::new(vec![
            MixtureComponent {
                family,
                theta,
                weight: 1.0 - eps,
            },
            MixtureComponent {
                family: outlier_family,
                theta: outlier_theta,
                weight: eps,
            },
        ])
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    pub fn support(&self) -> Support {
        self.components[0].family.support()
    }

    /// If `g` is a single member of `family`, its parameter.
    pub fn as_member_of(&self, family: Family) -> Option<&ParamPoint> {
        let active: Vec<_> = self.components.iter().filter(|c| c.weight > 0.0).collect();
        match active.as_slice() {
            [c] if c.family == family => Some(&c.theta),
            _ => None,
        }
    }

    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        self.components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.weight * c.family.log_density_raw(x, c.theta.values()).exp())
            .sum()
    }

    pub(crate) fn anchors(&self, tail_mass: f64) -> Vec<Anchor> {
        self.components
            .iter()
            .filter(|c| c.weight > 0.0)
            .map(|c| c.family.anchor(c.theta.values(), tail_mass))
            .collect()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let comp = if self.components.len() == 1 {
            &self.components[0]
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = self.components.last().unwrap();
            for c in &self.components {
                acc += c.weight;
                if u < acc {
                    chosen = c;
                    break;
                }
            }
            chosen
        };
        comp.family.draw(comp.theta.values(), rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, t: &[f64], i: usize) -> f64 {
        let h = f64::EPSILON.cbrt() * t[i].abs().max(1.0);
        let mut up = t.to_vec();
        let mut dn = t.to_vec();
        up[i] += h;
        dn[i] -= h;
        (f(&up) - f(&dn)) / (2.0 * h)
    }

    #[test]
    fn density_examples() {
        let n01 = Family::Normal.point(&[0.0, 1.0]).unwrap();
        assert_relative_eq!(
            Family::Normal.density(0.0, &n01).unwrap(),
            1.0 / (2.0 * PI).sqrt(),
            max_relative = 1e-15
        );
        let e1 = Family::Exponential.point(&[1.0]).unwrap();
        assert_eq!(Family::Exponential.density(0.0, &e1).unwrap(), 1.0);
        // independent evaluation: exp(-1/2) / (2 sqrt(2 pi))
        let n12 = Family::Normal.point(&[1.0, 2.0]).unwrap();
        assert_relative_eq!(
            Family::Normal.density(3.0, &n12).unwrap(),
            0.120_985_362_259_571_68,
            max_relative = 1e-14
        );
    }

    #[test]
    fn density_outside_support() {
        let e1 = Family::Exponential.point(&[1.0]).unwrap();
        assert_eq!(Family::Exponential.density(-1.0, &e1).unwrap(), 0.0);
        assert_eq!(
            Family::Exponential.log_density(-1.0, &e1).unwrap(),
            LOG_DENSITY_FLOOR
        );
        let p = Family::Poisson.point(&[2.0]).unwrap();
        assert!(matches!(
            Family::Poisson.density(1.5, &p),
            Err(MdpdeError::Domain(_))
        ));
        assert!(Family::Exponential.score(-1.0, &e1).is_err());
    }

    #[test]
    fn infeasible_and_boundary() {
        assert!(matches!(
            Family::Normal.point(&[0.0, -1.0]),
            Err(MdpdeError::Domain(_))
        ));
        assert!(Family::Normal.point(&[0.0]).is_err());
        let on_edge = ParamPoint::new(vec![0.0, 0.0]);
        assert!(matches!(
            Family::Normal.score(0.0, &on_edge),
            Err(MdpdeError::Boundary(_))
        ));
    }

    #[test]
    fn log_density_floor() {
        let n = Family::Normal.point(&[0.0, 1.0]).unwrap();
        assert_eq!(Family::Normal.log_density(1e3, &n).unwrap(), LOG_DENSITY_FLOOR);
    }

    #[test]
    fn score_examples() {
        let n01 = Family::Normal.point(&[0.0, 1.0]).unwrap();
        let s = Family::Normal.score(0.0, &n01).unwrap();
        assert_eq!(s.as_slice(), &[0.0, -1.0]);
        let e2 = Family::Exponential.point(&[2.0]).unwrap();
        assert_eq!(Family::Exponential.score(1.0, &e2).unwrap()[0], -0.5);
        let i = Family::Exponential.info_matrix(3.7, &e2).unwrap();
        assert_eq!(i[(0, 0)], 0.25);
        let i = Family::Normal.info_matrix(0.0, &n01).unwrap();
        assert_eq!(i[(0, 0)], 1.0);
        assert_eq!(i[(1, 1)], -1.0);
        assert_eq!(i[(0, 1)], 0.0);
    }

    fn fd_cases() -> Vec<(Family, Vec<f64>, f64)> {
        vec![
            (Family::Normal, vec![1.0, 2.0], 3.0),
            (Family::Normal, vec![-0.3, 0.7], -1.1),
            (Family::Exponential, vec![1.7], 0.4),
            (Family::Poisson, vec![3.2], 5.0),
            (Family::Gpd, vec![1.5, 0.3], 2.2),
            (Family::Gpd, vec![0.8, 1.2], 0.05),
        ]
    }

    #[test]
    fn score_matches_finite_differences() {
        for (fam, t, x) in fd_cases() {
            let theta = ParamPoint::new(t.clone());
            let s = fam.score(x, &theta).unwrap();
            for i in 0..fam.dim() {
                let fd = central_diff(|u| fam.log_density_raw(x, u), &t, i);
                assert_relative_eq!(s[i], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn info_matches_finite_differences() {
        for (fam, t, x) in fd_cases() {
            let theta = ParamPoint::new(t.clone());
            let info = fam.info_matrix(x, &theta).unwrap();
            for i in 0..fam.dim() {
                for j in 0..fam.dim() {
                    let fd = central_diff(|u| fam.kernel(x, u).score[i], &t, j);
                    assert_relative_eq!(info[(i, j)], -fd, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn info_is_exactly_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            for fam in [Family::Normal, Family::Gpd] {
                let t = vec![rng.random_range(0.1..3.0), rng.random_range(0.05..2.0)];
                let x = rng.random_range(0.0..20.0);
                let i = fam.info_matrix(x, &ParamPoint::new(t)).unwrap();
                assert_eq!(i[(0, 1)], i[(1, 0)]);
            }
        }
    }

    #[test]
    fn transform_round_trip() {
        let theta = Family::Gpd.point(&[2.0, 0.4]).unwrap();
        let eta = Family::Gpd.to_transformed(&theta).unwrap();
        let back = Family::Gpd.from_transformed(&eta);
        assert_relative_eq!(back.values()[0], 2.0, max_relative = 1e-15);
        assert_relative_eq!(back.values()[1], 0.4, max_relative = 1e-15);
        assert_eq!(Family::Gpd.transform_jacobian(&theta).as_slice(), &[2.0, 0.4]);
    }

    #[test]
    fn catalog_names_resolve() {
        for fam in Family::CATALOG {
            assert_eq!(fam.name().parse::<Family>().unwrap(), fam);
        }
        assert!(matches!("cauchy".parse::<Family>(), Err(MdpdeError::Config(_))));
    }

    #[test]
    fn mixture_validation() {
        let n = Family::Normal.point(&[0.0, 1.0]).unwrap();
        let e = Family::Exponential.point(&[1.0]).unwrap();
        assert!(Mixture::contaminated(Family::Normal, n.clone(), 0.1, Family::Exponential, e).is_err());
        let bad = Mixture::new(vec![MixtureComponent {
            family: Family::Normal,
            theta: n.clone(),
            weight: 0.9,
        }]);
        assert!(bad.is_err());
        let m = Mixture::single(Family::Normal, n.clone()).unwrap();
        assert_eq!(m.as_member_of(Family::Normal), Some(&n));
    }

    #[test]
    fn degenerate_mixture_draws_from_first_component() {
        let m = Mixture::new(vec![
            MixtureComponent {
                family: Family::Normal,
                theta: ParamPoint::new(vec![0.0, 1.0]),
                weight: 1.0,
            },
            MixtureComponent {
                family: Family::Normal,
                theta: ParamPoint::new(vec![1000.0, 1.0]),
                weight: 0.0,
            },
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!((0..1000).all(|_| m.draw(&mut rng).abs() < 100.0));
    }

    #[test]
    fn poisson_cutoff_tail_is_small() {
        for lambda in [0.3, 3.0, 40.0] {
            let k = poisson_tail_cutoff(lambda, 1e-12);
            let mut tail = 0.0;
            for j in (k + 1)..(k + 400) {
                tail += Family::Poisson.log_density_raw(j as f64, &[lambda]).exp();
            }
            assert!(tail < 1e-12, "lambda {lambda}: tail {tail}");
            assert!(k as f64 > lambda);
        }
    }
}
