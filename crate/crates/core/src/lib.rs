//! Minimum density power divergence estimation.
//!
//! The crate is organized bottom-up:
//!
//! - [`family`]: parametric families (density, score, information, reparameterization).
//! - [`quadrature`]: integration over a family's support.
//! - [`dpd`]: the divergence, the estimation criterion and its analytic derivatives.
//! - [`asymptotics`]: the `K`, `J` matrices, the sandwich covariance and regularity diagnostics.
//! - [`estimator`]: numerical fitting with multi-start and standard errors.
//! - [`montecarlo`]: data generation and replicated consistency/normality studies.

pub mod asymptotics;
pub mod dpd;
pub mod error;
pub mod estimator;
pub mod family;
pub mod montecarlo;
mod optim;
pub mod quadrature;
mod serde_util;

pub use asymptotics::{DiagnosticsReport, SandwichCov};
pub use dpd::{DpdConfig, Sample};
pub use error::{MdpdeError, Result};
pub use estimator::{FitConfig, FitResult};
pub use family::{Family, Mixture, MixtureComponent, ParamPoint, Support, SupportKind};
pub use montecarlo::{McConfig, McReport};
pub use quadrature::{QuadratureScheme, QuadratureSpec};
