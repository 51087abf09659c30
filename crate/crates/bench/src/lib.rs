//! Shared inputs for the benchmarks.

use mdpde::montecarlo::sample;
use mdpde::{Family, Mixture, Sample};

/// A reproducible sample of size `n` from the family at `theta`.
pub fn fixture(family: Family, theta: &[f64], n: usize) -> Sample {
    let g = Mixture::single(family, family.point(theta).expect("feasible theta")).expect("valid mixture");
    sample(&g, n, 42).expect("sample")
}
