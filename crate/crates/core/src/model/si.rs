//! Regression targets for the system-identification head.
//!
//! Each generating parameter is scaled so its hyperprior range maps onto
//! `[0, 1]`; parameters sampled log-uniformly are mapped to log space first.

use crate::error::{Error, Result};
use crate::prior::{map_log_uniform, HyperPrior, Range, SeriesParams};

pub const SI_TARGETS: usize = 9;

pub const SI_NAMES: [&str; 10] = [
    "annual_scale",
    "monthly_scale",
    "weekly_scale",
    "trend_linear",
    "trend_exponential",
    "offset_linear",
    "offset_exponential",
    "noise_scale",
    "resolution",
    "noise_shape",
];

pub fn unit(x: f64, r: Range) -> f64 {
    if r.width() == 0.0 {
        return 0.0;
    }
    (x - r.min) / r.width()
}

/// Unit scaling in log-mapped space. Arguments below the map's domain are
/// pulled to its edge so targets stay finite.
pub fn log_unit(x: f64, r: Range, kappa: f64) -> Result<f64> {
    let floor = (-1.0 + 1e-12) / kappa;
    let m = |v: f64| map_log_uniform(v.max(floor), kappa);
    let (lo, hi) = (m(r.min)?, m(r.max)?);
    if hi == lo {
        return Ok(0.0);
    }
    Ok((m(x)? - lo) / (hi - lo))
}

/// The first `count` targets in [`SI_NAMES`] order. `count` is 9 or 10; the
/// optional tenth target is the context noise shape.
pub fn si_targets(psi: &SeriesParams, hp: &HyperPrior, count: usize) -> Result<Vec<f64>> {
    if count != SI_TARGETS && count != SI_TARGETS + 1 {
        return Err(Error::Config(format!("si target count must be 9 or 10, got {count}")));
    }
    let mut t = vec![
        unit(psi.m_annual, hp.annual_scale),
        unit(psi.m_monthly, hp.monthly_scale),
        unit(psi.m_weekly, hp.weekly_scale),
        unit(psi.m_lin, hp.linear_trend),
        log_unit(psi.m_exp, hp.exp_trend, hp.kappa_exp)?,
        unit(psi.c_lin, hp.linear_offset),
        unit(psi.c_exp, hp.exp_offset),
        log_unit(psi.m_noise, hp.noise_hull(), hp.kappa_noise)?,
        log_unit(psi.rho, hp.resolution, hp.kappa_rho)?,
    ];
    if count == SI_TARGETS + 1 {
        t.push(unit(psi.k, hp.noise_k));
    }
    Ok(t)
}
