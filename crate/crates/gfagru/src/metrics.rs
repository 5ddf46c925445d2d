//! Performance metrics over a monthly portfolio return path.
//!
//! Moment-based quantities use population (1/L) moments so the skewness and
//! volatility share one convention. Tail quantities reuse the repo-wide
//! empirical estimator from the optimiser module at level `q` (0.95 unless
//! stated otherwise): ES annualises the loss-tail average, CR divides the
//! monthly mean by it, and RR divides the best-tail average of returns by
//! the worst-tail average of losses.

use crate::cvar::empirical_cvar;
use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

pub const MONTHS_PER_YEAR: f64 = 12.0;
pub const DEFAULT_TAIL_LEVEL: f64 = 0.95;

/// Realized monthly portfolio returns with their rebalance dates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnPath {
    pub dates: Vec<NaiveDate>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    /// Annualized average return: mean x 12.
    pub av: f64,
    /// Annualized volatility: sqrt(variance x 12).
    pub sd: f64,
    /// Information ratio AV/SD; missing when the path is constant.
    pub ir: Option<f64>,
    /// Annualized expected shortfall of losses at level `q`.
    pub es: f64,
    /// Population skewness m3 / m2^(3/2); zero for a constant path.
    pub sk: f64,
    /// Maximum drawdown of the compounded wealth curve.
    pub md: f64,
    /// Monthly mean over monthly expected shortfall; missing when the
    /// shortfall vanishes.
    pub cr: Option<f64>,
    /// Best-tail mean over worst-tail mean at level `q`; missing when the
    /// shortfall vanishes.
    pub rr: Option<f64>,
}

pub fn max_drawdown(returns: &[f64]) -> f64 {
    let mut wealth = 1.0f64;
    let mut peak = 1.0f64;
    let mut md = 0.0f64;
    for r in returns {
        wealth *= 1.0 + r;
        if wealth > peak {
            peak = wealth;
        } else {
            md = md.max((peak - wealth) / peak);
        }
    }
    md
}

pub fn metrics(returns: &[f64], q: f64) -> Result<MetricBlock> {
    let l = returns.len();
    if l < 2 {
        return Err(Error::Config(format!(
            "metric block needs at least two returns, got {l}"
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical {
            context: "metrics",
            detail: "non-finite return in path".into(),
        });
    }
    let n = l as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let m2 = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let m3 = returns
        .iter()
        .map(|r| (r - mean) * (r - mean) * (r - mean))
        .sum::<f64>()
        / n;

    let av = mean * MONTHS_PER_YEAR;
    let sd = (m2 * MONTHS_PER_YEAR).sqrt();
    let ir = if sd > 0.0 { Some(av / sd) } else { None };
    let sk = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let md = max_drawdown(returns);

    let losses: Vec<f64> = returns.iter().map(|r| -r).collect();
    let es_monthly = empirical_cvar(&losses, q)?.cvar;
    let es = es_monthly * MONTHS_PER_YEAR;
    let cr = if es_monthly.abs() > 1e-300 {
        Some(mean / es_monthly)
    } else {
        None
    };
    let rr = if es_monthly.abs() > 1e-300 {
        // Treating returns themselves as "losses" hands back the mean of the
        // largest (1-q) fraction, i.e. the best-tail average.
        Some(empirical_cvar(returns, q)?.cvar / es_monthly)
    } else {
        None
    };

    Ok(MetricBlock {
        av,
        sd,
        ir,
        es,
        sk,
        md,
        cr,
        rr,
    })
}
