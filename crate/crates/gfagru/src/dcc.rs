//! Pairwise dynamic conditional correlation over GARCH(1,1) volatilities,
//! with a single-factor (market-mimicking) simulation structure.
//!
//! Each stock is paired with the market; the pair correlation follows
//! `Q_t = (1-a-b)*Gamma_i + a*e_{t-1} e_{t-1}' + b*Q_{t-1}` on standardized
//! residuals, with `Q_1 = Gamma_i` and the correlation read off the
//! unit-diagonal rescaling of `Q_t`. A single `(a, b)` is shared across all
//! pairs and estimated by pooled second-stage quasi-likelihood. Joint draws
//! use the one-factor identity `r_i/sigma_i = rho_i * (r_M/sigma_M) +
//! sqrt(1-rho_i^2) * Z_i`.

use crate::error::{Error, Result};
use crate::garch::nelder_mead;
use crate::genfactor::{ScenarioMatrix, SIM_BLOCK};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DccParams {
    pub a: f64,
    pub b: f64,
    /// Off-diagonal of the 2x2 unconditional correlation matrix for each
    /// (market, stock) pair; the diagonal is one by construction.
    pub gammas: Vec<f64>,
}

impl DccParams {
    pub fn is_valid(&self) -> bool {
        self.a >= 0.0
            && self.b >= 0.0
            && self.a + self.b < 1.0
            && self.gammas.iter().all(|g| g.abs() < 1.0)
    }
}

#[derive(Debug, Clone)]
pub struct DccFit {
    pub params: DccParams,
    /// Fitted-window correlation path per stock (`rho_path[i][t]`).
    pub rho_path: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

/// One-step-ahead state of a single 2x2 recursion.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PairState {
    pub q11: f64,
    pub q12: f64,
    pub q22: f64,
}

impl PairState {
    pub fn from_gamma(gamma: f64) -> Self {
        PairState {
            q11: 1.0,
            q12: gamma,
            q22: 1.0,
        }
    }

    pub fn rho(&self) -> f64 {
        self.q12 / (self.q11 * self.q22).sqrt()
    }

    /// Applies the mean-reverting update with the latest residual pair.
    pub fn advance(&mut self, a: f64, b: f64, gamma: f64, e_market: f64, e_stock: f64) {
        let keep = 1.0 - a - b;
        self.q11 = keep + a * e_market * e_market + b * self.q11;
        self.q12 = keep * gamma + a * e_market * e_stock + b * self.q12;
        self.q22 = keep + a * e_stock * e_stock + b * self.q22;
    }
}

/// Correlation path over a residual sample for fixed dynamics: `rho[t]` is
/// the correlation in force at observation `t`, starting from `Gamma`.
pub fn correlation_path(
    a: f64,
    b: f64,
    gamma: f64,
    e_market: &[f64],
    e_stock: &[f64],
) -> Vec<f64> {
    let mut state = PairState::from_gamma(gamma);
    let mut path = Vec::with_capacity(e_market.len());
    for t in 0..e_market.len() {
        if t > 0 {
            state.advance(a, b, gamma, e_market[t - 1], e_stock[t - 1]);
        }
        path.push(state.rho());
    }
    path
}

/// No-mean correlation of two residual series, rescaled to guarantee unit
/// diagonal in the implied 2x2 matrix.
fn residual_correlation(e_market: &[f64], e_stock: &[f64]) -> f64 {
    let mm: f64 = e_market.iter().map(|e| e * e).sum();
    let ss: f64 = e_stock.iter().map(|e| e * e).sum();
    let ms: f64 = e_market.iter().zip(e_stock).map(|(a, b)| a * b).sum();
    ms / (mm * ss).sqrt()
}

/// Two-stage estimation: per-pair `Gamma_i` from residual correlations, then
/// one `(a, b)` maximising the pooled pair quasi-likelihood.
pub fn fit_dcc(e_market: &[f64], e_stocks: &[&[f64]]) -> Result<DccFit> {
    let t_len = e_market.len();
    if t_len < 10 {
        return Err(Error::Config(format!(
            "need at least 10 residual observations, got {t_len}"
        )));
    }
    if e_stocks.is_empty() {
        return Err(Error::Config("no stock residual series supplied".into()));
    }
    for (i, e) in e_stocks.iter().enumerate() {
        if e.len() != t_len {
            return Err(Error::Shape {
                op: "fit_dcc",
                detail: format!("stock {i} residual length {} vs market {t_len}", e.len()),
            });
        }
    }
    let gammas: Vec<f64> = e_stocks
        .iter()
        .map(|e| residual_correlation(e_market, e))
        .collect();
    for (i, g) in gammas.iter().enumerate() {
        if !g.is_finite() || g.abs() >= 1.0 - 1e-10 {
            return Err(Error::Numerical {
                context: "fit_dcc",
                detail: format!(
                    "pair {i} unconditional correlation {g} leaves the matrix non positive definite"
                ),
            });
        }
    }

    let pooled_nll = |x: &[f64; 2]| -> f64 {
        let e1 = x[0].clamp(-40.0, 40.0).exp();
        let e2 = x[1].clamp(-40.0, 40.0).exp();
        let denom = 1.0 + e1 + e2;
        let (a, b) = (e1 / denom, e2 / denom);
        let mut nll = 0.0;
        for (i, e_i) in e_stocks.iter().enumerate() {
            let mut state = PairState::from_gamma(gammas[i]);
            for t in 0..t_len {
                if t > 0 {
                    state.advance(a, b, gammas[i], e_market[t - 1], e_i[t - 1]);
                }
                let rho = state.rho();
                let det = 1.0 - rho * rho;
                if !(det > 1e-14) {
                    return f64::INFINITY;
                }
                let (em, es) = (e_market[t], e_i[t]);
                nll += 0.5 * (det.ln() + (em * em - 2.0 * rho * em * es + es * es) / det);
            }
        }
        if nll.is_finite() {
            nll
        } else {
            f64::INFINITY
        }
    };

    let a0: f64 = 0.05;
    let b0: f64 = 0.90;
    let rest = 1.0 - a0 - b0;
    let mut x = [(a0 / rest).ln(), (b0 / rest).ln()];
    let mut best = f64::INFINITY;
    for round in 0..3 {
        let scale = if round == 0 { 0.8 } else { 0.2 };
        let (xn, fb) = nelder_mead(&pooled_nll, &x, scale, 3000);
        if fb < best {
            best = fb;
            x = xn;
        }
    }
    if !best.is_finite() {
        return Err(Error::Numerical {
            context: "fit_dcc",
            detail: "pooled correlation likelihood search failed".into(),
        });
    }
    let e1 = x[0].clamp(-40.0, 40.0).exp();
    let e2 = x[1].clamp(-40.0, 40.0).exp();
    let denom = 1.0 + e1 + e2;
    let params = DccParams {
        a: e1 / denom,
        b: e2 / denom,
        gammas,
    };
    let rho_path = e_stocks
        .iter()
        .enumerate()
        .map(|(i, e)| correlation_path(params.a, params.b, params.gammas[i], e_market, e))
        .collect();
    Ok(DccFit {
        params,
        rho_path,
        log_likelihood: -best,
    })
}

/// One-step-ahead joint forecast for the market and every stock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DccForecast {
    pub tickers: Vec<String>,
    pub sigma_market: f64,
    pub sigmas: Vec<f64>,
    pub rhos: Vec<f64>,
    /// Expected monthly return per stock, added on top of the volatility
    /// draw.
    pub means: Vec<f64>,
}

impl DccForecast {
    fn validate(&self) -> Result<()> {
        let n = self.tickers.len();
        if self.sigmas.len() != n || self.rhos.len() != n || self.means.len() != n {
            return Err(Error::Shape {
                op: "dcc_simulate",
                detail: "forecast field lengths disagree".into(),
            });
        }
        if !(self.sigma_market > 0.0) || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("non-positive forecast volatility".into()));
        }
        if self.rhos.iter().any(|r| r.abs() > 1.0 || !r.is_finite()) {
            return Err(Error::Config("forecast correlation outside [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Draws `n` joint one-month scenarios under the Gaussian one-factor
/// structure. Scenario blocks use independent, position-keyed RNG streams so
/// results are reproducible and independent of worker scheduling; the market
/// draw (without a mean) is retained alongside the stock columns.
pub fn dcc_simulate(forecast: &DccForecast, means: &[f64], n: usize, seed: u64) -> Result<ScenarioMatrix> {
    forecast.validate()?;
    if means.len() != forecast.tickers.len() {
        return Err(Error::Shape {
            op: "dcc_simulate",
            detail: "mean vector length mismatch".into(),
        });
    }
    if n == 0 {
        return Err(Error::Config("scenario count must be positive".into()));
    }
    let n_assets = forecast.tickers.len();
    let loadings: Vec<f64> = forecast
        .rhos
        .iter()
        .map(|r| (1.0 - r * r).max(0.0).sqrt())
        .collect();

    let mut returns = vec![0.0; n * n_assets];
    let mut market = vec![0.0; n];
    let blocks: Vec<(usize, &mut [f64], &mut [f64])> = {
        let ret_chunks = returns.chunks_mut(SIM_BLOCK * n_assets);
        let mkt_chunks = market.chunks_mut(SIM_BLOCK);
        ret_chunks
            .zip(mkt_chunks)
            .enumerate()
            .map(|(b, (r, m))| (b, r, m))
            .collect()
    };
    blocks.into_par_iter().for_each(|(block, ret, mkt)| {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(block as u64 + 1);
        let rows = mkt.len();
        for s in 0..rows {
            let z_m: f64 = StandardNormal.sample(&mut rng);
            mkt[s] = forecast.sigma_market * z_m;
            for i in 0..n_assets {
                let z_i: f64 = StandardNormal.sample(&mut rng);
                let std_draw = forecast.rhos[i] * z_m + loadings[i] * z_i;
                ret[s * n_assets + i] = means[i] + forecast.sigmas[i] * std_draw;
            }
        }
    });

    Ok(ScenarioMatrix {
        tickers: forecast.tickers.clone(),
        returns,
        n_scenarios: n,
        market: Some(market),
    })
}
