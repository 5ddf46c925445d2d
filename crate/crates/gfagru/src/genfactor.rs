//! Heavy-tail generative transform and the single-factor generative model.
//!
//! The transform `g(x; u, v) = x * ((u^x + v^{-x}) / A + 1)` maps a standard
//! normal draw to a heavy-tailed variable: `u` controls the right tail, `v`
//! the left, and `A` normalises the central slope so that `g'(0) = 2/A + 1`
//! regardless of the tail parameters. With `u = v = 1` the transform is the
//! straight line `(2/A + 1) x`, which collapses the model to a plain Gaussian
//! factor model.
//!
//! Market returns follow `Y_M = alpha_M + beta_M * g(Z_M; nu_M)`; each stock
//! follows `Y_i = alpha_i + beta_i * g(Z_M; nu_i_M) + gamma_i * g(Z_i; nu_i)`
//! with independent standard normal latents.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Central-slope normaliser of the transform.
pub const A_DEFAULT: f64 = 4.0;

/// Default Newton tolerance for the inverse transform.
pub const INV_TOL: f64 = 1e-10;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Tail parameter pair (right tail `u`, left tail `v`), both in `[1, 3]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailParams {
    pub u: f64,
    pub v: f64,
}

impl TailParams {
    pub const MIN: f64 = 1.0;
    pub const MAX: f64 = 3.0;

    /// Gaussian reduction: `g` becomes linear with slope `2/A + 1`.
    pub const NAIVE: TailParams = TailParams { u: 1.0, v: 1.0 };

    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(Self::MIN..=Self::MAX).contains(&u) || !(Self::MIN..=Self::MAX).contains(&v) {
            return Err(Error::Config(format!(
                "tail parameters must lie in [{}, {}], got u={u}, v={v}",
                Self::MIN,
                Self::MAX
            )));
        }
        Ok(TailParams { u, v })
    }

    /// Projection onto the feasible box, used after optimizer steps.
    pub fn clamped(u: f64, v: f64) -> Self {
        TailParams {
            u: u.clamp(Self::MIN, Self::MAX),
            v: v.clamp(Self::MIN, Self::MAX),
        }
    }
}

impl Default for TailParams {
    /// Training initialisation point.
    fn default() -> Self {
        TailParams { u: 1.5, v: 1.5 }
    }
}

/// Market equation coefficients (`beta > 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketTheta {
    pub alpha: f64,
    pub beta: f64,
}

/// Stock equation coefficients (`gamma > 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StockTheta {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketModel {
    pub theta: MarketTheta,
    pub tail: TailParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StockModel {
    pub theta: StockTheta,
    /// Tail pair applied to the shared market factor in this stock's equation.
    pub tail_market: TailParams,
    /// Tail pair of the stock's own idiosyncratic factor.
    pub tail_own: TailParams,
}

/// One-step-ahead model for the market and every stock, as consumed by the
/// scenario simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastedFactorModel {
    pub market: MarketModel,
    pub tickers: Vec<String>,
    pub stocks: Vec<StockModel>,
}

// Saturation threshold for the exponential terms of `g`. Unreachable for
// u, v <= 3 and |x| <= 600; kept so extreme optimizer excursions degrade
// into a monotone clamp instead of infinities.
const EXP_CAP: f64 = 690.0;

/// Heavy-tail transform `g(x; u, v) = x ((u^x + v^{-x})/A + 1)`.
pub fn g(x: f64, tail: TailParams, a: f64) -> f64 {
    let t1 = x * tail.u.ln();
    let t2 = -x * tail.v.ln();
    if t1.max(t2) > EXP_CAP {
        return x.signum() * f64::MAX / 4.0;
    }
    x * ((t1.exp() + t2.exp()) / a + 1.0)
}

/// Derivative of `g` in `x`; strictly positive for `u, v` in `[1, 3]`, `A = 4`.
pub fn g_prime(x: f64, tail: TailParams, a: f64) -> f64 {
    let lu = tail.u.ln();
    let lv = tail.v.ln();
    let t1 = x * lu;
    let t2 = -x * lv;
    if t1.max(t2) > EXP_CAP {
        return f64::MAX / 4.0;
    }
    let pu = t1.exp();
    let pv = t2.exp();
    (pu + pv) / a + 1.0 + x * (pu * lu - pv * lv) / a
}

/// Inverse of the transform, solved with bracketed Newton iterations.
///
/// The initial bracket `[-1, 1]` is doubled until it straddles the root;
/// Newton steps that leave the bracket, or land where the derivative is
/// tiny, fall back to bisection. Converges for every finite `y` because `g`
/// is a strictly increasing bijection of the real line.
pub fn g_inverse(y: f64, tail: TailParams, a: f64, tol: f64) -> Result<f64> {
    if !y.is_finite() {
        return Err(Error::Numerical {
            context: "g_inverse",
            detail: format!("target {y} is not finite"),
        });
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
    let mut expansions = 0;
    while g(lo, tail, a) > y {
        lo *= 2.0;
        expansions += 1;
        if expansions > 1100 {
            return Err(Error::Numerical {
                context: "g_inverse",
                detail: format!("bracket expansion failed for y={y}"),
            });
        }
    }
    while g(hi, tail, a) < y {
        hi *= 2.0;
        expansions += 1;
        if expansions > 1100 {
            return Err(Error::Numerical {
                context: "g_inverse",
                detail: format!("bracket expansion failed for y={y}"),
            });
        }
    }

    // Central slope is 2/A + 1, so y / g'(0) is a good starting point.
    let mut x = (y / (2.0 / a + 1.0)).clamp(lo, hi);
    for _ in 0..200 {
        let fx = g(x, tail, a) - y;
        if fx == 0.0 {
            return Ok(x);
        }
        if fx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dfx = g_prime(x, tail, a);
        let newton = x - fx / dfx;
        let next = if dfx > 1e-300 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - x).abs();
        x = next;
        if step <= tol * x.abs().max(1.0) && (g(x, tail, a) - y).abs() <= tol * y.abs().max(1.0) {
            return Ok(x);
        }
    }
    Err(Error::Numerical {
        context: "g_inverse",
        detail: format!("no convergence for y={y} with tail {tail:?}"),
    })
}

/// Log-likelihood of one market observation under the change of variable
/// `Y = alpha + beta g(Z)`:
/// `l = -ln(beta g'(z)) - z^2/2 - ln(2 pi)/2` with `z = g^{-1}((y-alpha)/beta)`.
pub fn market_loglik(y: f64, theta: MarketTheta, tail: TailParams, a: f64) -> Result<f64> {
    if theta.beta <= 0.0 {
        return Err(Error::Numerical {
            context: "market_loglik",
            detail: format!("beta must be positive, got {}", theta.beta),
        });
    }
    let z = g_inverse((y - theta.alpha) / theta.beta, tail, a, INV_TOL)?;
    Ok(-(theta.beta * g_prime(z, tail, a)).ln() - 0.5 * z * z - 0.5 * LN_2PI)
}

/// Conditional (quasi) log-likelihood of one stock observation given the
/// realized market latent `z_m`, which is treated as data.
pub fn stock_cond_loglik(
    y: f64,
    z_m: f64,
    theta: StockTheta,
    tail_market: TailParams,
    tail_own: TailParams,
    a: f64,
) -> Result<f64> {
    if theta.gamma <= 0.0 {
        return Err(Error::Numerical {
            context: "stock_cond_loglik",
            detail: format!("gamma must be positive, got {}", theta.gamma),
        });
    }
    let resid = (y - theta.alpha - theta.beta * g(z_m, tail_market, a)) / theta.gamma;
    let z = g_inverse(resid, tail_own, a, INV_TOL)?;
    Ok(-(theta.gamma * g_prime(z, tail_own, a)).ln() - 0.5 * z * z - 0.5 * LN_2PI)
}

/// Realized market latent `z = g^{-1}((y - alpha)/beta; nu_M)`.
pub fn market_latent(y: f64, theta: MarketTheta, tail: TailParams, a: f64) -> Result<f64> {
    if theta.beta <= 0.0 {
        return Err(Error::Numerical {
            context: "market_latent",
            detail: format!("beta must be positive, got {}", theta.beta),
        });
    }
    g_inverse((y - theta.alpha) / theta.beta, tail, a, INV_TOL)
}

/// Monte Carlo scenario set drawn from a forecasted factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioMatrix {
    pub tickers: Vec<String>,
    /// Row-major `n_scenarios x tickers.len()` stock returns.
    pub returns: Vec<f64>,
    pub n_scenarios: usize,
    /// Simulated market returns, one per scenario, when requested.
    pub market: Option<Vec<f64>>,
}

impl ScenarioMatrix {
    pub fn n_assets(&self) -> usize {
        self.tickers.len()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.n_assets();
        &self.returns[j * n..(j + 1) * n]
    }

    /// Column means, the plug-in estimate of expected returns.
    pub fn empirical_mean(&self) -> Vec<f64> {
        let n = self.n_assets();
        let mut mu = vec![0.0; n];
        for j in 0..self.n_scenarios {
            let row = self.row(j);
            for (m, r) in mu.iter_mut().zip(row) {
                *m += r;
            }
        }
        for m in &mut mu {
            *m /= self.n_scenarios as f64;
        }
        mu
    }
}

// Scenario rows are generated in fixed blocks, each from its own counter
// stream of the seeded generator, so the matrix is identical for any worker
// count.
/// Scenario-generation block size: each block draws from its own RNG stream
/// keyed by position, so outputs are identical regardless of how blocks are
/// scheduled across threads.
pub(crate) const SIM_BLOCK: usize = 1024;

/// Draws `n` joint scenarios from the model. Identical output for identical
/// `(model, n, seed)` regardless of thread count.
pub fn simulate(
    model: &ForecastedFactorModel,
    n: usize,
    seed: u64,
    keep_market: bool,
    a: f64,
) -> Result<ScenarioMatrix> {
    use rayon::prelude::*;

    if n == 0 {
        return Err(Error::Config("scenario count must be positive".into()));
    }
    let n_assets = model.stocks.len();
    if n_assets != model.tickers.len() {
        return Err(Error::Config(format!(
            "{} stock models vs {} tickers",
            n_assets,
            model.tickers.len()
        )));
    }
    let mut returns = vec![0.0; n * n_assets];
    let mut market = vec![0.0; n];

    let blocks: Vec<(usize, &mut [f64], &mut [f64])> = returns
        .chunks_mut(SIM_BLOCK * n_assets)
        .zip(market.chunks_mut(SIM_BLOCK))
        .enumerate()
        .map(|(b, (rc, mc))| (b, rc, mc))
        .collect();

    blocks
        .into_par_iter()
        .for_each(|(block, ret_chunk, mkt_chunk)| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(block as u64 + 1);
            let rows = mkt_chunk.len();
            for r in 0..rows {
                let z_m: f64 = StandardNormal.sample(&mut rng);
                let gm = model.market;
                mkt_chunk[r] = gm.theta.alpha + gm.theta.beta * g(z_m, gm.tail, a);
                for (i, stock) in model.stocks.iter().enumerate() {
                    let z_i: f64 = StandardNormal.sample(&mut rng);
                    ret_chunk[r * n_assets + i] = stock.theta.alpha
                        + stock.theta.beta * g(z_m, stock.tail_market, a)
                        + stock.theta.gamma * g(z_i, stock.tail_own, a);
                }
            }
        });

    Ok(ScenarioMatrix {
        tickers: model.tickers.clone(),
        returns,
        n_scenarios: n,
        market: if keep_market { Some(market) } else { None },
    })
}
