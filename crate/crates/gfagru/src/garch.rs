//! Univariate GARCH(1,1) volatility filtering and quasi-maximum-likelihood
//! estimation.
//!
//! The variance recursion is `s2[t] = omega + alpha * r[t-1]^2 + beta *
//! s2[t-1]` with `s2[0]` initialised at the sample variance of the fitted
//! window. Estimation maximises the Gaussian quasi-likelihood over a
//! transformed parameter space that enforces positivity and `alpha + beta <
//! 1` by construction, using a deterministic Nelder-Mead search.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GarchParams {
    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }

    pub fn is_valid(&self) -> bool {
        self.omega > 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0
            && self.alpha + self.beta < 1.0
    }
}

#[derive(Debug, Clone)]
pub struct GarchFit {
    pub params: GarchParams,
    pub log_likelihood: f64,
    /// Conditional variances over the fitted window.
    pub conditional_variance: Vec<f64>,
}

/// Runs the variance recursion; `sigma2_init` seeds `s2[0]`.
pub fn garch_filter(returns: &[f64], params: &GarchParams, sigma2_init: f64) -> Vec<f64> {
    let mut s2 = Vec::with_capacity(returns.len());
    let mut cur = sigma2_init;
    for (t, &r) in returns.iter().enumerate() {
        if t > 0 {
            cur = params.omega + params.alpha * returns[t - 1] * returns[t - 1] + params.beta * cur;
        }
        let _ = r;
        s2.push(cur);
    }
    s2
}

/// One-step-ahead variance given the latest return and conditional variance.
pub fn forecast_variance(params: &GarchParams, last_return: f64, last_sigma2: f64) -> f64 {
    params.omega + params.alpha * last_return * last_return + params.beta * last_sigma2
}

pub fn gaussian_quasi_loglik(returns: &[f64], sigma2: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    returns
        .iter()
        .zip(sigma2)
        .map(|(r, s2)| -0.5 * (ln_2pi + s2.ln() + r * r / s2))
        .sum()
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

/// Unconstrained parameterisation: `omega = exp(x0)` and `(alpha, beta) =
/// (exp(x1), exp(x2)) / (1 + exp(x1) + exp(x2))`, which keeps the recursion
/// stationary for every search point.
fn decode(x: &[f64; 3]) -> GarchParams {
    let e1 = x[1].clamp(-40.0, 40.0).exp();
    let e2 = x[2].clamp(-40.0, 40.0).exp();
    let denom = 1.0 + e1 + e2;
    GarchParams {
        omega: x[0].clamp(-60.0, 60.0).exp(),
        alpha: e1 / denom,
        beta: e2 / denom,
    }
}

pub fn fit_garch(returns: &[f64]) -> Result<GarchFit> {
    if returns.len() < 10 {
        return Err(Error::Config(format!(
            "need at least 10 observations to fit a variance recursion, got {}",
            returns.len()
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numerical {
            context: "fit_garch",
            detail: "non-finite return".into(),
        });
    }
    let var = sample_variance(returns);
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Numerical {
            context: "fit_garch",
            detail: "degenerate return sample (zero variance)".into(),
        });
    }

    let neg_loglik = |x: &[f64; 3]| -> f64 {
        let p = decode(x);
        if !p.is_valid() || !p.omega.is_finite() {
            return f64::INFINITY;
        }
        let s2 = garch_filter(returns, &p, var);
        if s2.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return f64::INFINITY;
        }
        let ll = gaussian_quasi_loglik(returns, &s2);
        if ll.is_finite() {
            -ll
        } else {
            f64::INFINITY
        }
    };

    // Multi-start search: a persistent regime (the common fitted shape for
    // financial returns), a moderate one, and a near-constant one; each start
    // gets a polish round around its incumbent.
    let encode = |omega: f64, a: f64, b: f64| -> [f64; 3] {
        let rest = 1.0 - a - b;
        [omega.ln(), (a / rest).ln(), (b / rest).ln()]
    };
    let starts = [
        encode(var * 0.05, 0.05, 0.90),
        encode(var * 0.40, 0.10, 0.50),
        encode(var, 1e-6, 1e-6),
    ];
    let mut x = starts[0];
    let mut best = f64::INFINITY;
    for start in starts {
        let mut xs = start;
        let mut fs = f64::INFINITY;
        for round in 0..2 {
            let scale = if round == 0 { 0.8 } else { 0.2 };
            let (xn, fb) = nelder_mead(&neg_loglik, &xs, scale, 4000);
            if fb < fs {
                fs = fb;
                xs = xn;
            }
        }
        if fs < best {
            best = fs;
            x = xs;
        }
    }
    if !best.is_finite() {
        return Err(Error::Numerical {
            context: "fit_garch",
            detail: "likelihood search failed to find a finite optimum".into(),
        });
    }

    // When the data carry no ARCH effect the likelihood is flat in the
    // persistence direction (with alpha at zero, any beta paired with a
    // rescaled omega filters to the same variances), so the argmax is not
    // identified. Collapse to the constant-variance model unless the dynamic
    // fit beats it by more than its two extra parameters' AIC allowance.
    let omega_flat = if returns.len() > 1 {
        returns[1..].iter().map(|r| r * r).sum::<f64>() / (returns.len() - 1) as f64
    } else {
        var
    };
    if omega_flat > 0.0 {
        let flat = encode(omega_flat, 1e-12, 1e-12);
        let f_flat = neg_loglik(&flat);
        if f_flat <= best + 2.0 {
            best = f_flat;
            x = flat;
        }
    }
    let params = decode(&x);
    let conditional_variance = garch_filter(returns, &params, var);
    Ok(GarchFit {
        params,
        log_likelihood: -best,
        conditional_variance,
    })
}

/// Simulates a return path with Gaussian innovations starting from the
/// unconditional variance.
pub fn simulate_garch<R: Rng>(params: &GarchParams, n: usize, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut s2 = params.unconditional_variance();
    for t in 0..n {
        if t > 0 {
            s2 = forecast_variance(params, out[t - 1], s2);
        }
        let z: f64 = StandardNormal.sample(rng);
        out.push(s2.sqrt() * z);
    }
    out
}

/// Deterministic Nelder-Mead on `D`-dimensional input; returns the best
/// point and value. Standard coefficients (reflect 1, expand 2, contract
/// 1/2, shrink 1/2); terminates on value spread or evaluation budget.
pub(crate) fn nelder_mead<const D: usize>(
    f: &dyn Fn(&[f64; D]) -> f64,
    x0: &[f64; D],
    scale: f64,
    max_evals: usize,
) -> ([f64; D], f64) {
    let mut pts: Vec<[f64; D]> = vec![*x0];
    for i in 0..D {
        let mut p = *x0;
        p[i] += scale;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| f(p)).collect();
    let mut evals = pts.len();

    while evals < max_evals {
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap_or(std::cmp::Ordering::Equal));
        let pts2: Vec<[f64; D]> = order.iter().map(|&i| pts[i]).collect();
        let vals2: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
        pts = pts2;
        vals = vals2;

        let spread = (vals[D] - vals[0]).abs();
        if spread <= 1e-12 * (1.0 + vals[0].abs()) && vals[0].is_finite() {
            break;
        }

        let mut centroid = [0.0; D];
        for p in pts.iter().take(D) {
            for i in 0..D {
                centroid[i] += p[i] / D as f64;
            }
        }
        let worst = pts[D];
        let mut reflect = [0.0; D];
        for i in 0..D {
            reflect[i] = centroid[i] + (centroid[i] - worst[i]);
        }
        let fr = f(&reflect);
        evals += 1;

        if fr < vals[0] {
            let mut expand = [0.0; D];
            for i in 0..D {
                expand[i] = centroid[i] + 2.0 * (centroid[i] - worst[i]);
            }
            let fe = f(&expand);
            evals += 1;
            if fe < fr {
                pts[D] = expand;
                vals[D] = fe;
            } else {
                pts[D] = reflect;
                vals[D] = fr;
            }
        } else if fr < vals[D - 1] {
            pts[D] = reflect;
            vals[D] = fr;
        } else {
            let (base, fbase) = if fr < vals[D] {
                (reflect, fr)
            } else {
                (worst, vals[D])
            };
            let mut contract = [0.0; D];
            for i in 0..D {
                contract[i] = centroid[i] + 0.5 * (base[i] - centroid[i]);
            }
            let fc = f(&contract);
            evals += 1;
            if fc < fbase {
                pts[D] = contract;
                vals[D] = fc;
            } else {
                for k in 1..=D {
                    for i in 0..D {
                        pts[k][i] = pts[0][i] + 0.5 * (pts[k][i] - pts[0][i]);
                    }
                    vals[k] = f(&pts[k]);
                    evals += 1;
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=D {
        if vals[i] < vals[best] {
            best = i;
        }
    }
    (pts[best], vals[best])
}
