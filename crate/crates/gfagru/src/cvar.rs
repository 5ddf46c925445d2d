//! Conditional value-at-risk estimation and scenario-based portfolio
//! optimisation.
//!
//! `empirical_cvar` uses the left-endpoint order-statistic convention: the
//! threshold is the `ceil(q*n)`-th smallest loss and the tail average adds
//! `(1/((1-q)n)) * sum((l - threshold)+)`. The portfolio optimiser solves the
//! scenario linear program in its dual form, whose row count is the asset
//! count plus one regardless of how many scenarios are supplied; optimal
//! weights are read off the row multipliers.

use crate::error::{Error, Result};
use crate::genfactor::ScenarioMatrix;
use crate::simplex::{self, LinearProgram};
use rayon::prelude::*;

/// Result of the empirical tail estimator on a loss sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvarEstimate {
    /// Value-at-risk: the `ceil(q*n)`-th smallest loss (left endpoint under
    /// ties and integer `q*n`).
    pub var_threshold: f64,
    /// Mean of the worst `(1-q)` fraction of losses.
    pub cvar: f64,
}

/// Order-statistic index `ceil(q*n)` with a guard against floating-point
/// drift when `q*n` is mathematically an integer.
fn quantile_index(q: f64, n: usize) -> usize {
    let t = q * n as f64;
    let r = t.round();
    let k = if (t - r).abs() <= 1e-9 * (1.0 + t) {
        r as usize
    } else {
        t.ceil() as usize
    };
    k.clamp(1, n)
}

pub fn empirical_cvar(losses: &[f64], q: f64) -> Result<CvarEstimate> {
    let n = losses.len();
    if n == 0 {
        return Err(Error::Config("empty loss sample".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Config(format!("tail level q={q} outside (0, 1)")));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numerical {
            context: "empirical_cvar",
            detail: "non-finite loss".into(),
        });
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = quantile_index(q, n);
    let alpha = sorted[k - 1];
    let tail: f64 = sorted[k..].iter().map(|l| (l - alpha).max(0.0)).sum();
    let cvar = alpha + tail / ((1.0 - q) * n as f64);
    Ok(CvarEstimate {
        var_threshold: alpha,
        cvar,
    })
}

/// Scenario program: minimise CVaR at level `q` of portfolio loss subject to
/// full investment, no short sales, and an expected-return equality.
#[derive(Debug, Clone)]
pub struct CvarProblem<'a> {
    pub scenarios: &'a ScenarioMatrix,
    pub q: f64,
    pub target_return: f64,
    /// Expected returns used in the equality constraint; defaults to the
    /// scenario column means.
    pub mean_returns: Option<&'a [f64]>,
}

#[derive(Debug, Clone)]
pub struct CvarSolution {
    pub weights: Vec<f64>,
    pub var_threshold: f64,
    pub cvar: f64,
    pub expected_return: f64,
    pub lp_iterations: usize,
}

pub fn solve(problem: &CvarProblem) -> Result<CvarSolution> {
    let sc = problem.scenarios;
    let n = sc.n_scenarios;
    let n_assets = sc.tickers.len();
    if n == 0 || n_assets == 0 {
        return Err(Error::Config("empty scenario matrix".into()));
    }
    if !(problem.q > 0.0 && problem.q < 1.0) {
        return Err(Error::Config(format!(
            "tail level q={} outside (0, 1)",
            problem.q
        )));
    }
    let mu = match problem.mean_returns {
        Some(m) => {
            if m.len() != n_assets {
                return Err(Error::Shape {
                    op: "cvar_solve",
                    detail: "mean-return vector length mismatch".into(),
                });
            }
            m.to_vec()
        }
        None => sc.empirical_mean(),
    };
    let r0 = problem.target_return;
    let mu_min = mu.iter().cloned().fold(f64::INFINITY, f64::min);
    let mu_max = mu.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if r0 < mu_min - 1e-12 || r0 > mu_max + 1e-12 {
        return Err(Error::Infeasible(format!(
            "target return {r0:.6} outside attainable range [{mu_min:.6}, {mu_max:.6}]"
        )));
    }

    // Dual scenario program, in minimisation form:
    //   min  -lam - r0 * rho
    //   s.t. sum_j pi_j = 1                                  (row 0)
    //        sum_j Y[j][k] pi_j + lam + mu[k] rho + s_k = 0  (row k+1)
    //        0 <= pi_j <= 1 / ((1-q) n),  s_k >= 0,  lam/rho free.
    // Stationarity of the corresponding Lagrangian forces the row multipliers
    // y to satisfy sum_k(-y_{k+1}) = 1, sum_k(-y_{k+1}) mu_k = r0 and
    // -y_{k+1} >= 0, so w_k = -y_{k+1} is the optimal portfolio and the
    // minimised objective is the negated optimal CVaR.
    let m_rows = n_assets + 1;
    let n_cols = n + 2 + n_assets;
    let cap = 1.0 / ((1.0 - problem.q) * n as f64);
    let mut cols = vec![0.0; m_rows * n_cols];
    let mut objective = vec![0.0; n_cols];
    let mut lower = vec![0.0; n_cols];
    let mut upper = vec![f64::INFINITY; n_cols];

    for j in 0..n {
        let col = &mut cols[j * m_rows..(j + 1) * m_rows];
        col[0] = 1.0;
        col[1..].copy_from_slice(sc.row(j));
        upper[j] = cap;
    }
    let lam = n;
    let rho = n + 1;
    for k in 0..n_assets {
        cols[lam * m_rows + 1 + k] = 1.0;
        cols[rho * m_rows + 1 + k] = mu[k];
        cols[(n + 2 + k) * m_rows + 1 + k] = 1.0;
    }
    objective[lam] = -1.0;
    objective[rho] = -r0;
    lower[lam] = f64::NEG_INFINITY;
    lower[rho] = f64::NEG_INFINITY;

    let mut rhs = vec![0.0; m_rows];
    rhs[0] = 1.0;

    let lp = LinearProgram {
        n_rows: m_rows,
        n_cols,
        cols,
        objective,
        rhs,
        lower,
        upper,
    };
    let sol = simplex::solve(&lp)?;

    let mut weights: Vec<f64> = (0..n_assets).map(|k| -sol.duals[k + 1]).collect();
    let mut total = 0.0;
    for w in weights.iter_mut() {
        if *w < 0.0 {
            if *w < -1e-7 {
                return Err(Error::Numerical {
                    context: "cvar_solve",
                    detail: format!("negative recovered weight {w:.3e}"),
                });
            }
            *w = 0.0;
        }
        total += *w;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical {
            context: "cvar_solve",
            detail: format!("recovered weights sum to {total:.8}"),
        });
    }
    for w in weights.iter_mut() {
        *w /= total;
    }

    let losses: Vec<f64> = (0..n)
        .map(|j| {
            -sc.row(j)
                .iter()
                .zip(&weights)
                .map(|(y, w)| y * w)
                .sum::<f64>()
        })
        .collect();
    let est = empirical_cvar(&losses, problem.q)?;

    // The minimised dual objective must coincide with the empirical tail
    // average at the recovered weights (the scenario program's optimality
    // identity); disagreement signals a numerical failure.
    let scale = 1.0 + est.cvar.abs();
    if (est.cvar - (-sol.objective)).abs() > 1e-6 * scale {
        return Err(Error::Numerical {
            context: "cvar_solve",
            detail: format!(
                "objective mismatch: lp {:.9} vs empirical {:.9}",
                -sol.objective, est.cvar
            ),
        });
    }

    let expected_return = mu.iter().zip(&weights).map(|(m, w)| m * w).sum();
    Ok(CvarSolution {
        weights,
        var_threshold: est.var_threshold,
        cvar: est.cvar,
        expected_return,
        lp_iterations: sol.iterations,
    })
}

/// Solves one program per target return; infeasible targets yield per-slot
/// errors rather than failing the whole sweep. Targets are processed in
/// parallel with order preserved.
pub fn frontier(
    scenarios: &ScenarioMatrix,
    q: f64,
    targets: &[f64],
    mean_returns: Option<&[f64]>,
) -> Vec<Result<CvarSolution>> {
    targets
        .par_iter()
        .map(|&r0| {
            solve(&CvarProblem {
                scenarios,
                q,
                target_return: r0,
                mean_returns,
            })
        })
        .collect()
}
