//! Rolling monthly re-balancing backtest.
//!
//! At each rebalance date a strategy produces a scenario set (or fixed
//! weights), the shortfall program picks the allocation, the position is
//! held for one month, and the realized return is recorded. Randomized
//! strategies repeat the simulate-and-optimize step several times; metric
//! vectors are averaged over repetitions with their dispersion reported.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{equal_weight, static_saa_scenarios, DccMmModel, MonthlyPanel};
use crate::coverage::coverage_tests;
use crate::cvar::{empirical_cvar, solve, CvarProblem};
use crate::data::{build_features, PriceTable};
use crate::dcc::dcc_simulate;
use crate::error::{Error, Result};
use crate::genfactor::{simulate, ForecastedFactorModel, ScenarioMatrix, A_DEFAULT};
use crate::metrics::{metrics, MetricBlock, DEFAULT_TAIL_LEVEL};
use crate::trainer::{ensemble_market_forecast, ensemble_stock_forecast, TrainedBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    EqualWeight,
    StaticSaa,
    DccMm,
    GfAgru,
}

impl Strategy {
    pub fn label(&self) -> &'static str {
        match self {
            Strategy::EqualWeight => "EW",
            Strategy::StaticSaa => "SAA",
            Strategy::DccMm => "DCC-MM",
            Strategy::GfAgru => "GF-AGRU",
        }
    }

    /// Whether the scenario build draws random samples; deterministic
    /// strategies collapse the repetition protocol to a single pass.
    pub fn is_randomized(&self) -> bool {
        matches!(self, Strategy::DccMm | Strategy::GfAgru)
    }

    /// Equal weighting ignores the target-return sweep.
    pub fn sweeps_targets(&self) -> bool {
        *self != Strategy::EqualWeight
    }
}

/// Target-return constraint: a fixed monthly level, or the per-date
/// expected return of the equal-weight portfolio under the same scenario
/// means (the time-varying "chase equal weights" target).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Fixed(f64),
    EqualWeightMean,
}

impl Target {
    pub fn label(&self) -> String {
        match self {
            Target::Fixed(r) => format!("{r}"),
            Target::EqualWeightMean => "ew".to_string(),
        }
    }

    fn resolve(&self, mean_returns: &[f64]) -> f64 {
        match self {
            Target::Fixed(r) => *r,
            Target::EqualWeightMean => {
                mean_returns.iter().sum::<f64>() / mean_returns.len() as f64
            }
        }
    }
}

/// Shortfall-program settings for one backtest run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvarConfig {
    /// Confidence level of the minimized shortfall.
    pub q: f64,
    /// Scenario draws per rebalance date for randomized strategies.
    pub n_scenarios: usize,
    pub target: Target,
}

/// Shared inputs of every strategy: the price history, its monthly panel,
/// and (for the factor-model strategy) the trained ensemble.
#[derive(Debug, Clone, Copy)]
pub struct BacktestData<'a> {
    pub prices: &'a PriceTable,
    pub market_ticker: &'a str,
    pub panel: &'a MonthlyPanel,
    pub bundle: Option<&'a TrainedBundle>,
    /// Daily return rows reserved for training; rebalance anchors stride
    /// from this row.
    pub train_rows: usize,
    pub t_window: usize,
    pub horizon: usize,
}

impl BacktestData<'_> {
    fn n_rebalances(&self) -> usize {
        self.panel.n_months() - self.panel.n_train_months
    }

    fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.panel.n_train_months != self.train_rows / self.horizon {
            return Err(Error::Config(format!(
                "panel holds {} training months but {} training rows at stride {} imply {}",
                self.panel.n_train_months,
                self.train_rows,
                self.horizon,
                self.train_rows / self.horizon
            )));
        }
        if self.n_rebalances() == 0 {
            return Err(Error::Data(
                "test segment too short for a single rebalance".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one backtest: averaged realized path and weights, the metric
/// block with its repetition dispersion, and the infeasibility log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BacktestReport {
    pub strategy: Strategy,
    pub target: Target,
    pub q: f64,
    pub n_scenarios: usize,
    /// Effective repetitions (1 for deterministic strategies).
    pub repetitions: usize,
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// Per-date realized portfolio returns, averaged over repetitions.
    pub returns: Vec<f64>,
    /// Per-date weights, averaged over repetitions (row per date).
    pub weights: Vec<Vec<f64>>,
    /// Per-date resolved target levels, averaged over repetitions; empty
    /// for the equal-weight strategy.
    pub resolved_targets: Vec<f64>,
    pub metrics: MetricBlock,
    /// Population standard deviation of each metric across repetitions.
    pub dispersion: MetricBlock,
    pub per_repetition: Vec<MetricBlock>,
    /// Count of date/repetition pairs where the program was infeasible and
    /// equal weights were used instead.
    pub fallback_count: usize,
    /// Dates (deduplicated) with at least one infeasible solve.
    pub fallback_dates: Vec<NaiveDate>,
}

impl BacktestReport {
    pub fn label(&self) -> String {
        if self.strategy.sweeps_targets() {
            format!("{}:{}", self.strategy.label(), self.target.label())
        } else {
            self.strategy.label().to_string()
        }
    }
}

/// SplitMix finalizer for decorrelated per-repetition / per-date seeds.
fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn expanding_means(panel: &MonthlyPanel, n_months: usize) -> Vec<f64> {
    let n_assets = panel.tickers.len();
    let mut means = vec![0.0; n_assets];
    for m in 0..n_months {
        for (i, r) in panel.stock_row(m).iter().enumerate() {
            means[i] += r;
        }
    }
    for m in &mut means {
        *m /= n_months as f64;
    }
    means
}

fn dot(w: &[f64], r: &[f64]) -> f64 {
    w.iter().zip(r).map(|(a, b)| a * b).sum()
}

/// One-step-ahead factor models at every rebalance date: feature windows
/// end at the last return row before the decision day, normalization uses
/// the frozen training statistics, and ensemble members are averaged.
pub fn gfagru_forecasts(data: &BacktestData) -> Result<Vec<ForecastedFactorModel>> {
    data.validate()?;
    let bundle = data
        .bundle
        .ok_or_else(|| Error::Config("factor-model strategy requires a trained bundle".into()))?;
    let bundle_tickers: Vec<&str> = bundle.stocks.iter().map(|s| s.ticker.as_str()).collect();
    let panel_tickers: Vec<&str> = data.panel.tickers.iter().map(String::as_str).collect();
    if bundle_tickers != panel_tickers {
        return Err(Error::Config(format!(
            "trained bundle covers {bundle_tickers:?} but the panel holds {panel_tickers:?}"
        )));
    }
    let returns = data.prices.to_returns()?;
    let market_col = returns.column(returns.ticker_index(data.market_ticker)?);
    let stock_cols: Vec<Vec<f64>> = bundle
        .stocks
        .iter()
        .map(|s| Ok(returns.column(returns.ticker_index(&s.ticker)?)))
        .collect::<Result<_>>()?;
    let use_attention = bundle.config.use_attention();
    let tickers = data.panel.tickers.clone();

    (0..data.n_rebalances())
        .into_par_iter()
        .map(|j| {
            let anchor = data.train_rows + j * data.horizon - 1;
            let raw = build_features(&market_col, None, anchor, data.t_window)?;
            let window = bundle.market_norm.normalize_window(&raw, data.t_window)?;
            let market = ensemble_market_forecast(&bundle.market, &window, use_attention)?;
            let stocks = bundle
                .stocks
                .iter()
                .zip(&stock_cols)
                .map(|(set, col)| {
                    let raw = build_features(&market_col, Some(col), anchor, data.t_window)?;
                    let window = set.norm.normalize_window(&raw, data.t_window)?;
                    ensemble_stock_forecast(&set.members, &window, use_attention)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ForecastedFactorModel {
                market,
                tickers: tickers.clone(),
                stocks,
            })
        })
        .collect()
}

enum ScenarioEngine<'a> {
    EqualWeight,
    StaticSaa,
    DccMm(DccMmModel),
    GfAgru(&'a [ForecastedFactorModel]),
}

struct WalkOutcome {
    returns: Vec<f64>,
    weights: Vec<Vec<f64>>,
    resolved: Vec<f64>,
    fallback_dates: Vec<usize>,
}

/// One pass over the test months with a fixed repetition seed.
fn walk(
    data: &BacktestData,
    mut engine: ScenarioEngine,
    cvar: &CvarConfig,
    rep_seed: u64,
) -> Result<WalkOutcome> {
    let panel = data.panel;
    let n_assets = panel.tickers.len();
    let m0 = panel.n_train_months;
    let l = data.n_rebalances();
    let mut out = WalkOutcome {
        returns: Vec::with_capacity(l),
        weights: Vec::with_capacity(l),
        resolved: Vec::with_capacity(l),
        fallback_dates: Vec::new(),
    };
    for j in 0..l {
        let scenarios: Option<ScenarioMatrix> = match &engine {
            ScenarioEngine::EqualWeight => None,
            ScenarioEngine::StaticSaa => Some(static_saa_scenarios(panel, m0 + j)?),
            ScenarioEngine::DccMm(model) => {
                let means = expanding_means(panel, m0 + j);
                let forecast = model.forecast(means);
                Some(dcc_simulate(
                    &forecast,
                    &forecast.means,
                    cvar.n_scenarios,
                    mix_seed(rep_seed, j as u64 + 1),
                )?)
            }
            ScenarioEngine::GfAgru(forecasts) => Some(simulate(
                &forecasts[j],
                cvar.n_scenarios,
                mix_seed(rep_seed, j as u64 + 1),
                false,
                A_DEFAULT,
            )?),
        };
        let w = match &scenarios {
            None => equal_weight(n_assets),
            Some(sc) => {
                let mu = sc.empirical_mean();
                let r0 = cvar.target.resolve(&mu);
                out.resolved.push(r0);
                match solve(&CvarProblem {
                    scenarios: sc,
                    q: cvar.q,
                    target_return: r0,
                    mean_returns: None,
                }) {
                    Ok(sol) => sol.weights,
                    Err(Error::Infeasible(_)) => {
                        out.fallback_dates.push(j);
                        equal_weight(n_assets)
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        out.returns.push(dot(&w, panel.stock_row(m0 + j)));
        out.weights.push(w);
        if let ScenarioEngine::DccMm(model) = &mut engine {
            model.advance(panel.market[m0 + j], panel.stock_row(m0 + j))?;
        }
    }
    Ok(out)
}

fn option_stat(values: Vec<Option<f64>>) -> (Option<f64>, Option<f64>) {
    if values.iter().any(Option::is_none) {
        return (None, None);
    }
    let xs: Vec<f64> = values.into_iter().map(Option::unwrap).collect();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (Some(mean), Some(var.sqrt()))
}

fn plain_stat(values: Vec<f64>) -> (f64, f64) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Mean and population dispersion of each metric over repetitions; a ratio
/// undefined in any repetition stays undefined in the aggregate.
fn aggregate_metrics(blocks: &[MetricBlock]) -> (MetricBlock, MetricBlock) {
    let (av, av_s) = plain_stat(blocks.iter().map(|b| b.av).collect());
    let (sd, sd_s) = plain_stat(blocks.iter().map(|b| b.sd).collect());
    let (es, es_s) = plain_stat(blocks.iter().map(|b| b.es).collect());
    let (sk, sk_s) = plain_stat(blocks.iter().map(|b| b.sk).collect());
    let (md, md_s) = plain_stat(blocks.iter().map(|b| b.md).collect());
    let (ir, ir_s) = option_stat(blocks.iter().map(|b| b.ir).collect());
    let (cr, cr_s) = option_stat(blocks.iter().map(|b| b.cr).collect());
    let (rr, rr_s) = option_stat(blocks.iter().map(|b| b.rr).collect());
    (
        MetricBlock { av, sd, ir, es, sk, md, cr, rr },
        MetricBlock {
            av: av_s,
            sd: sd_s,
            ir: ir_s,
            es: es_s,
            sk: sk_s,
            md: md_s,
            cr: cr_s,
            rr: rr_s,
        },
    )
}

/// Runs one strategy at one target: walks the test months once per
/// repetition (deterministic strategies once), averages paths, weights and
/// metrics, and logs infeasible-solve fallbacks.
pub fn run_backtest(
    strategy: Strategy,
    data: &BacktestData,
    cvar: &CvarConfig,
    repetitions: usize,
    seed: u64,
) -> Result<BacktestReport> {
    data.validate()?;
    if repetitions == 0 {
        return Err(Error::Config("repetition count must be positive".into()));
    }
    let panel = data.panel;
    let l = data.n_rebalances();
    let reps = if strategy.is_randomized() { repetitions } else { 1 };

    let forecasts: Vec<ForecastedFactorModel>; // outlives the walk engines
    let engines: Vec<ScenarioEngine> = match strategy {
        Strategy::EqualWeight => (0..reps).map(|_| ScenarioEngine::EqualWeight).collect(),
        Strategy::StaticSaa => (0..reps).map(|_| ScenarioEngine::StaticSaa).collect(),
        Strategy::DccMm => {
            let fitted = DccMmModel::fit(panel)?;
            (0..reps)
                .map(|_| ScenarioEngine::DccMm(fitted.clone()))
                .collect()
        }
        Strategy::GfAgru => {
            forecasts = gfagru_forecasts(data)?;
            (0..reps)
                .map(|_| ScenarioEngine::GfAgru(&forecasts))
                .collect()
        }
    };

    let outcomes: Vec<WalkOutcome> = engines
        .into_par_iter()
        .enumerate()
        .map(|(rep, engine)| walk(data, engine, cvar, mix_seed(seed, rep as u64 + 1)))
        .collect::<Result<Vec<_>>>()?;

    let n_assets = panel.tickers.len();
    let mut returns = vec![0.0; l];
    let mut weights = vec![vec![0.0; n_assets]; l];
    let mut resolved = vec![0.0; outcomes[0].resolved.len()];
    let mut fallback_count = 0;
    let mut fallback_idx: Vec<usize> = Vec::new();
    for o in &outcomes {
        for j in 0..l {
            returns[j] += o.returns[j] / reps as f64;
            for i in 0..n_assets {
                weights[j][i] += o.weights[j][i] / reps as f64;
            }
        }
        for (j, r) in o.resolved.iter().enumerate() {
            resolved[j] += r / reps as f64;
        }
        fallback_count += o.fallback_dates.len();
        fallback_idx.extend_from_slice(&o.fallback_dates);
    }
    fallback_idx.sort_unstable();
    fallback_idx.dedup();

    let per_repetition: Vec<MetricBlock> = outcomes
        .iter()
        .map(|o| metrics(&o.returns, DEFAULT_TAIL_LEVEL))
        .collect::<Result<_>>()?;
    let (mean_block, dispersion) = aggregate_metrics(&per_repetition);

    let dates: Vec<NaiveDate> = (0..l)
        .map(|j| panel.dates[panel.n_train_months + j])
        .collect();
    Ok(BacktestReport {
        strategy,
        target: cvar.target,
        q: cvar.q,
        n_scenarios: cvar.n_scenarios,
        repetitions: reps,
        fallback_dates: fallback_idx.into_iter().map(|j| dates[j]).collect(),
        dates,
        tickers: panel.tickers.clone(),
        returns,
        weights,
        resolved_targets: resolved,
        metrics: mean_block,
        dispersion,
        per_repetition,
        fallback_count,
    })
}

/// Per-date, per-asset one-month value-at-risk estimates from the factor
/// model, with violation indicators against realized returns.
///
/// Assets are ordered market first, then the stocks of the forecasts; each
/// `realized` row must follow the same order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarSeries {
    pub q: f64,
    pub n_samples: usize,
    pub assets: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// Loss quantiles, row per date.
    pub var: Vec<Vec<f64>>,
    /// Realized monthly returns, row per date.
    pub realized: Vec<Vec<f64>>,
    /// `realized < -var`, row per date.
    pub violations: Vec<Vec<bool>>,
}

impl VarSeries {
    /// Violation indicator sequence for one asset column.
    pub fn indicator_column(&self, asset: usize) -> Vec<bool> {
        self.violations.iter().map(|row| row[asset]).collect()
    }
}

/// Simulates `n` one-month outcomes at every date and reads off the
/// empirical q-quantile of losses per asset (market first).
pub fn var_forecast_series(
    forecasts: &[ForecastedFactorModel],
    dates: &[NaiveDate],
    realized: &[Vec<f64>],
    market_label: &str,
    q: f64,
    n: usize,
    seed: u64,
) -> Result<VarSeries> {
    if forecasts.is_empty() {
        return Err(Error::Data("no forecast dates".into()));
    }
    if dates.len() != forecasts.len() || realized.len() != forecasts.len() {
        return Err(Error::Shape {
            op: "var_forecast_series",
            detail: format!(
                "{} forecasts, {} dates, {} realized rows",
                forecasts.len(),
                dates.len(),
                realized.len()
            ),
        });
    }
    let n_stocks = forecasts[0].tickers.len();
    let mut assets = vec![market_label.to_string()];
    assets.extend(forecasts[0].tickers.iter().cloned());
    for (t, row) in realized.iter().enumerate() {
        if row.len() != n_stocks + 1 {
            return Err(Error::Shape {
                op: "var_forecast_series",
                detail: format!(
                    "realized row {t} holds {} values for {} assets",
                    row.len(),
                    n_stocks + 1
                ),
            });
        }
    }

    let rows: Vec<Vec<f64>> = forecasts
        .par_iter()
        .enumerate()
        .map(|(t, model)| {
            let sim = simulate(model, n, mix_seed(seed, t as u64 + 1), true, A_DEFAULT)?;
            let market = sim.market.as_ref().expect("market column requested");
            let mut row = Vec::with_capacity(n_stocks + 1);
            let losses: Vec<f64> = market.iter().map(|r| -r).collect();
            row.push(empirical_cvar(&losses, q)?.var_threshold);
            for i in 0..n_stocks {
                let losses: Vec<f64> = (0..n).map(|s| -sim.returns[s * n_stocks + i]).collect();
                row.push(empirical_cvar(&losses, q)?.var_threshold);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;

    let violations: Vec<Vec<bool>> = rows
        .iter()
        .zip(realized)
        .map(|(var_row, real_row)| {
            var_row
                .iter()
                .zip(real_row)
                .map(|(v, r)| *r < -*v)
                .collect()
        })
        .collect();

    Ok(VarSeries {
        q,
        n_samples: n,
        assets,
        dates: dates.to_vec(),
        var: rows,
        realized: realized.to_vec(),
        violations,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn write_file(path: &Path, body: String) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// One row per report (strategy x target at one confidence level), with
/// repetition dispersion columns.
pub fn write_metrics_csv(path: &Path, reports: &[BacktestReport], config_hash: &str) -> Result<()> {
    let mut s = format!("# config={config_hash}\n");
    s.push_str(
        "strategy,target,q,n,repetitions,av,sd,ir,es,sk,md,cr,rr,\
         av_disp,sd_disp,ir_disp,es_disp,sk_disp,md_disp,cr_disp,rr_disp,fallbacks\n",
    );
    for r in reports {
        let m = &r.metrics;
        let d = &r.dispersion;
        let target = if r.strategy.sweeps_targets() {
            r.target.label()
        } else {
            String::new()
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.strategy.label(),
            target,
            r.q,
            r.n_scenarios,
            r.repetitions,
            m.av,
            m.sd,
            fmt_opt(m.ir),
            m.es,
            m.sk,
            m.md,
            fmt_opt(m.cr),
            fmt_opt(m.rr),
            d.av,
            d.sd,
            fmt_opt(d.ir),
            d.es,
            d.sk,
            d.md,
            fmt_opt(d.cr),
            fmt_opt(d.rr),
            r.fallback_count,
        );
    }
    write_file(path, s)
}

/// Plot-ready compounded wealth: one date column, one column per report.
/// All reports must share the same rebalance dates.
pub fn write_wealth_csv(path: &Path, reports: &[BacktestReport], config_hash: &str) -> Result<()> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("no reports to write".into()))?;
    for r in reports {
        if r.dates != first.dates {
            return Err(Error::Config(
                "wealth table requires a common rebalance schedule".into(),
            ));
        }
    }
    let mut s = format!("# config={config_hash}\n");
    s.push_str("date");
    for r in reports {
        let _ = write!(s, ",{}", r.label());
    }
    s.push('\n');
    let mut wealth = vec![1.0; reports.len()];
    for (t, date) in first.dates.iter().enumerate() {
        let _ = write!(s, "{date}");
        for (k, r) in reports.iter().enumerate() {
            wealth[k] *= 1.0 + r.returns[t];
            let _ = write!(s, ",{}", wealth[k]);
        }
        s.push('\n');
    }
    write_file(path, s)
}

/// Per-date averaged weights of one report, one column per ticker.
pub fn write_weights_csv(path: &Path, report: &BacktestReport, config_hash: &str) -> Result<()> {
    let mut s = format!("# config={config_hash}\n");
    s.push_str("date");
    for t in &report.tickers {
        let _ = write!(s, ",{t}");
    }
    s.push('\n');
    for (t, date) in report.dates.iter().enumerate() {
        let _ = write!(s, "{date}");
        for w in &report.weights[t] {
            let _ = write!(s, ",{w}");
        }
        s.push('\n');
    }
    write_file(path, s)
}

/// Coverage-test table over a value-at-risk series: one row per asset with
/// violation counts and the three likelihood-ratio p-values at tail
/// probability `1 - q`.
pub fn write_coverage_csv(path: &Path, series: &VarSeries, config_hash: &str) -> Result<()> {
    let p = 1.0 - series.q;
    let mut s = format!("# config={config_hash}\n");
    s.push_str("asset,observations,violations,expected_rate,lr_pof,p_pof,lr_cci,p_cci,lr_cc,p_cc\n");
    for (i, asset) in series.assets.iter().enumerate() {
        let indicators = series.indicator_column(i);
        let c = coverage_tests(&indicators, p)?;
        let _ = writeln!(
            s,
            "{asset},{},{},{},{},{},{},{},{},{}",
            c.observations, c.violations, p, c.lr_pof, c.p_pof, c.lr_cci, c.p_cci, c.lr_cc, c.p_cc,
        );
    }
    write_file(path, s)
}
