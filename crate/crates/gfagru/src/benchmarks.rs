//! Benchmark allocation strategies: equal weight, expanding-window
//! historical scenarios, and a market-factor volatility/correlation model
//! fitted once on monthly returns and rolled forward month by month.

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PriceTable;
use crate::dcc::{fit_dcc, DccForecast, PairState};
use crate::error::{Error, Result};
use crate::garch::{fit_garch, forecast_variance, GarchParams};
use crate::genfactor::ScenarioMatrix;

/// The time-invariant `1/N` portfolio.
pub fn equal_weight(n: usize) -> Vec<f64> {
    assert!(n >= 1, "equal_weight needs at least one asset");
    vec![1.0 / n as f64; n]
}

/// Non-overlapping monthly (21-trading-day) compounded returns for the
/// market and every stock, aligned with the rebalance schedule.
///
/// Training months are anchored *backward* from the split boundary so that
/// the most recent month ends exactly where the test segment begins; a few
/// leading return rows may go unused. Test months run forward from the
/// boundary, one per rebalance, so row `n_train_months + j` holds exactly
/// the returns realized by the portfolio chosen at rebalance `j`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonthlyPanel {
    /// Date of the last return row inside each month.
    pub dates: Vec<NaiveDate>,
    /// Stock tickers; the market series is kept separately.
    pub tickers: Vec<String>,
    /// Monthly market returns, one per month.
    pub market: Vec<f64>,
    /// Row-major `n_months x tickers.len()` monthly stock returns.
    pub stocks: Vec<f64>,
    /// Months that end at or before the split boundary.
    pub n_train_months: usize,
}

impl MonthlyPanel {
    pub fn n_months(&self) -> usize {
        self.market.len()
    }

    pub fn stock_row(&self, month: usize) -> &[f64] {
        let n = self.tickers.len();
        &self.stocks[month * n..(month + 1) * n]
    }

    /// Compounds non-overlapping monthly returns from daily prices.
    /// `train_rows` counts training *return* rows, as produced by the
    /// splitter; `horizon` is the month length in trading days.
    pub fn build(
        prices: &PriceTable,
        market_ticker: &str,
        train_rows: usize,
        horizon: usize,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("month length must be positive".into()));
        }
        let total_rows = prices.n_days().saturating_sub(1);
        if train_rows == 0 || train_rows > total_rows {
            return Err(Error::Data(format!(
                "training boundary {train_rows} outside the {total_rows} available return rows"
            )));
        }
        let market_idx = prices.ticker_index(market_ticker)?;
        let n_train_months = train_rows / horizon;
        if n_train_months == 0 {
            return Err(Error::Data(format!(
                "training segment of {train_rows} rows is shorter than one {horizon}-day month"
            )));
        }
        let n_test_months = (total_rows - train_rows) / horizon;
        let tickers: Vec<String> = prices
            .tickers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != market_idx)
            .map(|(_, t)| t.clone())
            .collect();
        let stock_idx: Vec<usize> = (0..prices.n_tickers())
            .filter(|i| *i != market_idx)
            .collect();

        let mut dates = Vec::with_capacity(n_train_months + n_test_months);
        let mut market = Vec::with_capacity(n_train_months + n_test_months);
        let mut stocks = Vec::with_capacity((n_train_months + n_test_months) * tickers.len());
        // Month `m` covers return rows [start, start + horizon), which maps
        // to the price-day pair (start, start + horizon).
        let monthly = |start: usize, ticker: usize| {
            prices.price(start + horizon, ticker) / prices.price(start, ticker) - 1.0
        };
        for m in 0..n_train_months + n_test_months {
            let start = if m < n_train_months {
                train_rows - horizon * (n_train_months - m)
            } else {
                train_rows + horizon * (m - n_train_months)
            };
            dates.push(prices.dates[start + horizon]);
            market.push(monthly(start, market_idx));
            for &t in &stock_idx {
                stocks.push(monthly(start, t));
            }
        }
        Ok(MonthlyPanel {
            dates,
            tickers,
            market,
            stocks,
            n_train_months,
        })
    }
}

/// Treats the first `n_months` monthly stock rows as equally likely joint
/// scenarios (the expanding-window i.i.d. view of history).
pub fn static_saa_scenarios(panel: &MonthlyPanel, n_months: usize) -> Result<ScenarioMatrix> {
    if n_months == 0 {
        return Err(Error::Data("no monthly history to build scenarios from".into()));
    }
    if n_months > panel.n_months() {
        return Err(Error::Data(format!(
            "requested {n_months} months of history, panel holds {}",
            panel.n_months()
        )));
    }
    Ok(ScenarioMatrix {
        tickers: panel.tickers.clone(),
        returns: panel.stocks[..n_months * panel.tickers.len()].to_vec(),
        n_scenarios: n_months,
        market: Some(panel.market[..n_months].to_vec()),
    })
}

/// Rolling filter state for one return series: the latest de-meaned return
/// and its conditional variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeriesState {
    last_return: f64,
    sigma2: f64,
}

/// Market-factor benchmark: per-series GARCH(1,1) volatilities plus a
/// mean-reverting pairwise correlation recursion toward per-stock constant
/// matrices, fitted once on training monthly returns and rolled forward.
///
/// Filters stay anchored to the training means (the recursions were fitted
/// against those residuals); only the scenario mean vector, supplied at
/// forecast time, expands with realized history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DccMmModel {
    pub tickers: Vec<String>,
    pub market_garch: GarchParams,
    pub stock_garch: Vec<GarchParams>,
    pub dcc_a: f64,
    pub dcc_b: f64,
    pub gammas: Vec<f64>,
    pub market_mean: f64,
    pub stock_means: Vec<f64>,
    market_state: SeriesState,
    stock_states: Vec<SeriesState>,
    pairs: Vec<PairState>,
    last_e_market: f64,
    last_e_stocks: Vec<f64>,
}

impl DccMmModel {
    /// Two-stage fit on the training months of the panel: de-mean, fit one
    /// variance recursion per series (in parallel), standardize, then fit
    /// the pooled correlation dynamics. The rolling state is left at the
    /// last training month, ready to forecast the first test month.
    pub fn fit(panel: &MonthlyPanel) -> Result<Self> {
        let m = panel.n_train_months;
        let n = panel.tickers.len();
        if n == 0 {
            return Err(Error::Data("panel holds no stocks".into()));
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let market_mean = mean(&panel.market[..m]);
        let market_dm: Vec<f64> = panel.market[..m].iter().map(|r| r - market_mean).collect();

        let stock_cols: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..m).map(|t| panel.stock_row(t)[i]).collect())
            .collect();
        let stock_means: Vec<f64> = stock_cols.iter().map(|c| mean(c)).collect();
        let stock_dm: Vec<Vec<f64>> = stock_cols
            .iter()
            .zip(&stock_means)
            .map(|(c, mu)| c.iter().map(|r| r - mu).collect())
            .collect();

        let market_fit = fit_garch(&market_dm)?;
        let stock_fits = stock_dm
            .par_iter()
            .map(|c| fit_garch(c))
            .collect::<Result<Vec<_>>>()?;

        let residuals = |series: &[f64], sigma2: &[f64]| -> Vec<f64> {
            series
                .iter()
                .zip(sigma2)
                .map(|(r, s2)| r / s2.sqrt())
                .collect()
        };
        let e_market = residuals(&market_dm, &market_fit.conditional_variance);
        let e_stocks: Vec<Vec<f64>> = stock_dm
            .iter()
            .zip(&stock_fits)
            .map(|(c, f)| residuals(c, &f.conditional_variance))
            .collect();
        let e_refs: Vec<&[f64]> = e_stocks.iter().map(|e| e.as_slice()).collect();
        let dcc = fit_dcc(&e_market, &e_refs)?;
        let (a, b) = (dcc.params.a, dcc.params.b);

        // Replay the recursion so each pair holds the state that consumed
        // residuals 0..m-2; the final residual waits in `last_e_*` for the
        // next advance (mirroring the in-sample correlation path).
        let pairs: Vec<PairState> = dcc
            .params
            .gammas
            .iter()
            .zip(&e_stocks)
            .map(|(&g, e_i)| {
                let mut st = PairState::from_gamma(g);
                for t in 1..m {
                    st.advance(a, b, g, e_market[t - 1], e_i[t - 1]);
                }
                st
            })
            .collect();

        Ok(DccMmModel {
            tickers: panel.tickers.clone(),
            market_garch: market_fit.params,
            stock_garch: stock_fits.iter().map(|f| f.params).collect(),
            dcc_a: a,
            dcc_b: b,
            gammas: dcc.params.gammas.clone(),
            market_mean,
            stock_means,
            market_state: SeriesState {
                last_return: market_dm[m - 1],
                sigma2: *market_fit.conditional_variance.last().unwrap(),
            },
            stock_states: stock_dm
                .iter()
                .zip(&stock_fits)
                .map(|(c, f)| SeriesState {
                    last_return: c[m - 1],
                    sigma2: *f.conditional_variance.last().unwrap(),
                })
                .collect(),
            pairs,
            last_e_market: e_market[m - 1],
            last_e_stocks: e_stocks.iter().map(|e| e[m - 1]).collect(),
        })
    }

    /// Folds one realized month into the rolling state.
    pub fn advance(&mut self, market_return: f64, stock_returns: &[f64]) -> Result<()> {
        if stock_returns.len() != self.tickers.len() {
            return Err(Error::Shape {
                op: "dcc_mm_advance",
                detail: format!(
                    "{} stock returns for {} tickers",
                    stock_returns.len(),
                    self.tickers.len()
                ),
            });
        }
        if !market_return.is_finite() || stock_returns.iter().any(|r| !r.is_finite()) {
            return Err(Error::Data("non-finite realized monthly return".into()));
        }
        let step = |state: &mut SeriesState, params: &GarchParams, raw: f64, mean: f64| {
            let s2 = forecast_variance(params, state.last_return, state.sigma2);
            *state = SeriesState {
                last_return: raw - mean,
                sigma2: s2,
            };
            (raw - mean) / s2.sqrt()
        };
        let prev_e_market = self.last_e_market;
        self.last_e_market = step(
            &mut self.market_state,
            &self.market_garch,
            market_return,
            self.market_mean,
        );
        for i in 0..self.tickers.len() {
            let prev_e_stock = self.last_e_stocks[i];
            self.pairs[i].advance(
                self.dcc_a,
                self.dcc_b,
                self.gammas[i],
                prev_e_market,
                prev_e_stock,
            );
            self.last_e_stocks[i] = step(
                &mut self.stock_states[i],
                &self.stock_garch[i],
                stock_returns[i],
                self.stock_means[i],
            );
        }
        Ok(())
    }

    /// One-step-ahead volatilities and correlations, with the caller's mean
    /// vector (expanding sample means in the backtest).
    pub fn forecast(&self, means: Vec<f64>) -> DccForecast {
        let sigma = |state: &SeriesState, params: &GarchParams| {
            forecast_variance(params, state.last_return, state.sigma2).sqrt()
        };
        let rhos: Vec<f64> = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut next = *p;
                next.advance(
                    self.dcc_a,
                    self.dcc_b,
                    self.gammas[i],
                    self.last_e_market,
                    self.last_e_stocks[i],
                );
                next.rho()
            })
            .collect();
        DccForecast {
            tickers: self.tickers.clone(),
            sigma_market: sigma(&self.market_state, &self.market_garch),
            sigmas: self
                .stock_states
                .iter()
                .zip(&self.stock_garch)
                .map(|(s, p)| sigma(s, p))
                .collect(),
            rhos,
            means,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{monthly_label, DAYS_PER_MONTH};
    use crate::dcc::correlation_path;
    use crate::garch::garch_filter;
    use chrono::Days;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn equal_weight_reference_vectors() {
        assert_eq!(equal_weight(4), vec![0.25; 4]);
        assert_eq!(equal_weight(1), vec![1.0]);
    }

    fn price_table(n_days: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> PriceTable {
        let start = NaiveDate::from_ymd_opt(2005, 1, 3).unwrap();
        let dates: Vec<NaiveDate> = (0..n_days)
            .map(|i| start.checked_add_days(Days::new(i as u64)).unwrap())
            .collect();
        let tickers: Vec<String> = (0..cols)
            .map(|c| if c == 0 { "MKT".into() } else { format!("S{c}") })
            .collect();
        let mut prices = Vec::with_capacity(n_days * cols);
        for d in 0..n_days {
            for c in 0..cols {
                prices.push(f(d, c));
            }
        }
        PriceTable::new(dates, tickers, prices).unwrap()
    }

    #[test]
    fn panel_dimensions_and_backward_anchoring() {
        // 194 return rows, boundary at 130: 6 training months with 4 unused
        // leading rows, 3 test months with 1 unused trailing row.
        let h = DAYS_PER_MONTH;
        let prices = price_table(195, 3, |d, c| 100.0 * (1.0 + 0.0001 * (d * (c + 1)) as f64));
        let panel = MonthlyPanel::build(&prices, "MKT", 130, h).unwrap();
        assert_eq!(panel.n_train_months, 6);
        assert_eq!(panel.n_months(), 9);
        assert_eq!(panel.tickers, vec!["S1".to_string(), "S2".to_string()]);
        // First training month covers return rows [4, 25) -> price days 4, 25.
        let expect = prices.price(4 + h, 0) / prices.price(4, 0) - 1.0;
        assert_eq!(panel.market[0], expect);
        // Last training month ends exactly at the boundary: price days 109, 130.
        let expect = prices.price(130, 1) / prices.price(130 - h, 1) - 1.0;
        assert_eq!(panel.stock_row(5)[0], expect);
        // Date is the last return row of the month, i.e. price day start+h.
        assert_eq!(panel.dates[5], prices.dates[130]);
    }

    #[test]
    fn test_months_equal_the_realized_rebalance_labels() {
        let h = DAYS_PER_MONTH;
        let prices = price_table(400, 4, |d, c| {
            80.0 * (1.0 + 0.0003 * d as f64 + 0.01 * (c as f64) * ((d as f64) * 0.7).sin().abs())
        });
        let train_rows = 230;
        let panel = MonthlyPanel::build(&prices, "MKT", train_rows, h).unwrap();
        let n_test = panel.n_months() - panel.n_train_months;
        assert_eq!(n_test, (399 - train_rows) / h);
        for j in 0..n_test {
            // Rebalance j anchors at return row train_rows + j*h - 1; the
            // position is taken at the close of the next price day.
            let price_day = train_rows + j * h;
            let row = panel.stock_row(panel.n_train_months + j);
            for (i, ticker) in panel.tickers.iter().enumerate() {
                let t = prices.ticker_index(ticker).unwrap();
                let label = monthly_label(&prices, t, price_day, h).unwrap();
                assert!(
                    (row[i] - label).abs() < 1e-15,
                    "month {j} stock {i}: {} vs {label}",
                    row[i]
                );
            }
        }
    }

    #[test]
    fn expanding_scenarios_grow_one_row_per_month() {
        let prices = price_table(300, 3, |d, c| 50.0 + (d * (c + 2)) as f64 * 0.1);
        let panel = MonthlyPanel::build(&prices, "MKT", 210, DAYS_PER_MONTH).unwrap();
        let m = panel.n_train_months;
        let s0 = static_saa_scenarios(&panel, m).unwrap();
        let s1 = static_saa_scenarios(&panel, m + 1).unwrap();
        assert_eq!(s0.n_scenarios, m);
        assert_eq!(s1.n_scenarios, m + 1);
        assert_eq!(s1.returns[..s0.returns.len()], s0.returns[..]);
        assert_eq!(s1.row(m), panel.stock_row(m));
        assert_eq!(s0.market.as_deref().unwrap(), &panel.market[..m]);
        assert!(static_saa_scenarios(&panel, 0).is_err());
        assert!(static_saa_scenarios(&panel, panel.n_months() + 1).is_err());
    }

    /// Monthly factor data with constant vols and correlation 0.6.
    fn factor_panel(n_months: usize, train_months: usize, seed: u64) -> MonthlyPanel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let rho: f64 = 0.6;
        let (n, sm, ss) = (3usize, 0.04, 0.06);
        let mut market = Vec::new();
        let mut stocks = Vec::new();
        for _ in 0..n_months {
            let zm = gauss();
            market.push(sm * zm);
            for _ in 0..n {
                let zi = gauss();
                stocks.push(ss * (rho * zm + (1.0 - rho * rho).sqrt() * zi));
            }
        }
        let start = NaiveDate::from_ymd_opt(1990, 1, 1).unwrap();
        MonthlyPanel {
            dates: (0..n_months)
                .map(|i| start.checked_add_days(Days::new(30 * i as u64)).unwrap())
                .collect(),
            tickers: (0..n).map(|i| format!("S{i}")).collect(),
            market,
            stocks,
            n_train_months: train_months,
        }
    }

    #[test]
    fn factor_model_fit_recovers_the_constant_correlation() {
        let panel = factor_panel(600, 600, 7);
        let model = DccMmModel::fit(&panel).unwrap();
        for &g in &model.gammas {
            assert!((g - 0.6).abs() < 0.08, "gamma {g}");
        }
        let fc = model.forecast(vec![0.0; 3]);
        assert!((fc.sigma_market - 0.04).abs() < 0.01, "{}", fc.sigma_market);
        for &s in &fc.sigmas {
            assert!((s - 0.06).abs() < 0.015, "sigma {s}");
        }
        for &r in &fc.rhos {
            assert!(r.abs() <= 1.0 && r.is_finite());
        }
    }

    #[test]
    fn rolled_state_matches_the_full_sample_filters() {
        // Fit on the training months, advance through the test months, and
        // check the internal state against filters run over the whole
        // series with the same (training) parameters and same init.
        let panel = factor_panel(260, 200, 11);
        let mut model = DccMmModel::fit(&panel).unwrap();
        let m = panel.n_train_months;
        for t in m..panel.n_months() {
            model
                .advance(panel.market[t], panel.stock_row(t))
                .unwrap();
        }

        let full_dm: Vec<f64> = panel.market.iter().map(|r| r - model.market_mean).collect();
        let train_dm = &full_dm[..m];
        let n = train_dm.len() as f64;
        let tm = train_dm.iter().sum::<f64>() / n;
        let init = train_dm.iter().map(|r| (r - tm) * (r - tm)).sum::<f64>() / (n - 1.0);
        let full_s2 = garch_filter(&full_dm, &model.market_garch, init);
        assert!(
            (model.market_state.sigma2 - full_s2.last().unwrap()).abs() < 1e-12,
            "{} vs {}",
            model.market_state.sigma2,
            full_s2.last().unwrap()
        );

        // Correlation state: replaying the recursion over the full residual
        // series must land on the same value the rolled state forecasts.
        let e_market: Vec<f64> = full_dm
            .iter()
            .zip(&full_s2)
            .map(|(r, s2)| r / s2.sqrt())
            .collect();
        for i in 0..panel.tickers.len() {
            let col_dm: Vec<f64> = (0..panel.n_months())
                .map(|t| panel.stock_row(t)[i] - model.stock_means[i])
                .collect();
            let tdm = &col_dm[..m];
            let tmean = tdm.iter().sum::<f64>() / n;
            let init_i = tdm.iter().map(|r| (r - tmean) * (r - tmean)).sum::<f64>() / (n - 1.0);
            let s2_i = garch_filter(&col_dm, &model.stock_garch[i], init_i);
            let e_i: Vec<f64> = col_dm
                .iter()
                .zip(&s2_i)
                .map(|(r, s2)| r / s2.sqrt())
                .collect();
            // The path value at a hypothetical next step consumes the last
            // residual pair, exactly what forecast() reports.
            let mut ext_m = e_market.clone();
            let mut ext_i = e_i.clone();
            ext_m.push(0.0);
            ext_i.push(0.0);
            let path = correlation_path(model.dcc_a, model.dcc_b, model.gammas[i], &ext_m, &ext_i);
            let fc = model.forecast(vec![0.0; panel.tickers.len()]);
            assert!(
                (fc.rhos[i] - path.last().unwrap()).abs() < 1e-12,
                "stock {i}: {} vs {}",
                fc.rhos[i],
                path.last().unwrap()
            );
        }
    }

    #[test]
    fn fit_is_deterministic_and_advance_validates() {
        let panel = factor_panel(240, 240, 3);
        let a = DccMmModel::fit(&panel).unwrap();
        let b = DccMmModel::fit(&panel).unwrap();
        assert_eq!(a.dcc_a.to_bits(), b.dcc_a.to_bits());
        assert_eq!(a.dcc_b.to_bits(), b.dcc_b.to_bits());
        for (x, y) in a.gammas.iter().zip(&b.gammas) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let mut m = a;
        assert!(m.advance(0.01, &[0.01, 0.02]).is_err());
        assert!(m.advance(f64::NAN, &[0.0, 0.0, 0.0]).is_err());
        assert!(m.advance(0.01, &[0.0, 0.01, -0.02]).is_ok());
    }

    #[test]
    fn forecast_feeds_the_scenario_simulator() {
        let panel = factor_panel(300, 280, 19);
        let mut model = DccMmModel::fit(&panel).unwrap();
        let m = panel.n_train_months;
        for t in m..panel.n_months() {
            model.advance(panel.market[t], panel.stock_row(t)).unwrap();
        }
        let means = vec![0.004, 0.002, 0.003];
        let fc = model.forecast(means.clone());
        let sc = crate::dcc::dcc_simulate(&fc, &means, 4000, 99).unwrap();
        assert_eq!(sc.n_scenarios, 4000);
        let mu = sc.empirical_mean();
        for (got, want) in mu.iter().zip(&means) {
            assert!((got - want).abs() < 0.01, "{got} vs {want}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn equal_weights_always_sum_to_one(n in 1usize..200) {
            let w = equal_weight(n);
            prop_assert_eq!(w.len(), n);
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
