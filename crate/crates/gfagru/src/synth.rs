//! Synthetic price-table generator driven by a known generative factor
//! model, for desk-scale testing with a recoverable ground truth.
//!
//! Daily returns are drawn from the factor model (optionally switching
//! parameters across segments to mimic regime changes) and compounded into
//! prices on a weekday calendar. The `SynthSpec` value itself is the
//! ground-truth manifest: it serialises to JSON and is written next to
//! generated CSVs.

use crate::data::PriceTable;
use crate::error::{Error, Result};
use crate::genfactor::{self, MarketModel, StockModel, A_DEFAULT};
use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Generator-side parameter caps. Daily-scale loadings and moderate tails
/// keep compounded gross returns positive except at astronomically rare
/// draws (a breach raises an error rather than clamping silently).
pub const MAX_LOADING: f64 = 0.015;
pub const MAX_DRIFT: f64 = 0.01;
pub const MAX_SYNTH_TAIL: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSegment {
    pub n_days: usize,
    pub market: MarketModel,
    /// One entry per stock ticker, in table order.
    pub stocks: Vec<StockModel>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub start_date: NaiveDate,
    pub initial_price: f64,
    pub market_ticker: String,
    pub stock_tickers: Vec<String>,
    pub segments: Vec<SynthSegment>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("synthetic spec has no segments".into()));
        }
        if !(self.initial_price > 0.0) {
            return Err(Error::Config("initial price must be positive".into()));
        }
        if self.stock_tickers.contains(&self.market_ticker) {
            return Err(Error::Config("market ticker duplicated among stocks".into()));
        }
        let check_tail = |t: &crate::genfactor::TailParams, what: &str| -> Result<()> {
            if t.u < 1.0 || t.u > MAX_SYNTH_TAIL || t.v < 1.0 || t.v > MAX_SYNTH_TAIL {
                return Err(Error::Config(format!(
                    "{what} tails ({}, {}) outside generator range [1, {MAX_SYNTH_TAIL}]",
                    t.u, t.v
                )));
            }
            Ok(())
        };
        for (s_idx, seg) in self.segments.iter().enumerate() {
            if seg.n_days == 0 {
                return Err(Error::Config(format!("segment {s_idx} has zero days")));
            }
            if seg.stocks.len() != self.stock_tickers.len() {
                return Err(Error::Shape {
                    op: "synth_spec",
                    detail: format!(
                        "segment {s_idx}: {} stock models for {} tickers",
                        seg.stocks.len(),
                        self.stock_tickers.len()
                    ),
                });
            }
            let m = &seg.market.theta;
            if !(m.beta > 0.0) || m.beta > MAX_LOADING || m.alpha.abs() > MAX_DRIFT {
                return Err(Error::Config(format!(
                    "segment {s_idx}: market drift/volatility ({}, {}) outside generator range",
                    m.alpha, m.beta
                )));
            }
            check_tail(&seg.market.tail, "market")?;
            for (i, st) in seg.stocks.iter().enumerate() {
                let t = &st.theta;
                if !(t.gamma > 0.0)
                    || t.gamma > MAX_LOADING
                    || t.beta < 0.0
                    || t.beta > MAX_LOADING
                    || t.alpha.abs() > MAX_DRIFT
                {
                    return Err(Error::Config(format!(
                        "segment {s_idx} stock {i}: parameters ({}, {}, {}) outside generator range",
                        t.alpha, t.beta, t.gamma
                    )));
                }
                check_tail(&st.tail_market, "stock-market")?;
                check_tail(&st.tail_own, "stock-own")?;
            }
        }
        Ok(())
    }

    pub fn total_days(&self) -> usize {
        self.segments.iter().map(|s| s.n_days).sum()
    }
}

fn next_weekday(mut d: NaiveDate) -> NaiveDate {
    loop {
        d = d.checked_add_days(Days::new(1)).expect("date overflow");
        match d.weekday() {
            Weekday::Sat | Weekday::Sun => continue,
            _ => return d,
        }
    }
}

/// Draws the daily return panel and compounds it into prices. The market
/// column comes first in the output table.
pub fn synth_generate(spec: &SynthSpec) -> Result<PriceTable> {
    spec.validate()?;
    let n_stocks = spec.stock_tickers.len();
    let n_returns = spec.total_days();
    let n_cols = n_stocks + 1;

    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut gross = Vec::with_capacity(n_returns * n_cols);
    for seg in &spec.segments {
        for _ in 0..seg.n_days {
            let z_m: f64 = StandardNormal.sample(&mut rng);
            let m = &seg.market;
            let y_m = m.theta.alpha
                + m.theta.beta * genfactor::g(z_m, m.tail, A_DEFAULT);
            push_gross(&mut gross, y_m)?;
            for st in &seg.stocks {
                let z_i: f64 = StandardNormal.sample(&mut rng);
                let y_i = st.theta.alpha
                    + st.theta.beta * genfactor::g(z_m, st.tail_market, A_DEFAULT)
                    + st.theta.gamma * genfactor::g(z_i, st.tail_own, A_DEFAULT);
                push_gross(&mut gross, y_i)?;
            }
        }
    }

    let mut dates = Vec::with_capacity(n_returns + 1);
    let mut d = match spec.start_date.weekday() {
        Weekday::Sat | Weekday::Sun => next_weekday(spec.start_date),
        _ => spec.start_date,
    };
    for _ in 0..=n_returns {
        dates.push(d);
        d = next_weekday(d);
    }

    let mut prices = vec![0.0; (n_returns + 1) * n_cols];
    for c in 0..n_cols {
        prices[c] = spec.initial_price;
    }
    for t in 0..n_returns {
        for c in 0..n_cols {
            prices[(t + 1) * n_cols + c] = prices[t * n_cols + c] * gross[t * n_cols + c];
        }
    }

    let mut tickers = Vec::with_capacity(n_cols);
    tickers.push(spec.market_ticker.clone());
    tickers.extend(spec.stock_tickers.iter().cloned());
    PriceTable::new(dates, tickers, prices)
}

fn push_gross(out: &mut Vec<f64>, y: f64) -> Result<()> {
    let g = 1.0 + y;
    if !(g > 0.01) || !g.is_finite() {
        return Err(Error::Numerical {
            context: "synth_generate",
            detail: format!("drawn return {y:.4} would destroy price positivity"),
        });
    }
    out.push(g);
    Ok(())
}
