//! Price ingestion, return computation, feature-window and monthly-label
//! construction, and chronological train/validation/test splitting.
//!
//! Index conventions used throughout the crate: with price days `0..D`,
//! return row `i` is `p[i+1]/p[i] - 1` (so there are `D-1` return rows). A
//! sample anchored at return row `i` uses the feature window of rows
//! `[i-T+1, i]`, corresponds to a decision taken at the close of price day
//! `i+1`, and is labelled by the one-month return `p[i+22]/p[i+1] - 1`
//! (21 trading days per month).

use crate::error::{Error, Result};
use chrono::NaiveDate;
use std::io::Write as _;
use std::path::Path;

pub const DAYS_PER_MONTH: usize = 21;

/// Aligned panel of adjusted close prices.
#[derive(Debug, Clone)]
pub struct PriceTable {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// Row-major `dates x tickers`.
    prices: Vec<f64>,
}

impl PriceTable {
    pub fn new(dates: Vec<NaiveDate>, tickers: Vec<String>, prices: Vec<f64>) -> Result<Self> {
        if prices.len() != dates.len() * tickers.len() {
            return Err(Error::Shape {
                op: "price_table",
                detail: format!(
                    "{} prices for {} dates x {} tickers",
                    prices.len(),
                    dates.len(),
                    tickers.len()
                ),
            });
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("dates must be strictly increasing".into()));
        }
        if let Some(p) = prices.iter().find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::Data(format!("non-positive or non-finite price {p}")));
        }
        Ok(PriceTable {
            dates,
            tickers,
            prices,
        })
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn n_tickers(&self) -> usize {
        self.tickers.len()
    }

    pub fn price(&self, day: usize, ticker: usize) -> f64 {
        self.prices[day * self.tickers.len() + ticker]
    }

    pub fn ticker_index(&self, name: &str) -> Result<usize> {
        self.tickers
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Config(format!("ticker {name} not present in table")))
    }

    pub fn column(&self, ticker: usize) -> Vec<f64> {
        (0..self.n_days()).map(|d| self.price(d, ticker)).collect()
    }

    /// Reads the `date,TICKER,...` CSV schema. Lines starting with `#` are
    /// metadata comments. Tickers with any missing (empty or unparsable)
    /// cell are dropped so the surviving panel is fully aligned; the dropped
    /// names are returned for logging.
    pub fn read_csv(path: &Path) -> Result<(Self, Vec<String>)> {
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let header = reader
            .headers()
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
            .clone();
        if header.len() < 2 {
            return Err(Error::Data("CSV needs a date column and at least one ticker".into()));
        }
        let all_tickers: Vec<String> = header.iter().skip(1).map(|s| s.to_string()).collect();
        let mut dates = Vec::new();
        // Column-major staging: cells[t][day], None when missing.
        let mut cells: Vec<Vec<Option<f64>>> = vec![Vec::new(); all_tickers.len()];
        for record in reader.records() {
            let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if record.len() != header.len() {
                return Err(Error::Data(format!(
                    "row with {} fields, expected {}",
                    record.len(),
                    header.len()
                )));
            }
            let date = NaiveDate::parse_from_str(&record[0], "%Y-%m-%d")
                .map_err(|e| Error::Data(format!("bad date {:?}: {e}", &record[0])))?;
            dates.push(date);
            for (t, field) in record.iter().skip(1).enumerate() {
                cells[t].push(if field.is_empty() {
                    None
                } else {
                    field.parse::<f64>().ok()
                });
            }
        }
        if dates.len() < 2 {
            return Err(Error::Data("need at least two price rows".into()));
        }
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        let mut kept_cols: Vec<Vec<f64>> = Vec::new();
        for (t, name) in all_tickers.into_iter().enumerate() {
            if cells[t].iter().all(|c| c.is_some()) {
                kept_cols.push(cells[t].iter().map(|c| c.unwrap()).collect());
                kept.push(name);
            } else {
                dropped.push(name);
            }
        }
        if kept.is_empty() {
            return Err(Error::Data("no ticker has a complete history".into()));
        }
        let mut prices = vec![0.0; dates.len() * kept.len()];
        for (t, col) in kept_cols.iter().enumerate() {
            for (d, v) in col.iter().enumerate() {
                prices[d * kept.len() + t] = *v;
            }
        }
        Ok((PriceTable::new(dates, kept, prices)?, dropped))
    }

    /// Writes the same schema `read_csv` accepts; `comments` become leading
    /// `#` lines (used for config-hash metadata).
    pub fn write_csv(&self, path: &Path, comments: &[String]) -> Result<()> {
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for c in comments {
            writeln!(file, "# {c}").map_err(|e| Error::io(path, e))?;
        }
        let mut line = String::from("date");
        for t in &self.tickers {
            line.push(',');
            line.push_str(t);
        }
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        for (d, date) in self.dates.iter().enumerate() {
            let mut line = date.format("%Y-%m-%d").to_string();
            for t in 0..self.n_tickers() {
                line.push_str(&format!(",{:.10}", self.price(d, t)));
            }
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn to_returns(&self) -> Result<ReturnTable> {
        if self.n_days() < 2 {
            return Err(Error::Data("need at least two price rows".into()));
        }
        let n_t = self.n_tickers();
        let n_r = self.n_days() - 1;
        let mut returns = vec![0.0; n_r * n_t];
        for i in 0..n_r {
            for t in 0..n_t {
                returns[i * n_t + t] = self.price(i + 1, t) / self.price(i, t) - 1.0;
            }
        }
        Ok(ReturnTable {
            dates: self.dates[1..].to_vec(),
            tickers: self.tickers.clone(),
            returns,
        })
    }
}

/// Daily percentage returns; row `i` is dated by the later of the two price
/// days it spans.
#[derive(Debug, Clone)]
pub struct ReturnTable {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// Row-major `returns x tickers`.
    pub returns: Vec<f64>,
}

impl ReturnTable {
    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn at(&self, row: usize, ticker: usize) -> f64 {
        self.returns[row * self.tickers.len() + ticker]
    }

    pub fn column(&self, ticker: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|r| self.at(r, ticker)).collect()
    }

    pub fn ticker_index(&self, name: &str) -> Result<usize> {
        self.tickers
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Config(format!("ticker {name} not present in table")))
    }
}

/// One-month forward return from price day `anchor`:
/// `p[anchor+horizon]/p[anchor] - 1`.
pub fn monthly_label(
    prices: &PriceTable,
    ticker: usize,
    anchor: usize,
    horizon: usize,
) -> Result<f64> {
    if anchor + horizon > prices.n_days() - 1 {
        return Err(Error::Data(format!(
            "label window [{anchor}, {}] exceeds {} price days",
            anchor + horizon,
            prices.n_days()
        )));
    }
    Ok(prices.price(anchor + horizon, ticker) / prices.price(anchor, ticker) - 1.0)
}

/// Stacks the two feature rows of one series: the raw window and the squared
/// deviations from the window mean.
fn push_series_rows(window: &[f64], out: &mut Vec<f64>) {
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    out.extend_from_slice(window);
    out.extend(window.iter().map(|r| (r - mean) * (r - mean)));
}

/// Feature matrix for the window of `t_window` return rows ending at row
/// `anchor` (inclusive). Market-only input yields a `2 x T` matrix (returns;
/// squared deviations from the window mean); with a stock series the result
/// is `4 x T` with the market rows first. Returned row-major.
pub fn build_features(
    market: &[f64],
    stock: Option<&[f64]>,
    anchor: usize,
    t_window: usize,
) -> Result<Vec<f64>> {
    if t_window == 0 {
        return Err(Error::Config("feature window must be positive".into()));
    }
    if anchor + 1 < t_window || anchor >= market.len() {
        return Err(Error::Data(format!(
            "feature window of {t_window} rows ending at {anchor} outside history of {}",
            market.len()
        )));
    }
    if let Some(s) = stock {
        if s.len() != market.len() {
            return Err(Error::Shape {
                op: "build_features",
                detail: "stock and market series lengths differ".into(),
            });
        }
    }
    let lo = anchor + 1 - t_window;
    let mut out = Vec::with_capacity(if stock.is_some() { 4 } else { 2 } * t_window);
    push_series_rows(&market[lo..=anchor], &mut out);
    if let Some(s) = stock {
        push_series_rows(&s[lo..=anchor], &mut out);
    }
    Ok(out)
}

/// How to place the train/test boundary on return rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSpec {
    /// First `floor(fraction * rows)` return rows are training.
    Fraction(f64),
    /// First `index` return rows are training.
    Index(usize),
    /// Return rows dated strictly before the date are training.
    Date(NaiveDate),
}

/// Anchor sets produced by a split. All indices refer to return rows.
#[derive(Debug, Clone)]
pub struct SplitAnchors {
    /// Number of training return rows (the boundary).
    pub train_rows: usize,
    /// Sample anchors available for gradient updates.
    pub train: Vec<usize>,
    /// Sample anchors held out for early stopping (the last fifth of the
    /// training rows).
    pub validation: Vec<usize>,
    /// Rebalance anchors in the test segment, one per 21 return rows.
    pub test_rebalance: Vec<usize>,
}

/// Splits chronologically and enumerates anchors.
///
/// Train/validation samples keep both their feature window and their label
/// window inside the training rows; the validation set owns anchors in the
/// final `floor(0.2 * train_rows)` rows. Test rebalances start at the
/// boundary and stride 21 rows; each consumes a full month, so a trailing
/// partial month is dropped.
pub fn split(
    dates: &[NaiveDate],
    spec: SplitSpec,
    t_window: usize,
    horizon: usize,
) -> Result<SplitAnchors> {
    let rows = dates.len();
    let train_rows = match spec {
        SplitSpec::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("train fraction {f} outside (0, 1)")));
            }
            (f * rows as f64).floor() as usize
        }
        SplitSpec::Index(i) => i,
        SplitSpec::Date(d) => dates.partition_point(|x| *x < d),
    };
    if train_rows < t_window + horizon + 5 {
        return Err(Error::Data(format!(
            "training segment of {train_rows} rows cannot hold a {t_window}-day window plus a {horizon}-day label"
        )));
    }
    if train_rows >= rows {
        return Err(Error::Data(format!(
            "split leaves no test rows ({train_rows} of {rows})"
        )));
    }

    // Anchor i needs rows [i-T+1, i] for features and [i+1, i+horizon] for
    // the label, all inside the training segment.
    let first = t_window - 1;
    let last = train_rows - 1 - horizon;
    if last < first {
        return Err(Error::Data("no training samples fit the window".into()));
    }
    let val_rows = train_rows / 5;
    let val_start = train_rows - val_rows;
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for i in first..=last {
        if i >= val_start {
            validation.push(i);
        } else {
            train.push(i);
        }
    }
    if validation.is_empty() {
        return Err(Error::Data(
            "validation segment holds no complete sample".into(),
        ));
    }

    let test_rows = rows - train_rows;
    let n_rebalances = test_rows / horizon;
    if n_rebalances == 0 {
        return Err(Error::Data(format!(
            "test segment of {test_rows} rows is shorter than one {horizon}-day month"
        )));
    }
    // Rebalance j consumes return rows [train_rows + j*h, ... + h); its
    // feature anchor is the last row already observed.
    let test_rebalance: Vec<usize> = (0..n_rebalances)
        .map(|j| train_rows + j * horizon - 1)
        .collect();

    Ok(SplitAnchors {
        train_rows,
        train,
        validation,
        test_rebalance,
    })
}
