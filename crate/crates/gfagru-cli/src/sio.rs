//! File formats owned by the CLI: scenario matrices as CSV, forecast
//! bundles as JSON, and optimization solution records.

use std::path::Path;

use chrono::NaiveDate;
use gfagru::cvar::CvarSolution;
use gfagru::genfactor::{ForecastedFactorModel, ScenarioMatrix};
use gfagru::{Error, Result};
use serde::{Deserialize, Serialize};

/// Leading `#` comment lines are metadata; the header row names an optional
/// `market` column followed by one column per ticker.
pub fn write_scenarios(path: &Path, sc: &ScenarioMatrix, config_hash: &str) -> Result<()> {
    let n_assets = sc.tickers.len();
    let mut body = format!("# config={config_hash}\n");
    let mut header = String::new();
    if sc.market.is_some() {
        header.push_str("market,");
    }
    header.push_str(&sc.tickers.join(","));
    body.push_str(&header);
    body.push('\n');
    for s in 0..sc.n_scenarios {
        let mut line = String::new();
        if let Some(m) = &sc.market {
            line.push_str(&format!("{},", m[s]));
        }
        let row = &sc.returns[s * n_assets..(s + 1) * n_assets];
        line.push_str(
            &row.iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        body.push_str(&line);
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn read_scenarios(path: &Path) -> Result<ScenarioMatrix> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = raw
        .lines()
        .filter(|l| !l.trim_start().starts_with('#') && !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty scenario file", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let has_market = columns.first() == Some(&"market");
    let tickers: Vec<String> = columns
        .iter()
        .skip(usize::from(has_market))
        .map(|s| s.to_string())
        .collect();
    if tickers.is_empty() {
        return Err(Error::Data(format!(
            "{}: scenario file has no asset columns",
            path.display()
        )));
    }
    let mut returns = Vec::new();
    let mut market = Vec::new();
    let mut n_scenarios = 0;
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                path.display(),
                i + 1,
                fields.len(),
                columns.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Data(format!("{}: bad value {s:?}: {e}", path.display())))
        };
        let mut iter = fields.iter();
        if has_market {
            market.push(parse(iter.next().expect("market field"))?);
        }
        for f in iter {
            returns.push(parse(f)?);
        }
        n_scenarios += 1;
    }
    if n_scenarios == 0 {
        return Err(Error::Data(format!(
            "{}: scenario file has no data rows",
            path.display()
        )));
    }
    Ok(ScenarioMatrix {
        tickers,
        returns,
        n_scenarios,
        market: if has_market { Some(market) } else { None },
    })
}

/// Per-date one-step-ahead factor models over the test schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastFile {
    pub config_hash: String,
    /// Decision dates (the price day each forecast is made for).
    pub dates: Vec<NaiveDate>,
    pub models: Vec<ForecastedFactorModel>,
}

impl ForecastFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("forecast file: {e}")))?;
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Outcome of one shortfall solve, as emitted by the `optimize` command
/// (JSON line on stdout, optional CSV file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub config_hash: String,
    pub status: String,
    pub q: f64,
    pub target_return: f64,
    pub cvar: Option<f64>,
    pub var_threshold: Option<f64>,
    pub expected_return: Option<f64>,
    pub weights: Vec<(String, f64)>,
}

impl SolutionRecord {
    pub fn feasible(
        config_hash: &str,
        q: f64,
        target_return: f64,
        tickers: &[String],
        sol: &CvarSolution,
    ) -> Self {
        SolutionRecord {
            config_hash: config_hash.to_string(),
            status: "optimal".to_string(),
            q,
            target_return,
            cvar: Some(sol.cvar),
            var_threshold: Some(sol.var_threshold),
            expected_return: Some(sol.expected_return),
            weights: tickers
                .iter()
                .cloned()
                .zip(sol.weights.iter().copied())
                .collect(),
        }
    }

    pub fn infeasible(config_hash: &str, q: f64, target_return: f64) -> Self {
        SolutionRecord {
            config_hash: config_hash.to_string(),
            status: "infeasible".to_string(),
            q,
            target_return,
            cvar: None,
            var_threshold: None,
            expected_return: None,
            weights: Vec::new(),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(format!("solution record: {e}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = format!(
            "# config={}\n# status={},q={},target={}\nticker,weight\n",
            self.config_hash, self.status, self.q, self.target_return
        );
        for (t, w) in &self.weights {
            body.push_str(&format!("{t},{w}\n"));
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_files_round_trip_bitwise() {
        let sc = ScenarioMatrix {
            tickers: vec!["A".into(), "B".into()],
            returns: vec![0.015, -0.02, 0.1, 0.0025, -0.25, 1.0 / 3.0],
            n_scenarios: 3,
            market: Some(vec![0.01, -0.05, 0.125]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scenarios.csv");
        write_scenarios(&path, &sc, "abc123").unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("# config=abc123\nmarket,A,B\n"));
        let back = read_scenarios(&path).unwrap();
        assert_eq!(back.tickers, sc.tickers);
        assert_eq!(back.n_scenarios, 3);
        assert_eq!(back.returns, sc.returns, "shortest round-trip format is exact");
        assert_eq!(back.market, sc.market);

        let no_market = ScenarioMatrix {
            market: None,
            ..sc
        };
        write_scenarios(&path, &no_market, "abc123").unwrap();
        let back = read_scenarios(&path).unwrap();
        assert!(back.market.is_none());
        assert_eq!(back.returns, no_market.returns);
    }

    #[test]
    fn malformed_scenario_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# only a comment\n").unwrap();
        assert!(matches!(read_scenarios(&path), Err(Error::Data(_))));
        std::fs::write(&path, "A,B\n0.1\n").unwrap();
        assert!(matches!(read_scenarios(&path), Err(Error::Data(_))));
        std::fs::write(&path, "A,B\n0.1,zebra\n").unwrap();
        assert!(matches!(read_scenarios(&path), Err(Error::Data(_))));
        std::fs::write(&path, "A,B\n").unwrap();
        assert!(matches!(read_scenarios(&path), Err(Error::Data(_))));
    }
}
