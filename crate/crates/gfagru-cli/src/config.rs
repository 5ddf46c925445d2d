//! Layered run configuration: a TOML file, `GFAGRU_*` environment
//! variables, and `--set section.key=value` flags, applied in that order.
//! The resolved configuration hashes to a hex digest that every output file
//! embeds, so artifacts are traceable to the exact settings that produced
//! them.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use gfagru::backtest::{Strategy, Target};
use gfagru::data::SplitSpec;
use gfagru::trainer::TrainConfig;
use gfagru::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Confidence levels with their scenario counts satisfying `n(1-q) = 500`.
pub const QN_SCHEMA: [(f64, usize); 3] = [(0.90, 5_000), (0.95, 10_000), (0.99, 50_000)];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Adjusted price CSV (date column plus one column per ticker).
    pub prices: PathBuf,
    /// Ticker treated as the market index.
    pub market: String,
    pub output_dir: PathBuf,
    /// Trained-model directory; defaults to `<output_dir>/model`.
    pub model_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            prices: PathBuf::from("prices.csv"),
            market: "MKT".to_string(),
            output_dir: PathBuf::from("out"),
            model_dir: None,
        }
    }
}

impl DataConfig {
    pub fn model_dir(&self) -> PathBuf {
        self.model_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model"))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// One of `fraction`, `index`, `date`.
    pub kind: String,
    pub value: String,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            kind: "fraction".to_string(),
            value: "0.6".to_string(),
        }
    }
}

impl SplitConfig {
    pub fn to_spec(&self) -> Result<SplitSpec> {
        match self.kind.as_str() {
            "fraction" => Ok(SplitSpec::Fraction(self.value.parse().map_err(|e| {
                Error::Config(format!("split.value {:?}: {e}", self.value))
            })?)),
            "index" => Ok(SplitSpec::Index(self.value.parse().map_err(|e| {
                Error::Config(format!("split.value {:?}: {e}", self.value))
            })?)),
            "date" => Ok(SplitSpec::Date(
                NaiveDate::parse_from_str(&self.value, "%Y-%m-%d").map_err(|e| {
                    Error::Config(format!("split.value {:?}: {e}", self.value))
                })?,
            )),
            other => Err(Error::Config(format!(
                "split.kind {other:?} is not one of fraction, index, date"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    /// Shortfall confidence level.
    pub q: f64,
    /// Scenario draws per rebalance; derived from `q` when omitted.
    pub n_scenarios: Option<usize>,
    /// Fixed monthly target returns to sweep.
    pub targets: Vec<f64>,
    /// Also sweep the time-varying equal-weight-mean target.
    pub ew_target: bool,
    pub repetitions: usize,
    pub strategies: Vec<Strategy>,
    /// Accept (q, n) pairs outside the declared schema.
    pub allow_any_qn: bool,
    /// Simulation draws per date for value-at-risk coverage tests.
    pub coverage_samples: usize,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        PortfolioConfig {
            q: 0.95,
            n_scenarios: None,
            targets: vec![0.01, 0.02, 0.03],
            ew_target: true,
            repetitions: 10,
            strategies: vec![
                Strategy::EqualWeight,
                Strategy::StaticSaa,
                Strategy::DccMm,
                Strategy::GfAgru,
            ],
            allow_any_qn: false,
            coverage_samples: 10_000,
        }
    }
}

impl PortfolioConfig {
    /// Scenario count under the `n(1-q) = 500` schema, or the explicit
    /// override when `allow_any_qn` is set.
    pub fn resolve_n(&self) -> Result<usize> {
        let schema = QN_SCHEMA.iter().find(|(q, _)| (q - self.q).abs() < 1e-9);
        match (schema, self.n_scenarios) {
            (Some((_, n)), None) => Ok(*n),
            (Some((_, n)), Some(given)) if given == *n => Ok(given),
            (_, given) if self.allow_any_qn => given.ok_or_else(|| {
                Error::Config(
                    "portfolio.n_scenarios must be set explicitly when allow_any_qn is on".into(),
                )
            }),
            (Some((_, n)), Some(given)) => Err(Error::Config(format!(
                "portfolio.n_scenarios = {given} violates the n(1-q)=500 schema for q = {} \
                 (expected {n}); set portfolio.allow_any_qn = true to override",
                self.q
            ))),
            (None, _) => Err(Error::Config(format!(
                "portfolio.q = {} outside the supported set {{0.90, 0.95, 0.99}}; \
                 set portfolio.allow_any_qn = true to override",
                self.q
            ))),
        }
    }

    /// Target sweep in report order: fixed levels first, then the
    /// equal-weight-mean target when enabled.
    pub fn target_sweep(&self) -> Vec<Target> {
        let mut targets: Vec<Target> = self.targets.iter().map(|r| Target::Fixed(*r)).collect();
        if self.ew_target {
            targets.push(Target::EqualWeightMean);
        }
        targets
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// One seed per ensemble member; derived from `seed` when empty.
    pub train_seeds: Vec<u64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 7,
            train_seeds: Vec::new(),
        }
    }
}

impl RunSection {
    pub fn train_seeds(&self, b_r: usize) -> Vec<u64> {
        if self.train_seeds.is_empty() {
            (0..b_r as u64).map(|k| self.seed + 1 + k).collect()
        } else {
            self.train_seeds.clone()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub stocks: usize,
    /// Daily return rows to generate (price rows are one more).
    pub days: usize,
    pub seed: u64,
    /// Parameter regimes; the day count splits evenly across them.
    pub segments: usize,
    pub start_date: String,
    pub initial_price: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            stocks: 30,
            days: 1030,
            seed: 1,
            segments: 2,
            start_date: "2015-01-02".to_string(),
            initial_price: 100.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub portfolio: PortfolioConfig,
    pub run: RunSection,
    pub synth: SynthSection,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.to_spec()?;
        self.portfolio.resolve_n()?;
        if self.portfolio.repetitions == 0 {
            return Err(Error::Config("portfolio.repetitions must be positive".into()));
        }
        if self.portfolio.strategies.is_empty() {
            return Err(Error::Config("portfolio.strategies must not be empty".into()));
        }
        if self.portfolio.targets.is_empty() && !self.portfolio.ew_target {
            return Err(Error::Config(
                "portfolio needs at least one target (fixed or ew_target)".into(),
            ));
        }
        if !self.portfolio.targets.iter().all(|t| t.is_finite()) {
            return Err(Error::Config("portfolio.targets must be finite".into()));
        }
        if self.portfolio.coverage_samples == 0 {
            return Err(Error::Config("portfolio.coverage_samples must be positive".into()));
        }
        if self.synth.stocks == 0 || self.synth.days < 2 || self.synth.segments == 0 {
            return Err(Error::Config(
                "synth needs at least one stock, two days and one segment".into(),
            ));
        }
        if self.synth.segments > self.synth.days {
            return Err(Error::Config("synth.segments exceeds synth.days".into()));
        }
        NaiveDate::parse_from_str(&self.synth.start_date, "%Y-%m-%d")
            .map_err(|e| Error::Config(format!("synth.start_date: {e}")))?;
        if !(self.synth.initial_price > 0.0) {
            return Err(Error::Config("synth.initial_price must be positive".into()));
        }
        Ok(())
    }

    /// Hex digest of the resolved configuration; embedded in every output.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)
            .map_err(|e| Error::Format(format!("configuration hash: {e}")))?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_value(table: &mut toml::Table, section: &str, key: &str, raw: &str) -> Result<()> {
    let entry = table
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let section_table = entry.as_table_mut().ok_or_else(|| {
        Error::Config(format!("configuration section {section:?} is not a table"))
    })?;
    section_table.insert(key.to_string(), parse_override_value(raw));
    Ok(())
}

/// Loads the file (when given), then environment variables of the form
/// `GFAGRU_<SECTION>_<KEY>`, then `--set section.key=value` flags; later
/// layers win. Returns the configuration with its hash.
pub fn load(config_path: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, String)> {
    let mut table: toml::Table = match config_path {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            raw.parse()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let mut env_pairs: Vec<(String, String)> = std::env::vars()
        .filter(|(k, _)| k.starts_with("GFAGRU_"))
        .collect();
    env_pairs.sort();
    for (key, value) in env_pairs {
        let rest = &key["GFAGRU_".len()..];
        let Some((section, field)) = rest.split_once('_') else {
            return Err(Error::Config(format!(
                "environment variable {key} is not GFAGRU_<SECTION>_<KEY>"
            )));
        };
        set_value(
            &mut table,
            &section.to_lowercase(),
            &field.to_lowercase(),
            &value,
        )?;
    }
    for item in overrides {
        let (path, value) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {item:?} must be section.key=value"))
        })?;
        let (section, key) = path.split_once('.').ok_or_else(|| {
            Error::Config(format!("override key {path:?} must be section.key"))
        })?;
        set_value(&mut table, section.trim(), key.trim(), value.trim())?;
    }
    let config: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("configuration: {e}")))?;
    config.validate()?;
    let hash = config.hash()?;
    Ok((config, hash))
}
