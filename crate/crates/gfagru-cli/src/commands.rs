//! Subcommand implementations. Every command receives the resolved
//! configuration plus its hash and works off the shared price table /
//! split / monthly panel pipeline.

use std::path::{Path, PathBuf};

use gfagru::backtest::{
    gfagru_forecasts, run_backtest, var_forecast_series, write_coverage_csv, write_metrics_csv,
    write_wealth_csv, write_weights_csv, BacktestData, BacktestReport, CvarConfig, Strategy,
    Target, VarSeries,
};
use gfagru::benchmarks::MonthlyPanel;
use gfagru::cvar::{solve, CvarProblem};
use gfagru::data::{split, PriceTable, SplitAnchors, DAYS_PER_MONTH};
use gfagru::genfactor::{
    simulate, MarketModel, MarketTheta, StockModel, StockTheta, TailParams, A_DEFAULT,
};
use gfagru::synth::{synth_generate, SynthSegment, SynthSpec, MAX_DRIFT, MAX_LOADING};
use gfagru::trainer::{fit_bundle, market_dataset, stock_dataset, TrainedBundle};
use gfagru::{Error, Result};

use crate::config::RunConfig;
use crate::sio::{read_scenarios, write_scenarios, ForecastFile, SolutionRecord};

/// Resolved configuration with its digest, shared by every command.
pub struct Ctx {
    pub config: RunConfig,
    pub hash: String,
}

impl Ctx {
    fn out_path(&self, name: &str) -> PathBuf {
        self.config.data.output_dir.join(name)
    }

    fn ensure_output_dir(&self) -> Result<()> {
        let dir = &self.config.data.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    fn load_prices(&self) -> Result<PriceTable> {
        let (prices, dropped) = PriceTable::read_csv(&self.config.data.prices)?;
        if !dropped.is_empty() {
            eprintln!(
                "dropped {} incomplete column(s): {}",
                dropped.len(),
                dropped.join(", ")
            );
        }
        prices.ticker_index(&self.config.data.market)?;
        Ok(prices)
    }

    fn split_prices(&self, prices: &PriceTable) -> Result<SplitAnchors> {
        let returns = prices.to_returns()?;
        split(
            &returns.dates,
            self.config.split.to_spec()?,
            self.config.train.t_window,
            DAYS_PER_MONTH,
        )
    }

    fn monthly_panel(&self, prices: &PriceTable, anchors: &SplitAnchors) -> Result<MonthlyPanel> {
        MonthlyPanel::build(
            prices,
            &self.config.data.market,
            anchors.train_rows,
            DAYS_PER_MONTH,
        )
    }

    fn load_bundle(&self) -> Result<TrainedBundle> {
        let dir = self.config.data.model_dir();
        let bundle = TrainedBundle::load(&dir)?;
        if bundle.config_hash != self.hash {
            eprintln!(
                "note: model in {} was trained under configuration {}, current is {}",
                dir.display(),
                &bundle.config_hash[..12.min(bundle.config_hash.len())],
                &self.hash[..12],
            );
        }
        Ok(bundle)
    }
}

/// FNV-1a over the report label, mixed with the run seed, so every
/// strategy/target pair walks an independent random stream.
fn label_seed(label: &str, run_seed: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ run_seed
}

// ---------------------------------------------------------------------------
// ingest

pub fn cmd_ingest(ctx: &Ctx, input: &Path, output: Option<&Path>) -> Result<()> {
    let (prices, dropped) = PriceTable::read_csv(input)?;
    let market_ok = prices.ticker_index(&ctx.config.data.market).is_ok();
    println!(
        "{}: {} price days x {} tickers, {} .. {}",
        input.display(),
        prices.n_days(),
        prices.n_tickers(),
        prices.dates[0],
        prices.dates[prices.n_days() - 1],
    );
    if !dropped.is_empty() {
        println!("dropped incomplete columns: {}", dropped.join(", "));
    }
    if !market_ok {
        println!(
            "warning: configured market ticker {:?} not present",
            ctx.config.data.market
        );
    }
    if let Some(out) = output {
        let comments = vec![format!("config={}", ctx.hash)];
        prices.write_csv(out, &comments)?;
        println!("normalized table written to {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synth

/// Deterministic parameter grids inside the generator's admissible box.
/// Values vary with the stock index and segment so the panel mixes drifts,
/// loadings, and tail weights without any extra randomness.
fn synth_spec(ctx: &Ctx) -> Result<SynthSpec> {
    let s = &ctx.config.synth;
    let start_date = chrono::NaiveDate::parse_from_str(&s.start_date, "%Y-%m-%d")
        .map_err(|e| Error::Config(format!("synth.start_date: {e}")))?;
    let stock_tickers: Vec<String> = (0..s.stocks).map(|i| format!("S{:03}", i + 1)).collect();
    let per = s.days / s.segments;
    if per == 0 {
        return Err(Error::Config("synth.days shorter than synth.segments".into()));
    }
    let grid = |base: f64, step: f64, idx: usize, modulo: usize, cap: f64| -> f64 {
        (base + step * (idx % modulo) as f64).min(cap)
    };
    let mut segments = Vec::with_capacity(s.segments);
    for seg in 0..s.segments {
        let n_days = if seg + 1 == s.segments {
            s.days - per * (s.segments - 1)
        } else {
            per
        };
        let market = MarketModel {
            theta: MarketTheta {
                alpha: grid(0.0002, 0.0001, seg, 4, MAX_DRIFT),
                beta: grid(0.007, 0.0012, seg, 3, MAX_LOADING),
            },
            tail: TailParams {
                u: grid(1.15, 0.15, seg, 4, 2.0),
                v: grid(1.25, 0.10, seg, 5, 2.0),
            },
        };
        let stocks = (0..s.stocks)
            .map(|i| StockModel {
                theta: StockTheta {
                    alpha: grid(0.0001, 0.00002, i + seg, 7, MAX_DRIFT),
                    beta: grid(0.004, 0.0009, i + 2 * seg, 9, MAX_LOADING),
                    gamma: grid(0.005, 0.0008, i + 3 * seg, 10, MAX_LOADING),
                },
                tail_market: TailParams {
                    u: grid(1.0, 0.10, i, 6, 2.0),
                    v: grid(1.1, 0.08, i + seg, 8, 2.0),
                },
                tail_own: TailParams {
                    u: grid(1.2, 0.07, i + 1, 9, 2.0),
                    v: grid(1.0, 0.12, i + 2, 7, 2.0),
                },
            })
            .collect();
        segments.push(SynthSegment {
            n_days,
            market,
            stocks,
        });
    }
    let spec = SynthSpec {
        seed: s.seed,
        start_date,
        initial_price: s.initial_price,
        market_ticker: ctx.config.data.market.clone(),
        stock_tickers,
        segments,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn cmd_synth(ctx: &Ctx, output: Option<&Path>, truth: Option<&Path>) -> Result<()> {
    let spec = synth_spec(ctx)?;
    let prices = synth_generate(&spec)?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.config.data.prices.clone());
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let comments = vec![
        format!("config={}", ctx.hash),
        format!("synthetic panel, seed={}", spec.seed),
    ];
    prices.write_csv(&out, &comments)?;
    println!(
        "synthetic panel: {} price days x {} tickers -> {}",
        prices.n_days(),
        prices.n_tickers(),
        out.display()
    );
    if let Some(t) = truth {
        let body = serde_json::to_string_pretty(&spec)
            .map_err(|e| Error::Format(format!("truth file: {e}")))?;
        std::fs::write(t, body).map_err(|e| Error::io(t, e))?;
        println!("generator parameters -> {}", t.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train

pub fn cmd_train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let prices = ctx.load_prices()?;
    let anchors = ctx.split_prices(&prices)?;
    eprintln!(
        "split: {} training return rows, {} train / {} validation samples, {} rebalances",
        anchors.train_rows,
        anchors.train.len(),
        anchors.validation.len(),
        anchors.test_rebalance.len()
    );

    let market_ds = market_dataset(
        &prices,
        &cfg.data.market,
        &anchors,
        cfg.train.t_window,
        DAYS_PER_MONTH,
    )?;
    let stock_tickers: Vec<String> = prices
        .tickers
        .iter()
        .filter(|t| *t != &cfg.data.market)
        .cloned()
        .collect();
    let stock_data: Vec<(String, gfagru::trainer::Dataset)> = stock_tickers
        .iter()
        .map(|t| {
            Ok((
                t.clone(),
                stock_dataset(
                    &prices,
                    &cfg.data.market,
                    t,
                    &anchors,
                    cfg.train.t_window,
                    DAYS_PER_MONTH,
                )?,
            ))
        })
        .collect::<Result<_>>()?;

    let seeds = cfg.run.train_seeds(cfg.train.b_r);
    eprintln!(
        "training {} ensemble member(s) for the market and {} stock(s)",
        seeds.len(),
        stock_data.len()
    );
    let bundle = fit_bundle(&market_ds, &stock_data, &cfg.train, &seeds, &ctx.hash)?;

    let dir = cfg.data.model_dir();
    bundle.save(&dir)?;
    let market_val =
        bundle.market.iter().map(|m| m.val_nll).sum::<f64>() / bundle.market.len() as f64;
    let stock_val = bundle
        .stocks
        .iter()
        .flat_map(|s| s.members.iter().map(|m| m.val_nll))
        .sum::<f64>()
        / (bundle.stocks.len() * seeds.len()) as f64;
    println!(
        "trained bundle -> {} (market val NLL {:.4}, mean stock val NLL {:.4})",
        dir.display(),
        market_val,
        stock_val
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// forecast / simulate / optimize

fn forecast_file_path(ctx: &Ctx) -> PathBuf {
    ctx.out_path("forecasts.json")
}

pub fn cmd_forecast(ctx: &Ctx, output: Option<&Path>) -> Result<()> {
    let cfg = &ctx.config;
    let prices = ctx.load_prices()?;
    let anchors = ctx.split_prices(&prices)?;
    let panel = ctx.monthly_panel(&prices, &anchors)?;
    let bundle = ctx.load_bundle()?;
    let data = BacktestData {
        prices: &prices,
        market_ticker: &cfg.data.market,
        panel: &panel,
        bundle: Some(&bundle),
        train_rows: anchors.train_rows,
        t_window: cfg.train.t_window,
        horizon: DAYS_PER_MONTH,
    };
    let models = gfagru_forecasts(&data)?;
    // Decision day of rebalance j is the price day that closes return row
    // `train_rows + j*h - 1`.
    let dates = (0..models.len())
        .map(|j| prices.dates[anchors.train_rows + j * DAYS_PER_MONTH])
        .collect();
    let file = ForecastFile {
        config_hash: ctx.hash.clone(),
        dates,
        models,
    };
    ctx.ensure_output_dir()?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| forecast_file_path(ctx));
    file.write(&out)?;
    println!(
        "{} one-step-ahead factor models -> {}",
        file.models.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_simulate(ctx: &Ctx, date_index: usize, output: Option<&Path>) -> Result<()> {
    let file = ForecastFile::read(&forecast_file_path(ctx))?;
    if date_index >= file.models.len() {
        return Err(Error::Config(format!(
            "date index {date_index} outside the {} forecast dates (run `forecast` first?)",
            file.models.len()
        )));
    }
    let n = ctx.config.portfolio.resolve_n()?;
    let sc = simulate(
        &file.models[date_index],
        n,
        ctx.config.run.seed,
        true,
        A_DEFAULT,
    )?;
    ctx.ensure_output_dir()?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_path(&format!("scenarios_{date_index}.csv")));
    write_scenarios(&out, &sc, &ctx.hash)?;
    println!(
        "{} scenarios x {} assets for {} -> {}",
        sc.n_scenarios,
        sc.tickers.len(),
        file.dates[date_index],
        out.display()
    );
    Ok(())
}

pub fn cmd_optimize(
    ctx: &Ctx,
    scenarios: &Path,
    target: f64,
    output: Option<&Path>,
) -> Result<()> {
    let sc = read_scenarios(scenarios)?;
    let q = ctx.config.portfolio.q;
    let problem = CvarProblem {
        scenarios: &sc,
        q,
        target_return: target,
        mean_returns: None,
    };
    let record = match solve(&problem) {
        Ok(sol) => SolutionRecord::feasible(&ctx.hash, q, target, &sc.tickers, &sol),
        Err(Error::Infeasible(reason)) => {
            eprintln!("no feasible portfolio: {reason}");
            SolutionRecord::infeasible(&ctx.hash, q, target)
        }
        Err(e) => return Err(e),
    };
    println!("{}", record.to_json_line()?);
    if let Some(out) = output {
        record.write_csv(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// backtest / coverage / export

fn realized_monthly_rows(panel: &MonthlyPanel, n_rebalances: usize) -> Vec<Vec<f64>> {
    (0..n_rebalances)
        .map(|j| {
            let m = panel.n_train_months + j;
            let mut row = Vec::with_capacity(1 + panel.tickers.len());
            row.push(panel.market[m]);
            row.extend_from_slice(panel.stock_row(m));
            row
        })
        .collect()
}

fn coverage_outputs(
    ctx: &Ctx,
    forecasts: &[gfagru::genfactor::ForecastedFactorModel],
    panel: &MonthlyPanel,
    coverage_path: &Path,
) -> Result<()> {
    let dates: Vec<chrono::NaiveDate> = (0..forecasts.len())
        .map(|j| panel.dates[panel.n_train_months + j])
        .collect();
    let realized = realized_monthly_rows(panel, forecasts.len());
    let series = var_forecast_series(
        forecasts,
        &dates,
        &realized,
        &ctx.config.data.market,
        ctx.config.portfolio.q,
        ctx.config.portfolio.coverage_samples,
        ctx.config.run.seed,
    )?;
    write_coverage_csv(coverage_path, &series, &ctx.hash)?;
    let series_path = ctx.out_path("var_series.csv");
    write_var_series_csv(&series_path, &series, &ctx.hash)?;
    let total: usize = series
        .violations
        .iter()
        .map(|row| row.iter().filter(|v| **v).count())
        .sum();
    println!(
        "coverage at q={}: {} assets x {} months, {} violations ({:.1} expected) -> {}",
        series.q,
        series.assets.len(),
        series.dates.len(),
        total,
        (series.assets.len() * series.dates.len()) as f64 * (1.0 - series.q),
        coverage_path.display()
    );
    Ok(())
}

/// Long-format VaR trace: one row per date and asset.
fn write_var_series_csv(path: &Path, series: &VarSeries, config_hash: &str) -> Result<()> {
    let mut body = format!("# config={config_hash}\ndate,asset,var,realized,violation\n");
    for (t, date) in series.dates.iter().enumerate() {
        for (i, asset) in series.assets.iter().enumerate() {
            body.push_str(&format!(
                "{date},{asset},{},{},{}\n",
                series.var[t][i],
                series.realized[t][i],
                u8::from(series.violations[t][i])
            ));
        }
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn cmd_backtest(ctx: &Ctx, coverage: bool) -> Result<()> {
    let cfg = &ctx.config;
    let prices = ctx.load_prices()?;
    let anchors = ctx.split_prices(&prices)?;
    let panel = ctx.monthly_panel(&prices, &anchors)?;
    let needs_bundle = coverage || cfg.portfolio.strategies.contains(&Strategy::GfAgru);
    let bundle = if needs_bundle {
        Some(ctx.load_bundle()?)
    } else {
        None
    };
    let data = BacktestData {
        prices: &prices,
        market_ticker: &cfg.data.market,
        panel: &panel,
        bundle: bundle.as_ref(),
        train_rows: anchors.train_rows,
        t_window: cfg.train.t_window,
        horizon: DAYS_PER_MONTH,
    };
    let n_scenarios = cfg.portfolio.resolve_n()?;

    let mut jobs: Vec<(Strategy, Target)> = Vec::new();
    for strategy in &cfg.portfolio.strategies {
        if strategy.sweeps_targets() {
            for target in cfg.portfolio.target_sweep() {
                jobs.push((*strategy, target));
            }
        } else {
            jobs.push((*strategy, Target::Fixed(0.0)));
        }
    }

    let mut reports: Vec<BacktestReport> = Vec::with_capacity(jobs.len());
    for (strategy, target) in jobs {
        let cvar = CvarConfig {
            q: cfg.portfolio.q,
            n_scenarios,
            target,
        };
        let label = if strategy.sweeps_targets() {
            format!("{}:{}", strategy.label(), target.label())
        } else {
            strategy.label().to_string()
        };
        eprintln!(
            "backtesting {label}: {} rebalances, {} scenario draws{}",
            panel.n_months() - panel.n_train_months,
            n_scenarios,
            if strategy.is_randomized() {
                format!(", {} repetitions", cfg.portfolio.repetitions)
            } else {
                String::new()
            }
        );
        let seed = label_seed(&label, cfg.run.seed);
        let report = run_backtest(strategy, &data, &cvar, cfg.portfolio.repetitions, seed)?;
        if report.fallback_count > 0 {
            eprintln!(
                "  {} infeasible solve(s) fell back to equal weights",
                report.fallback_count
            );
        }
        println!(
            "{label}: AV {:.4}, SD {:.4}, ES {:.4}, MD {:.4}",
            report.metrics.av, report.metrics.sd, report.metrics.es, report.metrics.md
        );
        reports.push(report);
    }

    ctx.ensure_output_dir()?;
    let metrics_path = ctx.out_path("metrics.csv");
    write_metrics_csv(&metrics_path, &reports, &ctx.hash)?;
    let wealth_path = ctx.out_path("wealth.csv");
    write_wealth_csv(&wealth_path, &reports, &ctx.hash)?;
    for report in &reports {
        let name = format!("weights_{}.csv", report.label().replace(':', "_"));
        write_weights_csv(&ctx.out_path(&name), report, &ctx.hash)?;
    }
    println!(
        "{} strategy/target reports -> {} and {}",
        reports.len(),
        metrics_path.display(),
        wealth_path.display()
    );

    if coverage {
        let forecasts = gfagru_forecasts(&data)?;
        coverage_outputs(ctx, &forecasts, &panel, &ctx.out_path("coverage.csv"))?;
    }
    Ok(())
}

pub fn cmd_coverage(ctx: &Ctx, output: Option<&Path>) -> Result<()> {
    let cfg = &ctx.config;
    let prices = ctx.load_prices()?;
    let anchors = ctx.split_prices(&prices)?;
    let panel = ctx.monthly_panel(&prices, &anchors)?;
    let bundle = ctx.load_bundle()?;
    let data = BacktestData {
        prices: &prices,
        market_ticker: &cfg.data.market,
        panel: &panel,
        bundle: Some(&bundle),
        train_rows: anchors.train_rows,
        t_window: cfg.train.t_window,
        horizon: DAYS_PER_MONTH,
    };
    let forecasts = gfagru_forecasts(&data)?;
    ctx.ensure_output_dir()?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_path("coverage.csv"));
    coverage_outputs(ctx, &forecasts, &panel, &out)
}

pub fn cmd_export_params(ctx: &Ctx, output: Option<&Path>) -> Result<()> {
    let cfg = &ctx.config;
    let prices = ctx.load_prices()?;
    let anchors = ctx.split_prices(&prices)?;
    let panel = ctx.monthly_panel(&prices, &anchors)?;
    let bundle = ctx.load_bundle()?;
    let data = BacktestData {
        prices: &prices,
        market_ticker: &cfg.data.market,
        panel: &panel,
        bundle: Some(&bundle),
        train_rows: anchors.train_rows,
        t_window: cfg.train.t_window,
        horizon: DAYS_PER_MONTH,
    };
    let forecasts = gfagru_forecasts(&data)?;
    let dates: Vec<chrono::NaiveDate> = (0..forecasts.len())
        .map(|j| prices.dates[anchors.train_rows + j * DAYS_PER_MONTH])
        .collect();

    // Long format: one row per date and series; the market row leaves the
    // stock-only columns empty.
    let mut body = format!(
        "# config={}\ndate,series,alpha,beta,gamma,factor_u,factor_v,own_u,own_v\n",
        ctx.hash
    );
    for (j, model) in forecasts.iter().enumerate() {
        let d = dates[j];
        let m = &model.market;
        body.push_str(&format!(
            "{d},{},{},{},,{},{},,\n",
            cfg.data.market, m.theta.alpha, m.theta.beta, m.tail.u, m.tail.v
        ));
        for (ticker, s) in model.tickers.iter().zip(&model.stocks) {
            body.push_str(&format!(
                "{d},{ticker},{},{},{},{},{},{},{}\n",
                s.theta.alpha,
                s.theta.beta,
                s.theta.gamma,
                s.tail_market.u,
                s.tail_market.v,
                s.tail_own.u,
                s.tail_own.v
            ));
        }
    }
    ctx.ensure_output_dir()?;
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.out_path("parameters.csv"));
    std::fs::write(&out, body).map_err(|e| Error::io(&out, e))?;
    println!(
        "{} forecast dates x {} series -> {}",
        forecasts.len(),
        1 + panel.tickers.len(),
        out.display()
    );
    Ok(())
}
