//! Two-step alternating training of the factor networks.
//!
//! Each outer round first runs gradient epochs on the recurrent network with
//! the tail pair(s) frozen (the time-varying block), then gradient epochs on
//! the tails with the network outputs frozen (the fixed-parameter block).
//! Early stopping watches a held-out slice of the training window; the
//! accepted model is the best-validation snapshot. Ensembles average the
//! per-window coefficient forecasts and tails of independently seeded fits.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agru::{AgruParams, HeadSpec};
use crate::autodiff::{read_snapshot, write_snapshot, NodeId, RmsProp, RmsPropConfig, Tape, Tensor};
use crate::data::{build_features, monthly_label, PriceTable, SplitAnchors};
use crate::error::{Error, Result};
use crate::genfactor::{
    market_latent, market_loglik, stock_cond_loglik, MarketModel, MarketTheta, StockModel,
    StockTheta, TailParams, A_DEFAULT, LN_2PI,
};

/// Ablation switches: the full model, the light-tails variant that pins
/// every tail pair at one and skips tail descent, and the variant that feeds
/// the last hidden state straight to the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    Naive,
    NoAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Learning rate of the tail-descent block.
    pub l_fix: f64,
    /// Learning rate of the network block.
    pub l_tv: f64,
    /// Outer alternation rounds.
    pub n_m: usize,
    /// Epoch cap per tail-descent block.
    pub n_fix: usize,
    /// Epoch cap per network block.
    pub n_tv: usize,
    /// Feature window length in trading days.
    pub t_window: usize,
    /// Fraction of samples held out for early stopping.
    pub validation: f64,
    /// Ensemble size.
    pub b_r: usize,
    pub hidden_market: usize,
    pub hidden_stock: usize,
    /// Validation cadence within a network block, in epochs.
    pub eval_every: usize,
    /// Evaluations without improvement before a block stops.
    pub patience: usize,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l_fix: 1e-2,
            l_tv: 1e-3,
            n_m: 6,
            n_fix: 2000,
            n_tv: 2000,
            t_window: 200,
            validation: 0.2,
            b_r: 5,
            hidden_market: 4,
            hidden_stock: 6,
            eval_every: 100,
            patience: 5,
            ablation: Ablation::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_fix > 0.0) || !(self.l_tv > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.n_m == 0 || self.n_tv == 0 || self.b_r == 0 {
            return Err(Error::Config(
                "round, epoch and ensemble counts must be positive".into(),
            ));
        }
        if self.t_window == 0 || self.hidden_market == 0 || self.hidden_stock == 0 {
            return Err(Error::Config("window and hidden sizes must be positive".into()));
        }
        if !(self.validation > 0.0 && self.validation < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} outside (0, 1)",
                self.validation
            )));
        }
        if self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("evaluation cadence and patience must be positive".into()));
        }
        Ok(())
    }

    pub fn use_attention(&self) -> bool {
        self.ablation != Ablation::NoAttention
    }
}

/// Per-channel normalization statistics, estimated on the gradient split
/// only and frozen for validation and test windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Means and deviations per feature channel over the given samples
    /// (each a row-major `d_in x t` window). Constant channels get unit
    /// deviation so normalization stays a bijection.
    fn fit(samples: &[Vec<f64>], d_in: usize, t: usize) -> Self {
        let count = (samples.len() * t) as f64;
        let mut mean = vec![0.0; d_in];
        let mut std = vec![0.0; d_in];
        for s in samples {
            for c in 0..d_in {
                for x in &s[c * t..(c + 1) * t] {
                    mean[c] += x;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for s in samples {
            for c in 0..d_in {
                for x in &s[c * t..(c + 1) * t] {
                    std[c] += (x - mean[c]) * (x - mean[c]);
                }
            }
        }
        for s in &mut std {
            *s = (*s / count).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        NormStats { mean, std }
    }

    /// Normalizes one raw `d_in x t` window into per-timestep `1 x d_in`
    /// tensors ready for the network.
    pub fn normalize_window(&self, features: &[f64], t: usize) -> Result<Vec<Tensor>> {
        let d_in = self.mean.len();
        if features.len() != d_in * t {
            return Err(Error::Shape {
                op: "normalize_window",
                detail: format!("window of {} values for {d_in} x {t}", features.len()),
            });
        }
        (0..t)
            .map(|step| {
                let row: Vec<f64> = (0..d_in)
                    .map(|c| (features[c * t + step] - self.mean[c]) / self.std[c])
                    .collect();
                Tensor::matrix(1, d_in, row)
            })
            .collect()
    }
}

/// One split of a dataset, packed per timestep: `xs[t]` stacks every
/// sample's normalized feature row at step `t`.
#[derive(Debug, Clone)]
pub struct SplitTensors {
    pub xs: Vec<Tensor>,
    /// Labels as an `S x 1` tensor.
    pub y: Tensor,
    pub labels: Vec<f64>,
    /// Originating anchor indices, for traceability.
    pub anchors: Vec<usize>,
}

impl SplitTensors {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Feature/label pairs split into a gradient part and a held-out part, with
/// frozen normalization statistics.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub d_in: usize,
    pub t_window: usize,
    pub norm: NormStats,
    pub train: SplitTensors,
    pub validation: SplitTensors,
}

impl Dataset {
    /// Packs samples; the first `n_train` are the gradient split and the
    /// remainder the held-out split. Normalization uses the gradient split
    /// only.
    pub fn from_samples(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        anchors: Vec<usize>,
        d_in: usize,
        t_window: usize,
        n_train: usize,
    ) -> Result<Self> {
        let s = features.len();
        if s == 0 || labels.len() != s || anchors.len() != s {
            return Err(Error::Shape {
                op: "dataset",
                detail: format!("{s} windows, {} labels, {} anchors", labels.len(), anchors.len()),
            });
        }
        if n_train == 0 || n_train >= s {
            return Err(Error::Data(format!(
                "gradient split of {n_train} samples leaves no held-out slice in {s}"
            )));
        }
        for (i, f) in features.iter().enumerate() {
            if f.len() != d_in * t_window {
                return Err(Error::Shape {
                    op: "dataset",
                    detail: format!("window {i} holds {} values, expected {d_in} x {t_window}", f.len()),
                });
            }
        }
        if labels.iter().any(|l| !l.is_finite()) {
            return Err(Error::Data("non-finite label".into()));
        }
        let norm = NormStats::fit(&features[..n_train], d_in, t_window);
        let pack = |range: std::ops::Range<usize>| -> Result<SplitTensors> {
            let rows = range.len();
            let mut xs = Vec::with_capacity(t_window);
            for step in 0..t_window {
                let mut data = Vec::with_capacity(rows * d_in);
                for s_idx in range.clone() {
                    for c in 0..d_in {
                        data.push(
                            (features[s_idx][c * t_window + step] - norm.mean[c]) / norm.std[c],
                        );
                    }
                }
                xs.push(Tensor::matrix(rows, d_in, data)?);
            }
            Ok(SplitTensors {
                xs,
                y: Tensor::matrix(rows, 1, labels[range.clone()].to_vec())?,
                labels: labels[range.clone()].to_vec(),
                anchors: anchors[range].to_vec(),
            })
        };
        let train = pack(0..n_train)?;
        let validation = pack(n_train..s)?;
        Ok(Dataset {
            d_in,
            t_window,
            norm,
            train,
            validation,
        })
    }

    /// Same as [`Dataset::from_samples`] with the held-out size given as a
    /// trailing fraction.
    pub fn from_fraction(
        features: Vec<Vec<f64>>,
        labels: Vec<f64>,
        d_in: usize,
        t_window: usize,
        val_fraction: f64,
    ) -> Result<Self> {
        let s = features.len();
        if !(val_fraction > 0.0 && val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {val_fraction} outside (0, 1)"
            )));
        }
        let n_val = ((s as f64) * val_fraction).floor() as usize;
        let anchors = (0..s).collect();
        Dataset::from_samples(features, labels, anchors, d_in, t_window, s - n_val.max(1))
    }
}

/// Market dataset from the price pipeline: 2-channel windows over the index
/// series, one-month index returns as labels.
pub fn market_dataset(
    prices: &PriceTable,
    market_ticker: &str,
    anchors: &SplitAnchors,
    t_window: usize,
    horizon: usize,
) -> Result<Dataset> {
    pipeline_dataset(prices, market_ticker, None, anchors, t_window, horizon)
}

/// Stock dataset: 4-channel windows (market rows first), one-month stock
/// returns as labels.
pub fn stock_dataset(
    prices: &PriceTable,
    market_ticker: &str,
    stock_ticker: &str,
    anchors: &SplitAnchors,
    t_window: usize,
    horizon: usize,
) -> Result<Dataset> {
    pipeline_dataset(prices, market_ticker, Some(stock_ticker), anchors, t_window, horizon)
}

fn pipeline_dataset(
    prices: &PriceTable,
    market_ticker: &str,
    stock_ticker: Option<&str>,
    anchors: &SplitAnchors,
    t_window: usize,
    horizon: usize,
) -> Result<Dataset> {
    let returns = prices.to_returns()?;
    let market_col = returns.column(returns.ticker_index(market_ticker)?);
    let stock_col = match stock_ticker {
        Some(t) => Some(returns.column(returns.ticker_index(t)?)),
        None => None,
    };
    let label_ticker = prices.ticker_index(stock_ticker.unwrap_or(market_ticker))?;
    let d_in = if stock_col.is_some() { 4 } else { 2 };

    let all: Vec<usize> = anchors.train.iter().chain(&anchors.validation).copied().collect();
    let mut features = Vec::with_capacity(all.len());
    let mut labels = Vec::with_capacity(all.len());
    for &a in &all {
        features.push(build_features(&market_col, stock_col.as_deref(), a, t_window)?);
        // The position opens at the close of the price day after the anchor
        // return row.
        labels.push(monthly_label(prices, label_ticker, a + 1, horizon)?);
    }
    Dataset::from_samples(features, labels, all, d_in, t_window, anchors.train.len())
}

/// Accepted market fit: network, tail pair, and the realized latent factors
/// over both splits (gradient split first). The latents are training
/// artifacts and are not persisted.
#[derive(Debug, Clone)]
pub struct TrainedMarketModel {
    pub params: AgruParams,
    pub tail: TailParams,
    pub z_train: Vec<f64>,
    pub z_val: Vec<f64>,
    pub train_nll: f64,
    pub val_nll: f64,
}

/// Accepted per-stock fit: network plus the market-factor and own-factor
/// tail pairs.
#[derive(Debug, Clone)]
pub struct TrainedStockModel {
    pub params: AgruParams,
    pub tail_market: TailParams,
    pub tail_own: TailParams,
    pub train_nll: f64,
    pub val_nll: f64,
}

enum TaskKind<'a> {
    Market,
    Stock { z_train: &'a [f64], z_val: &'a [f64] },
}

impl TaskKind<'_> {
    fn n_tails(&self) -> usize {
        match self {
            TaskKind::Market => 2,
            TaskKind::Stock { .. } => 4,
        }
    }
}

fn tail_pair(tails: &[f64], pair: usize) -> TailParams {
    TailParams::clamped(tails[2 * pair], tails[2 * pair + 1])
}

/// Composes `s = (u^z + v^{-z})/A + 1` and `g'(z) = s + z (u^z ln u -
/// v^{-z} ln v)/A` on the tape; `g(z) = z s`.
fn g_terms(tape: &mut Tape, z: NodeId, u: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let t1 = tape.pow(u, z)?;
    let nz = tape.neg(z)?;
    let t2 = tape.pow(v, nz)?;
    let sum = tape.add(t1, t2)?;
    let scaled = tape.scale(sum, 1.0 / A_DEFAULT)?;
    let s = tape.add_const(scaled, 1.0)?;
    let lnu = tape.ln(u)?;
    let lnv = tape.ln(v)?;
    let d1 = tape.mul(t1, lnu)?;
    let d2 = tape.mul(t2, lnv)?;
    let diff = tape.sub(d1, d2)?;
    let d = tape.scale(diff, 1.0 / A_DEFAULT)?;
    let zd = tape.mul(z, d)?;
    let gp = tape.add(s, zd)?;
    Ok((s, gp))
}

/// Mean negative log-likelihood node from a coefficient matrix (`S x 2` for
/// the market head, `S x 3` for the stock head), labels, optional realized
/// market latents, and tail leaves (one pair per transform).
fn nll_from_theta(
    tape: &mut Tape,
    theta: NodeId,
    y: NodeId,
    z_market: Option<NodeId>,
    tails: &[NodeId],
    n_samples: usize,
) -> Result<NodeId> {
    let per = match z_market {
        None => {
            let alpha = tape.slice_cols(theta, 0, 1)?;
            let beta = tape.slice_cols(theta, 1, 2)?;
            let num = tape.sub(y, alpha)?;
            let w = tape.div(num, beta)?;
            let z = tape.g_inverse(w, tails[0], tails[1], A_DEFAULT)?;
            let (_, gp) = g_terms(tape, z, tails[0], tails[1])?;
            let ln_scale = tape.ln(beta)?;
            let ln_gp = tape.ln(gp)?;
            let zz = tape.mul(z, z)?;
            let half_zz = tape.scale(zz, 0.5)?;
            let t = tape.add(ln_scale, ln_gp)?;
            tape.add(t, half_zz)?
        }
        Some(zm) => {
            let alpha = tape.slice_cols(theta, 0, 1)?;
            let beta = tape.slice_cols(theta, 1, 2)?;
            let gamma = tape.slice_cols(theta, 2, 3)?;
            let (s_m, _) = g_terms(tape, zm, tails[0], tails[1])?;
            let gm = tape.mul(zm, s_m)?;
            let bgm = tape.mul(beta, gm)?;
            let num0 = tape.sub(y, alpha)?;
            let num = tape.sub(num0, bgm)?;
            let w = tape.div(num, gamma)?;
            let z = tape.g_inverse(w, tails[2], tails[3], A_DEFAULT)?;
            let (_, gp) = g_terms(tape, z, tails[2], tails[3])?;
            let ln_scale = tape.ln(gamma)?;
            let ln_gp = tape.ln(gp)?;
            let zz = tape.mul(z, z)?;
            let half_zz = tape.scale(zz, 0.5)?;
            let t = tape.add(ln_scale, ln_gp)?;
            tape.add(t, half_zz)?
        }
    };
    let shifted = tape.add_const(per, 0.5 * LN_2PI)?;
    let total = tape.sum(shifted)?;
    tape.scale(total, 1.0 / n_samples as f64)
}

/// Mean negative log-likelihood via the scalar density functions (the
/// production inference path, used for validation and reporting).
fn scalar_mean_nll(
    theta: &Tensor,
    labels: &[f64],
    kind_z: Option<&[f64]>,
    tails: &[f64],
) -> Result<f64> {
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let ll = match kind_z {
            None => market_loglik(
                y,
                MarketTheta {
                    alpha: theta.at(s, 0),
                    beta: theta.at(s, 1),
                },
                tail_pair(tails, 0),
                A_DEFAULT,
            )?,
            Some(zm) => stock_cond_loglik(
                y,
                zm[s],
                StockTheta {
                    alpha: theta.at(s, 0),
                    beta: theta.at(s, 1),
                    gamma: theta.at(s, 2),
                },
                tail_pair(tails, 0),
                tail_pair(tails, 1),
                A_DEFAULT,
            )?,
        };
        total -= ll;
    }
    Ok(total / labels.len() as f64)
}

/// Mean NLL of an accepted market model on a packed split.
pub fn market_mean_nll(
    model: &TrainedMarketModel,
    split: &SplitTensors,
    use_attention: bool,
) -> Result<f64> {
    let theta = model.params.predict(&split.xs, use_attention)?;
    scalar_mean_nll(
        &theta,
        &split.labels,
        None,
        &[model.tail.u, model.tail.v],
    )
}

/// Mean conditional NLL of an accepted stock model on a packed split with
/// aligned realized market latents.
pub fn stock_mean_nll(
    model: &TrainedStockModel,
    split: &SplitTensors,
    z_market: &[f64],
    use_attention: bool,
) -> Result<f64> {
    if z_market.len() != split.len() {
        return Err(Error::Shape {
            op: "stock_mean_nll",
            detail: format!("{} latents for {} samples", z_market.len(), split.len()),
        });
    }
    let theta = model.params.predict(&split.xs, use_attention)?;
    scalar_mean_nll(
        &theta,
        &split.labels,
        Some(z_market),
        &[
            model.tail_market.u,
            model.tail_market.v,
            model.tail_own.u,
            model.tail_own.v,
        ],
    )
}

/// Tail descent with the coefficient matrix frozen: RMSProp epochs on the
/// tail scalars with hard projection onto `[1, 3]` after every step,
/// returning the best-on-training tails (the initial point included, so the
/// block can never worsen the objective).
///
/// Returns `(tails, nll_before, nll_after)`.
pub(crate) fn fix_tail_descent(
    theta: &Tensor,
    labels: &[f64],
    z_market: Option<&[f64]>,
    tails0: &[f64],
    n_epochs: usize,
    lr: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    let n = labels.len();
    let n_tails = tails0.len();
    let before = scalar_mean_nll(theta, labels, z_market, tails0)?;
    let mut best = (tails0.to_vec(), before);
    let mut cur: Vec<Tensor> = tails0.iter().map(|&t| Tensor::scalar(t)).collect();
    let mut opt = RmsProp::new(RmsPropConfig::with_lr(lr), &vec![1; n_tails]);
    let y_vals = Tensor::matrix(n, 1, labels.to_vec())?;
    let zm_vals = match z_market {
        Some(z) => Some(Tensor::matrix(n, 1, z.to_vec())?),
        None => None,
    };
    for _ in 0..n_epochs {
        let mut tape = Tape::new();
        let tail_ids: Vec<NodeId> = cur
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<_>>()?;
        let theta_id = tape.constant(theta.clone())?;
        let y_id = tape.constant(y_vals.clone())?;
        let zm_id = match &zm_vals {
            Some(z) => Some(tape.constant(z.clone())?),
            None => None,
        };
        let loss = match nll_from_theta(&mut tape, theta_id, y_id, zm_id, &tail_ids, n) {
            Ok(l) => l,
            // A step that drives the inversion out of range ends the block;
            // the best-so-far tails stand.
            Err(_) => break,
        };
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            break;
        }
        if loss_val < best.1 {
            best = (cur.iter().map(|t| t.item()).collect(), loss_val);
        }
        let grads = match tape.backward(loss) {
            Ok(g) => g,
            Err(_) => break,
        };
        let gvec: Vec<Option<&Tensor>> = tail_ids.iter().map(|&id| grads.wrt(id)).collect();
        let mut refs: Vec<&mut Tensor> = cur.iter_mut().collect();
        opt.step(&mut refs, &gvec)?;
        for t in &mut cur {
            let v = t.item().clamp(TailParams::MIN, TailParams::MAX);
            t.data_mut()[0] = v;
        }
    }
    // The final iterate was stepped to but never scored inside the loop.
    let final_tails: Vec<f64> = cur.iter().map(|t| t.item()).collect();
    if let Ok(v) = scalar_mean_nll(theta, labels, z_market, &final_tails) {
        if v < best.1 {
            best = (final_tails, v);
        }
    }
    let after = best.1;
    Ok((best.0, before, after))
}

struct Engine<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    kind: TaskKind<'a>,
    params: AgruParams,
    tails: Vec<f64>,
    lr_tv: f64,
    lr_fix: f64,
    halved: bool,
    any_epoch_ok: bool,
    best_params: AgruParams,
    best_tails: Vec<f64>,
    best_val: f64,
}

enum BlockEnd {
    Ran,
    AbortToBest,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a Dataset, kind: TaskKind<'a>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let TaskKind::Stock { z_train, z_val } = &kind {
            if z_train.len() != data.train.len() || z_val.len() != data.validation.len() {
                return Err(Error::Shape {
                    op: "fit_stock",
                    detail: format!(
                        "{}/{} latents for {}/{} samples",
                        z_train.len(),
                        z_val.len(),
                        data.train.len(),
                        data.validation.len()
                    ),
                });
            }
        }
        let (head, hidden) = match kind {
            TaskKind::Market => (HeadSpec::market(), cfg.hidden_market),
            TaskKind::Stock { .. } => (HeadSpec::stock(), cfg.hidden_stock),
        };
        let params = AgruParams::init(data.d_in, hidden, head, seed)?;
        let tails = if cfg.ablation == Ablation::Naive {
            vec![1.0; kind.n_tails()]
        } else {
            vec![1.5; kind.n_tails()]
        };
        let mut engine = Engine {
            cfg,
            data,
            kind,
            best_params: params.clone(),
            best_tails: tails.clone(),
            best_val: f64::INFINITY,
            params,
            tails,
            lr_tv: cfg.l_tv,
            lr_fix: cfg.l_fix,
            halved: false,
            any_epoch_ok: false,
        };
        engine.best_val = engine.validation_nll()?;
        Ok(engine)
    }

    fn z_for(&self, validation: bool) -> Option<&[f64]> {
        match &self.kind {
            TaskKind::Market => None,
            TaskKind::Stock { z_train, z_val } => {
                Some(if validation { z_val } else { z_train })
            }
        }
    }

    fn validation_nll(&self) -> Result<f64> {
        let theta = self
            .params
            .predict(&self.data.validation.xs, self.cfg.use_attention())?;
        scalar_mean_nll(
            &theta,
            &self.data.validation.labels,
            self.z_for(true),
            &self.tails,
        )
    }

    fn training_nll(&self) -> Result<f64> {
        let theta = self
            .params
            .predict(&self.data.train.xs, self.cfg.use_attention())?;
        scalar_mean_nll(&theta, &self.data.train.labels, self.z_for(false), &self.tails)
    }

    fn snapshot_if_better(&mut self, val: f64) {
        if val < self.best_val {
            self.best_val = val;
            self.best_params = self.params.clone();
            self.best_tails = self.tails.clone();
        }
    }

    fn restore_best(&mut self) {
        self.params = self.best_params.clone();
        self.tails = self.best_tails.clone();
    }

    /// One full-batch gradient epoch on the network with tails frozen.
    fn tv_epoch(&mut self, opt: &mut RmsProp) -> Result<f64> {
        let split = &self.data.train;
        let mut tape = Tape::new();
        let nodes = self.params.register(&mut tape)?;
        let xs: Vec<NodeId> = split
            .xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<_>>()?;
        let y = tape.constant(split.y.clone())?;
        let zm = match self.z_for(false) {
            Some(z) => Some(tape.constant(Tensor::matrix(split.len(), 1, z.to_vec())?)?),
            None => None,
        };
        let tail_ids: Vec<NodeId> = self
            .tails
            .iter()
            .map(|&t| tape.constant(Tensor::scalar(t)))
            .collect::<Result<_>>()?;
        let fwd = self
            .params
            .forward(&mut tape, &nodes, &xs, self.cfg.use_attention())?;
        let loss = nll_from_theta(&mut tape, fwd.theta, y, zm, &tail_ids, split.len())?;
        let loss_val = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        let gvec: Vec<Option<&Tensor>> = nodes.ids.iter().map(|&id| grads.wrt(id)).collect();
        let mut refs = self.params.tensors_mut();
        opt.step(&mut refs, &gvec)?;
        Ok(loss_val)
    }

    /// Numeric failure: rewind to the best snapshot and halve the rates
    /// once; a second failure ends training at the best snapshot.
    fn numeric_event(&mut self) -> BlockEnd {
        self.restore_best();
        if self.halved {
            BlockEnd::AbortToBest
        } else {
            self.halved = true;
            self.lr_tv *= 0.5;
            self.lr_fix *= 0.5;
            BlockEnd::Ran
        }
    }

    fn tv_block(&mut self) -> Result<BlockEnd> {
        let sizes: Vec<usize> = self.params.tensors().iter().map(|(_, t)| t.len()).collect();
        let mut opt = RmsProp::new(RmsPropConfig::with_lr(self.lr_tv), &sizes);
        let mut since_best = 0usize;
        let mut ep = 0usize;
        while ep < self.cfg.n_tv {
            match self.tv_epoch(&mut opt) {
                Ok(l) if l.is_finite() => {
                    self.any_epoch_ok = true;
                    ep += 1;
                }
                Ok(_) | Err(Error::NonFinite { .. }) | Err(Error::Numerical { .. }) => {
                    if !self.any_epoch_ok {
                        return Err(Error::Numerical {
                            context: "trainer",
                            detail: "first network epoch already diverged; check data scaling"
                                .into(),
                        });
                    }
                    match self.numeric_event() {
                        BlockEnd::AbortToBest => return Ok(BlockEnd::AbortToBest),
                        BlockEnd::Ran => {
                            opt = RmsProp::new(RmsPropConfig::with_lr(self.lr_tv), &sizes);
                            continue;
                        }
                    }
                }
                Err(e) => return Err(e),
            }
            if ep % self.cfg.eval_every == 0 || ep == self.cfg.n_tv {
                let val = self.validation_nll()?;
                if val < self.best_val {
                    self.snapshot_if_better(val);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= self.cfg.patience {
                        // Early stop: this block ends at the best snapshot.
                        self.restore_best();
                        return Ok(BlockEnd::Ran);
                    }
                }
            }
        }
        Ok(BlockEnd::Ran)
    }

    fn fix_block(&mut self) -> Result<BlockEnd> {
        let theta = self
            .params
            .predict(&self.data.train.xs, self.cfg.use_attention())?;
        match fix_tail_descent(
            &theta,
            &self.data.train.labels,
            self.z_for(false),
            &self.tails,
            self.cfg.n_fix,
            self.lr_fix,
        ) {
            Ok((tails, _, _)) => {
                self.tails = tails;
                self.any_epoch_ok = true;
                let val = self.validation_nll()?;
                self.snapshot_if_better(val);
                Ok(BlockEnd::Ran)
            }
            Err(Error::NonFinite { .. }) | Err(Error::Numerical { .. }) => {
                Ok(self.numeric_event())
            }
            Err(e) => Err(e),
        }
    }

    fn run(&mut self) -> Result<()> {
        for _ in 0..self.cfg.n_m {
            if let BlockEnd::AbortToBest = self.tv_block()? {
                break;
            }
            if self.cfg.ablation != Ablation::Naive {
                if let BlockEnd::AbortToBest = self.fix_block()? {
                    break;
                }
            }
        }
        self.restore_best();
        Ok(())
    }
}

/// Fits the market network: alternating blocks, early stopping, and the
/// realized latent factors of the accepted model over both splits.
pub fn fit_market(data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainedMarketModel> {
    let mut engine = Engine::new(cfg, data, TaskKind::Market, seed)?;
    engine.run()?;
    let tail = tail_pair(&engine.tails, 0);
    let latents = |split: &SplitTensors| -> Result<Vec<f64>> {
        let theta = engine.params.predict(&split.xs, cfg.use_attention())?;
        split
            .labels
            .iter()
            .enumerate()
            .map(|(s, &y)| {
                market_latent(
                    y,
                    MarketTheta {
                        alpha: theta.at(s, 0),
                        beta: theta.at(s, 1),
                    },
                    tail,
                    A_DEFAULT,
                )
            })
            .collect()
    };
    Ok(TrainedMarketModel {
        z_train: latents(&data.train)?,
        z_val: latents(&data.validation)?,
        train_nll: engine.training_nll()?,
        val_nll: engine.best_val,
        params: engine.params,
        tail,
    })
}

/// Fits one stock network against the realized market latents (treated as
/// observed data, aligned with the dataset splits).
pub fn fit_stock(
    data: &Dataset,
    z_train: &[f64],
    z_val: &[f64],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedStockModel> {
    let mut engine = Engine::new(cfg, data, TaskKind::Stock { z_train, z_val }, seed)?;
    engine.run()?;
    Ok(TrainedStockModel {
        tail_market: tail_pair(&engine.tails, 0),
        tail_own: tail_pair(&engine.tails, 1),
        train_nll: engine.training_nll()?,
        val_nll: engine.best_val,
        params: engine.params,
    })
}

fn check_same_architecture<'m>(
    archs: impl Iterator<Item = &'m AgruParams>,
    op: &'static str,
) -> Result<()> {
    let mut first: Option<&AgruParams> = None;
    for p in archs {
        match first {
            None => first = Some(p),
            Some(f) => {
                if p.d_in != f.d_in || p.hidden != f.hidden || p.head != f.head {
                    return Err(Error::Shape {
                        op,
                        detail: "ensemble members disagree on architecture".into(),
                    });
                }
            }
        }
    }
    if first.is_none() {
        return Err(Error::Config("empty ensemble".into()));
    }
    Ok(())
}

/// Averages the per-window coefficient forecasts and tails of market
/// ensemble members on one normalized window.
pub fn ensemble_market_forecast(
    members: &[TrainedMarketModel],
    window: &[Tensor],
    use_attention: bool,
) -> Result<MarketModel> {
    check_same_architecture(members.iter().map(|m| &m.params), "ensemble_market")?;
    let b = members.len() as f64;
    let (mut alpha, mut beta, mut u, mut v) = (0.0, 0.0, 0.0, 0.0);
    for m in members {
        let theta = m.params.predict(window, use_attention)?;
        alpha += theta.at(0, 0) / b;
        beta += theta.at(0, 1) / b;
        u += m.tail.u / b;
        v += m.tail.v / b;
    }
    Ok(MarketModel {
        theta: MarketTheta { alpha, beta },
        tail: TailParams::new(u, v)?,
    })
}

/// Stock-side ensemble average on one normalized window.
pub fn ensemble_stock_forecast(
    members: &[TrainedStockModel],
    window: &[Tensor],
    use_attention: bool,
) -> Result<StockModel> {
    check_same_architecture(members.iter().map(|m| &m.params), "ensemble_stock")?;
    let b = members.len() as f64;
    let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
    let (mut um, mut vm, mut uo, mut vo) = (0.0, 0.0, 0.0, 0.0);
    for m in members {
        let theta = m.params.predict(window, use_attention)?;
        alpha += theta.at(0, 0) / b;
        beta += theta.at(0, 1) / b;
        gamma += theta.at(0, 2) / b;
        um += m.tail_market.u / b;
        vm += m.tail_market.v / b;
        uo += m.tail_own.u / b;
        vo += m.tail_own.v / b;
    }
    Ok(StockModel {
        theta: StockTheta { alpha, beta, gamma },
        tail_market: TailParams::new(um, vm)?,
        tail_own: TailParams::new(uo, vo)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MemberMeta {
    seed: u64,
    d_in: usize,
    hidden: usize,
    tails: Vec<f64>,
    train_nll: f64,
    val_nll: f64,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StockSetMeta {
    ticker: String,
    norm: NormStats,
    members: Vec<MemberMeta>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    config_hash: String,
    seeds: Vec<u64>,
    market_norm: NormStats,
    market: Vec<MemberMeta>,
    stocks: Vec<StockSetMeta>,
}

/// Per-stock ensemble with its frozen normalization statistics.
#[derive(Debug, Clone)]
pub struct StockModelSet {
    pub ticker: String,
    pub norm: NormStats,
    pub members: Vec<TrainedStockModel>,
}

/// Everything the forecasting side needs, persistable as a directory of
/// parameter snapshots plus one manifest.
#[derive(Debug, Clone)]
pub struct TrainedBundle {
    pub config: TrainConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub market_norm: NormStats,
    pub market: Vec<TrainedMarketModel>,
    pub stocks: Vec<StockModelSet>,
}

impl TrainedBundle {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest {
            config: self.config,
            config_hash: self.config_hash.clone(),
            seeds: self.seeds.clone(),
            market_norm: self.market_norm.clone(),
            market: Vec::new(),
            stocks: Vec::new(),
        };
        for (k, m) in self.market.iter().enumerate() {
            let file = format!("market_{k}.bin");
            write_snapshot(&dir.join(&file), &m.params.to_entries())?;
            manifest.market.push(MemberMeta {
                seed: self.seeds.get(k).copied().unwrap_or(k as u64),
                d_in: m.params.d_in,
                hidden: m.params.hidden,
                tails: vec![m.tail.u, m.tail.v],
                train_nll: m.train_nll,
                val_nll: m.val_nll,
                file,
            });
        }
        for (i, set) in self.stocks.iter().enumerate() {
            let mut meta = StockSetMeta {
                ticker: set.ticker.clone(),
                norm: set.norm.clone(),
                members: Vec::new(),
            };
            for (k, m) in set.members.iter().enumerate() {
                let file = format!("stock_{i}_{k}.bin");
                write_snapshot(&dir.join(&file), &m.params.to_entries())?;
                meta.members.push(MemberMeta {
                    seed: self.seeds.get(k).copied().unwrap_or(k as u64),
                    d_in: m.params.d_in,
                    hidden: m.params.hidden,
                    tails: vec![
                        m.tail_market.u,
                        m.tail_market.v,
                        m.tail_own.u,
                        m.tail_own.v,
                    ],
                    train_nll: m.train_nll,
                    val_nll: m.val_nll,
                    file,
                });
            }
            manifest.stocks.push(meta);
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        std::fs::write(dir.join("manifest.json"), json)
            .map_err(|e| Error::io(dir.join("manifest.json"), e))
    }

    /// Loads a persisted bundle. Realized latents are training artifacts
    /// and come back empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::io(dir.join("manifest.json"), e))?;
        let manifest: Manifest =
            serde_json::from_str(&raw).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let load_params = |meta: &MemberMeta, head: HeadSpec| -> Result<AgruParams> {
            let mut p = AgruParams::init(meta.d_in, meta.hidden, head, 0)?;
            p.load_entries(&read_snapshot(&dir.join(&meta.file))?)?;
            Ok(p)
        };
        let market = manifest
            .market
            .iter()
            .map(|meta| {
                Ok(TrainedMarketModel {
                    params: load_params(meta, HeadSpec::market())?,
                    tail: TailParams::new(meta.tails[0], meta.tails[1])?,
                    z_train: Vec::new(),
                    z_val: Vec::new(),
                    train_nll: meta.train_nll,
                    val_nll: meta.val_nll,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let stocks = manifest
            .stocks
            .iter()
            .map(|set| {
                let members = set
                    .members
                    .iter()
                    .map(|meta| {
                        if meta.tails.len() != 4 {
                            return Err(Error::Format(format!(
                                "stock member in {} carries {} tail values, expected 4",
                                set.ticker,
                                meta.tails.len()
                            )));
                        }
                        Ok(TrainedStockModel {
                            params: load_params(meta, HeadSpec::stock())?,
                            tail_market: TailParams::new(meta.tails[0], meta.tails[1])?,
                            tail_own: TailParams::new(meta.tails[2], meta.tails[3])?,
                            train_nll: meta.train_nll,
                            val_nll: meta.val_nll,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(StockModelSet {
                    ticker: set.ticker.clone(),
                    norm: set.norm.clone(),
                    members,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainedBundle {
            config: manifest.config,
            config_hash: manifest.config_hash,
            seeds: manifest.seeds,
            market_norm: manifest.market_norm,
            market,
            stocks,
        })
    }
}

/// Trains the full ensemble bundle over a prepared market dataset and one
/// dataset per stock. Member fits and stock fits run on the worker pool;
/// results are ordered deterministically.
pub fn fit_bundle(
    market_data: &Dataset,
    stock_data: &[(String, Dataset)],
    cfg: &TrainConfig,
    seeds: &[u64],
    config_hash: &str,
) -> Result<TrainedBundle> {
    cfg.validate()?;
    if seeds.len() != cfg.b_r {
        return Err(Error::Config(format!(
            "{} seeds for an ensemble of {}",
            seeds.len(),
            cfg.b_r
        )));
    }
    let market: Vec<TrainedMarketModel> = seeds
        .par_iter()
        .map(|&s| fit_market(market_data, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let stocks: Vec<StockModelSet> = stock_data
        .par_iter()
        .map(|(ticker, data)| {
            let members = seeds
                .par_iter()
                .enumerate()
                .map(|(k, &s)| {
                    fit_stock(data, &market[k].z_train, &market[k].z_val, cfg, s)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(StockModelSet {
                ticker: ticker.clone(),
                norm: data.norm.clone(),
                members,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainedBundle {
        config: *cfg,
        config_hash: config_hash.to_string(),
        seeds: seeds.to_vec(),
        market_norm: market_data.norm.clone(),
        market,
        stocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfactor::g;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(rng: &mut ChaCha12Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            n_m: 2,
            n_tv: 60,
            n_fix: 80,
            t_window: 8,
            eval_every: 20,
            patience: 3,
            hidden_market: 4,
            hidden_stock: 4,
            ..TrainConfig::default()
        }
    }

    /// Labels drawn from a constant-parameter market model; windows carry
    /// no signal, so the head biases have to learn the constants.
    fn market_set(n: usize, alpha: f64, beta: f64, tail: TailParams, seed: u64) -> Dataset {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let t = 8;
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let w: Vec<f64> = (0..2 * t)
                .map(|_| 0.01 * gauss(&mut rng))
                .collect();
            features.push(w);
            let z: f64 = gauss(&mut rng);
            labels.push(alpha + beta * g(z, tail, A_DEFAULT));
        }
        Dataset::from_fraction(features, labels, 2, t, 0.2).unwrap()
    }

    fn stock_set(
        n: usize,
        theta: StockTheta,
        tail_m: TailParams,
        tail_o: TailParams,
        seed: u64,
    ) -> (Dataset, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let t = 8;
        let mut features = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let w: Vec<f64> = (0..4 * t)
                .map(|_| 0.01 * gauss(&mut rng))
                .collect();
            features.push(w);
            let zm: f64 = gauss(&mut rng);
            let zi: f64 = gauss(&mut rng);
            zs.push(zm);
            labels.push(
                theta.alpha + theta.beta * g(zm, tail_m, A_DEFAULT)
                    + theta.gamma * g(zi, tail_o, A_DEFAULT),
            );
        }
        let data = Dataset::from_fraction(features, labels, 4, t, 0.2).unwrap();
        let n_train = data.train.len();
        (data, zs[..n_train].to_vec(), zs[n_train..].to_vec())
    }

    #[test]
    fn dataset_packing_and_normalization() {
        let features = vec![
            vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0],
            vec![4.0, 5.0, 6.0, 40.0, 50.0, 60.0],
            vec![7.0, 8.0, 9.0, 70.0, 80.0, 90.0],
        ];
        let data = Dataset::from_samples(
            features,
            vec![0.1, 0.2, 0.3],
            vec![10, 11, 12],
            2,
            3,
            2,
        )
        .unwrap();
        assert_eq!(data.train.len(), 2);
        assert_eq!(data.validation.len(), 1);
        assert_eq!(data.train.xs.len(), 3);
        assert_eq!(data.train.xs[0].dims2(), (2, 2));
        // Channel means over the gradient split: (1..6)/6 = 3.5, x10 = 35.
        assert!((data.norm.mean[0] - 3.5).abs() < 1e-12);
        assert!((data.norm.mean[1] - 35.0).abs() < 1e-12);
        // Normalized gradient-split channels have zero mean and unit
        // variance by construction.
        let mut sum = 0.0;
        let mut sq = 0.0;
        for step in &data.train.xs {
            for s in 0..2 {
                sum += step.at(s, 0);
                sq += step.at(s, 0) * step.at(s, 0);
            }
        }
        assert!(sum.abs() < 1e-12);
        assert!((sq / 6.0 - 1.0).abs() < 1e-12);
        // The held-out split reuses the frozen statistics.
        let expect = (7.0 - 3.5) / data.norm.std[0];
        assert!((data.validation.xs[0].at(0, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn tape_loss_agrees_with_the_scalar_densities() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        // Market family.
        let n = 40;
        let mut theta = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            theta.push(0.02 * gauss(&mut rng));
            theta.push(0.05 + 0.3 * rng.gen::<f64>());
            labels.push(0.4 * gauss(&mut rng));
        }
        let theta = Tensor::matrix(n, 2, theta).unwrap();
        let tails = [1.7, 1.2];
        let mut tape = Tape::new();
        let tid: Vec<NodeId> = tails
            .iter()
            .map(|&t| tape.leaf(Tensor::scalar(t)).unwrap())
            .collect();
        let th = tape.constant(theta.clone()).unwrap();
        let y = tape
            .constant(Tensor::matrix(n, 1, labels.clone()).unwrap())
            .unwrap();
        let loss = nll_from_theta(&mut tape, th, y, None, &tid, n).unwrap();
        let direct = scalar_mean_nll(&theta, &labels, None, &tails).unwrap();
        assert!(
            (tape.value(loss).item() - direct).abs() < 1e-10,
            "{} vs {direct}",
            tape.value(loss).item()
        );

        // Stock family.
        let mut theta = Vec::with_capacity(3 * n);
        let mut labels = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            theta.push(0.02 * gauss(&mut rng));
            theta.push(0.5 * gauss(&mut rng));
            theta.push(0.05 + 0.3 * rng.gen::<f64>());
            labels.push(0.5 * gauss(&mut rng));
            zs.push(gauss(&mut rng));
        }
        let theta = Tensor::matrix(n, 3, theta).unwrap();
        let tails = [1.3, 2.2, 1.1, 1.9];
        let mut tape = Tape::new();
        let tid: Vec<NodeId> = tails
            .iter()
            .map(|&t| tape.leaf(Tensor::scalar(t)).unwrap())
            .collect();
        let th = tape.constant(theta.clone()).unwrap();
        let y = tape
            .constant(Tensor::matrix(n, 1, labels.clone()).unwrap())
            .unwrap();
        let zm = tape
            .constant(Tensor::matrix(n, 1, zs.clone()).unwrap())
            .unwrap();
        let loss = nll_from_theta(&mut tape, th, y, Some(zm), &tid, n).unwrap();
        let direct = scalar_mean_nll(&theta, &labels, Some(&zs), &tails).unwrap();
        assert!(
            (tape.value(loss).item() - direct).abs() < 1e-10,
            "{} vs {direct}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn tail_descent_never_worsens_and_respects_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 300;
        let truth = TailParams { u: 2.2, v: 1.1 };
        let mut theta = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            theta.push(0.01);
            theta.push(0.2);
            let z: f64 = gauss(&mut rng);
            labels.push(0.01 + 0.2 * g(z, truth, A_DEFAULT));
        }
        let theta = Tensor::matrix(n, 2, theta).unwrap();
        let (tails, before, after) =
            fix_tail_descent(&theta, &labels, None, &[1.5, 1.5], 400, 1e-2).unwrap();
        assert!(after <= before + 1e-6, "{after} vs {before}");
        assert!(after < before - 1e-3, "descent made no progress");
        for t in &tails {
            assert!((TailParams::MIN..=TailParams::MAX).contains(t));
        }
        // With the coefficients at truth, the tails should drift toward the
        // generating pair.
        assert!((tails[0] - truth.u).abs() < 0.45, "u {}", tails[0]);
        assert!((tails[1] - truth.v).abs() < 0.45, "v {}", tails[1]);
    }

    #[test]
    fn naive_tails_reduce_to_a_gaussian_density() {
        // With both tails at one, g is exactly the slope-1.5 linear map, so
        // the density must match a Gaussian with scale 1.5 beta.
        let (y, alpha, beta) = (0.37, 0.02, 0.4);
        let got = market_loglik(
            y,
            MarketTheta { alpha, beta },
            TailParams::NAIVE,
            A_DEFAULT,
        )
        .unwrap();
        let scale = 1.5 * beta;
        let z = (y - alpha) / scale;
        let want = -(scale).ln() - 0.5 * z * z - 0.5 * LN_2PI;
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn market_training_beats_the_untrained_initialization() {
        let truth = TailParams { u: 2.0, v: 1.8 };
        let data = market_set(500, 0.01, 0.2, truth, 31);
        let cfg = TrainConfig {
            ablation: Ablation::NoAttention,
            ..small_cfg()
        };
        let init = AgruParams::init(2, cfg.hidden_market, HeadSpec::market(), 9).unwrap();
        let theta0 = init.predict(&data.validation.xs, cfg.use_attention()).unwrap();
        let nll0 = scalar_mean_nll(&theta0, &data.validation.labels, None, &[1.5, 1.5]).unwrap();

        let model = fit_market(&data, &cfg, 9).unwrap();
        assert!(
            model.val_nll < nll0,
            "accepted {} vs untrained {nll0}",
            model.val_nll
        );
        assert!(model.tail.u >= 1.0 && model.tail.u <= 3.0);
        assert!(model.tail.v >= 1.0 && model.tail.v <= 3.0);
        // The reported validation NLL is reproducible from the accepted
        // snapshot through the public evaluator.
        let recheck = market_mean_nll(&model, &data.validation, cfg.use_attention()).unwrap();
        assert!((recheck - model.val_nll).abs() < 1e-12);
        // Realized latents invert the labels under the accepted model.
        let theta = model.params.predict(&data.train.xs, cfg.use_attention()).unwrap();
        for (s, &z) in model.z_train.iter().enumerate().take(20) {
            let rebuilt = theta.at(s, 0) + theta.at(s, 1) * g(z, model.tail, A_DEFAULT);
            assert!((rebuilt - data.train.labels[s]).abs() < 1e-7);
        }
    }

    #[test]
    fn naive_ablation_pins_tails_and_skips_tail_descent() {
        let data = market_set(220, 0.0, 0.15, TailParams { u: 2.0, v: 2.0 }, 77);
        let cfg = TrainConfig {
            ablation: Ablation::Naive,
            n_m: 1,
            n_tv: 20,
            eval_every: 10,
            ..small_cfg()
        };
        let model = fit_market(&data, &cfg, 3).unwrap();
        assert_eq!(model.tail, TailParams::NAIVE);
    }

    #[test]
    fn equal_seeds_and_data_give_identical_fits() {
        let (data, z_tr, z_va) = stock_set(
            240,
            StockTheta {
                alpha: 0.005,
                beta: 0.1,
                gamma: 0.15,
            },
            TailParams { u: 1.6, v: 1.4 },
            TailParams { u: 2.0, v: 1.2 },
            13,
        );
        let cfg = TrainConfig {
            n_m: 1,
            n_tv: 30,
            n_fix: 30,
            eval_every: 10,
            ..small_cfg()
        };
        let a = fit_stock(&data, &z_tr, &z_va, &cfg, 21).unwrap();
        let b = fit_stock(&data, &z_tr, &z_va, &cfg, 21).unwrap();
        assert_eq!(a.tail_market, b.tail_market);
        assert_eq!(a.tail_own, b.tail_own);
        assert_eq!(a.val_nll.to_bits(), b.val_nll.to_bits());
        for ((_, ta), (_, tb)) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        // Misaligned latents are rejected.
        assert!(fit_stock(&data, &z_tr[1..], &z_va, &cfg, 21).is_err());
    }

    #[test]
    fn ensemble_averages_coefficients_and_tails() {
        let data = market_set(160, 0.01, 0.2, TailParams { u: 1.5, v: 1.5 }, 55);
        let window: Vec<Tensor> = data.train.xs.iter().map(|x| {
            let d = x.dims2().1;
            Tensor::matrix(1, d, x.data()[..d].to_vec()).unwrap()
        }).collect();
        let make = |seed: u64, tail: TailParams| TrainedMarketModel {
            params: AgruParams::init(2, 4, HeadSpec::market(), seed).unwrap(),
            tail,
            z_train: vec![],
            z_val: vec![],
            train_nll: 0.0,
            val_nll: 0.0,
        };
        let m1 = make(1, TailParams { u: 1.2, v: 2.8 });
        let m2 = make(2, TailParams { u: 1.8, v: 1.0 });
        let single = ensemble_market_forecast(std::slice::from_ref(&m1), &window, true).unwrap();
        let t1 = m1.params.predict(&window, true).unwrap();
        assert!((single.theta.alpha - t1.at(0, 0)).abs() < 1e-15);
        assert!((single.theta.beta - t1.at(0, 1)).abs() < 1e-15);
        assert_eq!(single.tail, m1.tail);

        let pair = ensemble_market_forecast(&[m1.clone(), m2.clone()], &window, true).unwrap();
        let t2 = m2.params.predict(&window, true).unwrap();
        assert!((pair.theta.alpha - 0.5 * (t1.at(0, 0) + t2.at(0, 0))).abs() < 1e-15);
        assert!((pair.theta.beta - 0.5 * (t1.at(0, 1) + t2.at(0, 1))).abs() < 1e-15);
        assert!((pair.tail.u - 1.5).abs() < 1e-15);
        assert!((pair.tail.v - 1.9).abs() < 1e-15);

        // Identical members collapse to the single forecast.
        let twin = ensemble_market_forecast(&[m1.clone(), m1.clone()], &window, true).unwrap();
        assert!((twin.theta.alpha - single.theta.alpha).abs() < 1e-15);

        // Architecture mismatch is rejected.
        let odd = TrainedMarketModel {
            params: AgruParams::init(2, 5, HeadSpec::market(), 3).unwrap(),
            ..m1.clone()
        };
        assert!(ensemble_market_forecast(&[m1, odd], &window, true).is_err());
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let data = market_set(180, 0.01, 0.2, TailParams { u: 1.9, v: 1.3 }, 11);
        let (sdata, z_tr, z_va) = stock_set(
            180,
            StockTheta {
                alpha: 0.0,
                beta: 0.1,
                gamma: 0.1,
            },
            TailParams { u: 1.5, v: 1.5 },
            TailParams { u: 1.5, v: 1.5 },
            12,
        );
        let cfg = TrainConfig {
            b_r: 2,
            n_m: 1,
            n_tv: 20,
            n_fix: 20,
            eval_every: 10,
            ..small_cfg()
        };
        let bundle = TrainedBundle {
            config: cfg,
            config_hash: "deadbeef".into(),
            seeds: vec![1, 2],
            market_norm: data.norm.clone(),
            market: vec![
                fit_market(&data, &cfg, 1).unwrap(),
                fit_market(&data, &cfg, 2).unwrap(),
            ],
            stocks: vec![StockModelSet {
                ticker: "S0".into(),
                norm: sdata.norm.clone(),
                members: vec![fit_stock(&sdata, &z_tr, &z_va, &cfg, 1).unwrap()],
            }],
        };
        let dir = std::env::temp_dir().join(format!("bundle_rt_{}", std::process::id()));
        bundle.save(&dir).unwrap();
        let loaded = TrainedBundle::load(&dir).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        assert_eq!(loaded.config_hash, "deadbeef");
        assert_eq!(loaded.market.len(), 2);
        assert_eq!(loaded.stocks[0].ticker, "S0");
        assert_eq!(loaded.market_norm, data.norm);
        for (a, b) in bundle.market.iter().zip(&loaded.market) {
            assert_eq!(a.tail, b.tail);
            for ((_, ta), (_, tb)) in a.params.tensors().iter().zip(b.params.tensors().iter()) {
                assert_eq!(ta.data(), tb.data());
            }
        }
        let a = &bundle.stocks[0].members[0];
        let b = &loaded.stocks[0].members[0];
        assert_eq!(a.tail_market, b.tail_market);
        assert_eq!(a.tail_own, b.tail_own);
    }
}
