//! Expanding-window backtest: per split tune, train an ensemble, predict
//! the test block, and audit which data rows the fit touched.

use std::ops::Range;

use chrono::NaiveDate;
use din_core::marketdata::{compute_returns, ew_volatility, AssetClass, PricePanel, ReturnsPanel, VolPanel};
use din_core::objective::{ensemble_weights, portfolio_returns, CostModel, StrategyResult, WeightsMatrix};
use din_core::tuning::{tune, SearchSpace, TrialBudget, TuneResult, TunerMethod};
use din_core::windows::{build_batches, ModelBatch, ModelInputs, SequencingPolicy, Split, Stride};
use din_nn::{checkpoint, AttentionMode, DinModel};
use ndarray::{concatenate, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{search_space, TrainConfig};
use crate::error::{Result, TrainError};
use crate::predict::predict_model;
use crate::trainer::{train_ensemble, train_model, EpochRecord, TrainData};

/// Returns, volatility and model tensors for one panel.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub returns: ReturnsPanel,
    pub vol: VolPanel,
    pub inputs: ModelInputs,
}

impl Dataset {
    pub fn new(returns: ReturnsPanel, vol: VolPanel, sigma_tgt: f64, static_context: usize) -> Result<Self> {
        let origin = *returns
            .dates
            .first()
            .ok_or_else(|| TrainError::Config("empty returns panel".into()))?;
        let inputs = ModelInputs::new(&returns, &vol, sigma_tgt, static_context, origin)?;
        Ok(Self { returns, vol, inputs })
    }

    pub fn from_prices(prices: &PricePanel, vol_span: usize, sigma_tgt: f64) -> Result<Self> {
        let returns = compute_returns(prices)?;
        let vol = ew_volatility(&returns, vol_span)?;
        Self::new(returns, vol, sigma_tgt, prices.asset_class.id())
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.returns.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.returns.assets
    }

    pub fn n_rows(&self) -> usize {
        self.returns.n_rows()
    }

    /// SHA-256 over the dates, returns, observation mask and volatility of
    /// `rows`.
    pub fn checksum(&self, rows: Range<usize>) -> String {
        let mut h = Sha256::new();
        for t in rows {
            h.update(self.returns.dates[t].to_string().as_bytes());
            for c in 0..self.returns.n_assets() {
                h.update(self.returns.values[[t, c]].to_le_bytes());
                h.update([self.returns.mask[[t, c]] as u8]);
                h.update(self.vol.values[[t, c]].to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Panel rows read while fitting one split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageAudit {
    pub first_row: usize,
    /// Inclusive; the next-day return target of the last scored row.
    pub last_row: usize,
    pub first_date: NaiveDate,
    pub last_date: NaiveDate,
    pub test_start: NaiveDate,
    pub checksum: String,
}

impl LeakageAudit {
    /// Touched rows of `windows`, failing if any lies on or after `test_start`.
    pub fn of_windows(ds: &Dataset, windows: &[&ModelBatch], test_start: NaiveDate) -> Result<Self> {
        let first_row = windows
            .iter()
            .map(|w| w.start_row)
            .min()
            .ok_or_else(|| TrainError::Leakage("no windows to audit".into()))?;
        let last_scored = windows.iter().map(|w| w.start_row + w.len() - 1).max().unwrap();
        let last_row = last_scored + 1;
        if last_row >= ds.n_rows() {
            return Err(TrainError::Leakage(format!("target row {last_row} is past the panel end")));
        }
        let audit = Self {
            first_row,
            last_row,
            first_date: ds.dates()[first_row],
            last_date: ds.dates()[last_row],
            test_start,
            checksum: ds.checksum(first_row..last_row + 1),
        };
        if audit.last_date >= test_start {
            return Err(TrainError::Leakage(format!(
                "fit reads {} but the test starts {}",
                audit.last_date, test_start
            )));
        }
        Ok(audit)
    }

    /// Recomputes the checksum against `ds`.
    pub fn verify(&self, ds: &Dataset) -> bool {
        self.last_row < ds.n_rows()
            && self.last_date < self.test_start
            && ds.checksum(self.first_row..self.last_row + 1) == self.checksum
    }
}

/// Training and validation windows of a split.
///
/// Training rows start once `T` rows of usable history exist. Validation
/// rows stop one row short of the test block so that the final next-day
/// target precedes the test start.
pub fn split_data(ds: &Dataset, split: &Split, sequence_length: usize) -> Result<TrainData> {
    let policy = SequencingPolicy {
        sequence_length,
        batch_size: sequence_length,
        shuffle: false,
    };
    let first = (ds.inputs.first_usable_row() + sequence_length - 1).max(split.train.rows.start);
    let train_span = first..split.train.rows.end;
    if train_span.len() < 2 {
        return Err(TrainError::Config(format!(
            "split {} has no training rows after {} rows of history",
            split.index, sequence_length
        )));
    }
    let keep = |w: &ModelBatch| w.len() - w.first_scored >= 2;
    let train: Vec<ModelBatch> = build_batches(&ds.inputs, train_span, policy, Stride::Block)?
        .into_iter()
        .filter(keep)
        .collect();
    let valid_span = split.valid.rows.start..split.valid.rows.end.saturating_sub(1);
    let valid = if valid_span.len() >= 2 {
        build_batches(&ds.inputs, valid_span, policy, Stride::Block)?
            .into_iter()
            .filter(keep)
            .collect()
    } else {
        Vec::new()
    };
    Ok(TrainData {
        train,
        valid,
        n_static: AssetClass::ALL.len().max(ds.inputs.static_context + 1),
    })
}

/// Prediction rows of a test block: every test row that has a next-day
/// return.
pub fn test_rows(ds: &Dataset, split: &Split) -> Range<usize> {
    split.test.rows.start..split.test.rows.end.min(ds.n_rows() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunerSettings {
    pub method: TunerMethod,
    /// Grid to search; `None` uses the published grid of the FE.
    #[serde(default)]
    pub space: Option<SearchSpace>,
    /// Re-tune at every split rather than once on the first.
    pub per_split: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkForwardConfig {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub tuner: Option<TunerSettings>,
    /// Cost applied to the realised test returns, in bps.
    pub eval_c_bps: f64,
}

/// Tunes `base` on one split's windows. Trials that diverge count as failed.
pub fn tune_config(base: &TrainConfig, data: &TrainData, settings: &TunerSettings) -> Result<(TrainConfig, TuneResult)> {
    let space = settings.space.clone().unwrap_or_else(|| search_space(&base.fe));
    let result = tune(&space, settings.method, settings.seed, |trial, budget: TrialBudget| {
        let mut cfg = base
            .apply_trial(trial)
            .map_err(|e| din_core::Error::InvalidArgument(e.to_string()))?;
        cfg.max_epochs = budget.max_epochs.unwrap_or(cfg.max_epochs);
        cfg.patience = budget.patience.unwrap_or(cfg.patience);
        match train_model(&cfg, data) {
            Ok(m) => Ok(m.best_valid_loss),
            Err(TrainError::Divergence { .. }) => Ok(f64::INFINITY),
            Err(e) => Err(din_core::Error::InvalidArgument(e.to_string())),
        }
    })?;
    let best = base.apply_trial(&result.best)?;
    Ok((best, result))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemberRecord {
    pub seed: u64,
    pub best_epoch: Option<usize>,
    pub best_valid_loss: f64,
    pub checkpoint_sha256: String,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitRecord {
    pub index: usize,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub config: TrainConfig,
    pub audit: LeakageAudit,
    pub members: Vec<MemberRecord>,
    pub tuning: Option<TuneResult>,
}

#[derive(Debug, Clone)]
pub struct SplitOutput {
    pub record: SplitRecord,
    pub models: Vec<DinModel>,
    pub rows: Range<usize>,
    pub member_weights: Vec<WeightsMatrix>,
    /// Mean of `member_weights`.
    pub weights: WeightsMatrix,
    pub result: StrategyResult,
}

#[derive(Debug, Clone)]
pub struct WalkForwardOutput {
    pub splits: Vec<SplitOutput>,
    /// Test results of all splits in date order.
    pub result: StrategyResult,
}

/// SHA-256 of a model's checkpoint bytes.
pub fn model_sha256(model: &DinModel) -> Result<String> {
    let mut buf = Vec::new();
    checkpoint::write_checkpoint(model, &mut buf)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

pub fn walk_forward(config: &WalkForwardConfig, ds: &Dataset, splits: &[Split]) -> Result<WalkForwardOutput> {
    if splits.is_empty() {
        return Err(TrainError::Config("walk-forward needs at least one split".into()));
    }
    let seq = config.train.sequence_length;
    let mut tuned: Option<(TrainConfig, TuneResult)> = None;
    let mut outputs = Vec::with_capacity(splits.len());
    for split in splits {
        let data = split_data(ds, split, seq)?;
        let windows: Vec<&ModelBatch> = data.train.iter().chain(&data.valid).collect();
        let audit = LeakageAudit::of_windows(ds, &windows, split.test.start)?;
        let (train_cfg, tuning) = match &config.tuner {
            Some(settings) if settings.per_split || tuned.is_none() => {
                let (cfg, res) = tune_config(&config.train, &data, settings)?;
                tuned = Some((cfg, res.clone()));
                (cfg, Some(res))
            }
            Some(_) => (tuned.as_ref().unwrap().0, None),
            None => (config.train, None),
        };
        tracing::info!(split = split.index, label = %train_cfg.label(), "training ensemble");
        let trained = train_ensemble(&train_cfg, &data, &config.seeds)?;
        let rows = test_rows(ds, split);
        let models: Vec<DinModel> = trained.iter().map(|t| t.model.clone()).collect();
        let member_weights = models
            .iter()
            .map(|m| {
                predict_model(m, &ds.inputs, ds.assets(), rows.clone(), seq, AttentionMode::Learned).map(|p| p.weights)
            })
            .collect::<Result<Vec<_>>>()?;
        let weights = ensemble_weights(&member_weights)?;
        let mut result = portfolio_returns(
            &weights,
            &ds.returns,
            &ds.vol,
            ds.inputs.sigma_tgt,
            CostModel::new(config.eval_c_bps, 0.0)?,
            true,
        )?;
        result.name = train_cfg.label();
        result.seeds = config.seeds.clone();
        let members = trained
            .iter()
            .zip(&config.seeds)
            .map(|(t, &seed)| {
                Ok(MemberRecord {
                    seed,
                    best_epoch: t.best_epoch,
                    best_valid_loss: t.best_valid_loss,
                    checkpoint_sha256: model_sha256(&t.model)?,
                    history: t.history.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        outputs.push(SplitOutput {
            record: SplitRecord {
                index: split.index,
                test_start: split.test.start,
                test_end: split.test.end,
                config: train_cfg,
                audit,
                members,
                tuning,
            },
            models,
            rows,
            member_weights,
            weights,
            result,
        });
    }
    let result = concat_results(&outputs.iter().map(|o| &o.result).collect::<Vec<_>>())?;
    Ok(WalkForwardOutput { splits: outputs, result })
}

/// Joins per-split results; dates must strictly increase across parts.
pub fn concat_results(parts: &[&StrategyResult]) -> Result<StrategyResult> {
    let first = *parts
        .first()
        .ok_or_else(|| TrainError::Config("nothing to concatenate".into()))?;
    let mut out = first.clone();
    for p in &parts[1..] {
        if let (Some(last), Some(next)) = (out.dates.last(), p.dates.first()) {
            if next <= last {
                return Err(TrainError::Overlap(format!("{next} follows {last}")));
            }
        }
        if p.weights.assets != out.weights.assets {
            return Err(TrainError::Config("splits trade different assets".into()));
        }
        out.dates.extend_from_slice(&p.dates);
        out.returns.extend_from_slice(&p.returns);
        out.gross.extend_from_slice(&p.gross);
        out.turnover.extend_from_slice(&p.turnover);
        out.weights.dates.extend_from_slice(&p.weights.dates);
        out.weights.values = concatenate(Axis(0), &[out.weights.values.view(), p.weights.values.view()])
            .map_err(|e| TrainError::Config(e.to_string()))?;
    }
    Ok(out)
}
