//! Single-model training with early stopping, and seed ensembles.

use din_core::objective::CostModel;
use din_core::windows::ModelBatch;
use din_nn::{batch_loss, Adam, AttentionMode, BatchTensors, DinConfig, DinModel, Graph, NnError};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Result, TrainError};

/// Stops after `patience` epochs without a strictly lower loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            since_best: 0,
        }
    }

    /// Records the loss of `epoch`; returns `true` when training should stop.
    pub fn update(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        self.since_best >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's gradient steps.
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Mean pre-clip gradient norm.
    pub grad_norm: f64,
    pub skipped_windows: usize,
}

/// Windows for the gradient steps and for early stopping.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<ModelBatch>,
    pub valid: Vec<ModelBatch>,
    pub n_static: usize,
}

impl TrainData {
    pub fn n_assets(&self) -> Option<usize> {
        self.train.first().map(|w| w.x.ncols())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: DinModel,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; `None` keeps the initialisation.
    pub best_epoch: Option<usize>,
    pub best_valid_loss: f64,
}

fn step_seed(seed: u64, epoch: usize, window: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ window as u64
}

fn is_degenerate(e: &NnError) -> bool {
    matches!(e, NnError::Core(din_core::Error::Degenerate(_)))
}

/// Validation loss at `C = K = 0` over all windows pooled into one series.
///
/// A series with zero variance scores `+∞`.
pub fn validation_loss(model: &DinModel, valid: &BatchTensors) -> Result<f64> {
    let inf = model.infer(valid, AttentionMode::Learned)?;
    let mut g = Graph::new(&model.params);
    let w = g.constant(inf.weights);
    match batch_loss(&mut g, w, valid, CostModel::ZERO) {
        Ok(l) => Ok(g.scalar(l)),
        Err(e) if is_degenerate(&e) => Ok(f64::INFINITY),
        Err(e) => Err(e.into()),
    }
}

/// Adam on the regularised Sharpe loss, one step per window in
/// chronological order, with early stopping on the validation loss.
pub fn train_model(config: &TrainConfig, data: &TrainData) -> Result<TrainedModel> {
    config.validate()?;
    let n_assets = data
        .n_assets()
        .ok_or_else(|| TrainError::Config("no training windows".into()))?;
    let mut model = DinModel::new(DinConfig {
        fe: config.fe,
        ps: config.ps,
        n_assets,
        n_static: data.n_static,
        seed: config.seed,
    })?;
    let cost = CostModel::new(config.c_bps, config.k)?;
    let train: Vec<BatchTensors> = data
        .train
        .iter()
        .map(|w| BatchTensors::from_batches(&[w]))
        .collect::<std::result::Result<_, _>>()?;
    let valid = if data.valid.is_empty() {
        None
    } else {
        Some(BatchTensors::from_batches(&data.valid.iter().collect::<Vec<_>>())?)
    };

    let mut adam = Adam::new(config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let (mut loss_sum, mut norm_sum, mut steps, mut skipped) = (0.0, 0.0, 0usize, 0usize);
        for (i, bt) in train.iter().enumerate() {
            let grads = {
                let mut g = Graph::training(&model.params, step_seed(config.seed, epoch, i));
                let x = g.constant(bt.x.clone());
                let d = g.constant(bt.dates.clone());
                let out = model.forward(&mut g, x, d, &bt.static_ids, AttentionMode::Learned)?;
                let loss = match batch_loss(&mut g, out.weights, bt, cost) {
                    Ok(l) => l,
                    Err(e) if is_degenerate(&e) => {
                        skipped += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(TrainError::Divergence {
                        epoch,
                        window: i,
                        loss: value,
                    });
                }
                loss_sum += value;
                let back = g.backward(loss);
                g.param_grads(&back)
            };
            norm_sum += adam.step(&mut model.params, &grads);
            steps += 1;
        }
        let train_loss = if steps > 0 { loss_sum / steps as f64 } else { f64::NAN };
        let valid_loss = match &valid {
            Some(v) => validation_loss(&model, v)?,
            None => train_loss,
        };
        if valid_loss.is_nan() || valid_loss == f64::NEG_INFINITY {
            return Err(TrainError::Divergence {
                epoch,
                window: usize::MAX,
                loss: valid_loss,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            grad_norm: if steps > 0 { norm_sum / steps as f64 } else { 0.0 },
            skipped_windows: skipped,
        });
        let stop = stopper.update(epoch, valid_loss);
        if stopper.best_epoch() == Some(epoch) {
            best_params = model.params.clone();
        }
        tracing::debug!(epoch, train_loss, valid_loss, "epoch");
        if stop {
            break;
        }
    }
    model.params = best_params;
    Ok(TrainedModel {
        model,
        history,
        best_epoch: stopper.best_epoch(),
        best_valid_loss: stopper.best_loss(),
    })
}

/// One model per seed; any member failure aborts the ensemble.
pub fn train_ensemble(config: &TrainConfig, data: &TrainData, seeds: &[u64]) -> Result<Vec<TrainedModel>> {
    if seeds.is_empty() {
        return Err(TrainError::Config("ensemble needs at least one seed".into()));
    }
    seeds
        .iter()
        .map(|&seed| {
            train_model(&config.with_seed(seed), data).map_err(|e| TrainError::Member {
                seed,
                source: Box::new(e),
            })
        })
        .collect()
}
