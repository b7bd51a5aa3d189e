use din_core::objective::{CostModel, BPS};
use din_core::windows::{ModelBatch, N_DATE_FEATURES};
use ndarray::{Array3, Axis, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::fe::{FeConfig, FeatureExtractor};
use crate::graph::{Graph, Tensor, Var};
use crate::params::{Builder, ParamSet};
use crate::ps::{AttentionMode, PositionSizer, PsConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DinConfig {
    pub fe: FeConfig,
    pub ps: PsConfig,
    pub n_assets: usize,
    #[serde(default = "one")]
    pub n_static: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl DinConfig {
    pub fn label(&self) -> String {
        format!("{}-{}", self.fe.label(), self.ps.kind.label())
    }
}

/// Feature extractor followed by a position sizer, with its parameters.
#[derive(Debug, Clone)]
pub struct DinModel {
    pub config: DinConfig,
    pub params: ParamSet,
    pub fe: FeatureExtractor,
    pub ps: PositionSizer,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[B, T, N_A]` in [−1, 1].
    pub weights: Var,
    pub fe_vsn: Option<Var>,
    pub fe_time_attention: Option<Var>,
    pub attention: Option<Var>,
    pub ps_vsn: Option<Var>,
}

/// Stacked model inputs for a set of equal-length windows.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    pub x: Tensor,
    pub y1: Tensor,
    pub y2: Tensor,
    pub dates: Tensor,
    pub static_ids: Vec<usize>,
    /// Flat `b·T + t` indices of scored rows.
    pub scored: Vec<usize>,
}

impl BatchTensors {
    pub fn from_batches(batches: &[&ModelBatch]) -> Result<Self> {
        let first = batches.first().ok_or_else(|| NnError::Shape("no windows".into()))?;
        let (t, a) = first.x.dim();
        let b = batches.len();
        if batches.iter().any(|w| w.x.dim() != (t, a)) {
            return Err(NnError::Shape("windows differ in shape".into()));
        }
        let stack = |f: &dyn Fn(&ModelBatch) -> &ndarray::Array2<f64>, c: usize| {
            let mut out = Array3::<f64>::zeros((b, t, c));
            for (i, w) in batches.iter().enumerate() {
                out.index_axis_mut(Axis(0), i).assign(f(w));
            }
            out.into_dyn()
        };
        let scored = batches
            .iter()
            .enumerate()
            .flat_map(|(i, w)| (w.first_scored..t).map(move |r| i * t + r))
            .collect();
        Ok(Self {
            x: stack(&|w| &w.x, a),
            y1: stack(&|w| &w.y1, a),
            y2: stack(&|w| &w.y2, a),
            dates: stack(&|w| &w.date_features, N_DATE_FEATURES),
            static_ids: batches.iter().map(|w| w.static_context).collect(),
            scored,
        })
    }

    pub fn len(&self) -> usize {
        self.static_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.static_ids.is_empty()
    }

    /// Long-only benchmark return of every scored row.
    pub fn benchmark(&self) -> Vec<f64> {
        let s = self.y1.shape();
        let (t, a) = (s[1], s[2]);
        self.scored
            .iter()
            .map(|&k| {
                let (b, r) = (k / t, k % t);
                (0..a).map(|i| self.y1[[b, r, i]]).sum::<f64>() / a as f64
            })
            .collect()
    }
}

/// Model outputs as plain arrays.
#[derive(Debug, Clone)]
pub struct Inference {
    pub weights: Tensor,
    pub fe_vsn: Option<Tensor>,
    pub attention: Option<Tensor>,
    pub ps_vsn: Option<Tensor>,
}

impl DinModel {
    pub fn new(config: DinConfig) -> Result<Self> {
        if config.n_assets == 0 {
            return Err(NnError::Config("n_assets must be positive".into()));
        }
        let mut b = Builder::new(config.seed);
        let fe = FeatureExtractor::new(&mut b, &config.fe, config.n_assets)?;
        let ps = PositionSizer::new(&mut b, &config.ps, config.n_assets, N_DATE_FEATURES, config.n_static)?;
        Ok(Self {
            config,
            params: b.finish(),
            fe,
            ps,
        })
    }

    /// Exact number of trainable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.n_scalars()
    }

    pub fn feature_type_labels(&self) -> Vec<String> {
        self.config.fe.feature_type_labels()
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dates: Var, ids: &[usize], mode: AttentionMode) -> Result<ForwardOutput> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.config.n_assets {
            return Err(NnError::Shape(format!(
                "model expects [B, T, {}] inputs, got {s:?}",
                self.config.n_assets
            )));
        }
        let fe = self.fe.forward(g, x)?;
        let ps = self.ps.forward(g, fe.features, dates, ids, mode)?;
        Ok(ForwardOutput {
            weights: ps.weights,
            fe_vsn: fe.vsn,
            fe_time_attention: fe.time_attention,
            attention: ps.attention,
            ps_vsn: ps.vsn,
        })
    }

    /// Deterministic forward pass without dropout.
    pub fn infer(&self, batch: &BatchTensors, mode: AttentionMode) -> Result<Inference> {
        let mut g = Graph::new(&self.params);
        let x = g.constant(batch.x.clone());
        let d = g.constant(batch.dates.clone());
        let out = self.forward(&mut g, x, d, &batch.static_ids, mode)?;
        let get = |v: Option<Var>| v.map(|v| g.value(v).clone());
        Ok(Inference {
            weights: g.value(out.weights).clone(),
            fe_vsn: get(out.fe_vsn),
            attention: get(out.attention),
            ps_vsn: get(out.ps_vsn),
        })
    }
}

/// Per-row portfolio returns `(1/N) Σ_i [w·Y1 − C·|w·Y2 − w_prev·Y2_prev|]`
/// for the scored rows. The first row of each window carries no cost term.
pub fn portfolio_series(g: &mut Graph, w: Var, batch: &BatchTensors, c_bps: f64) -> Var {
    let s = g.shape(w);
    let (bsz, t, a) = (s[0], s[1], s[2]);
    let y1 = g.constant(batch.y1.clone());
    let mut net = g.mul(w, y1);
    if c_bps > 0.0 && t > 1 {
        let y2 = g.constant(batch.y2.clone());
        let pos = g.mul(w, y2);
        let cur = g.narrow(pos, 1, 1, t - 1);
        let prev = g.narrow(pos, 1, 0, t - 1);
        let diff = g.sub(cur, prev);
        let turnover = g.abs(diff);
        let cost = g.scale(turnover, c_bps * BPS);
        let zero = g.constant(Tensor::zeros(IxDyn(&[bsz, 1, a])));
        let cost = g.concat(&[zero, cost], 1);
        net = g.sub(net, cost);
    }
    let r = g.mean_axis(net, 2);
    g.gather(r, batch.scored.clone())
}

/// Sharpe loss with turnover cost `C` and correlation penalty `K`.
pub fn batch_loss(g: &mut Graph, w: Var, batch: &BatchTensors, cost: CostModel) -> Result<Var> {
    let r = portfolio_series(g, w, batch, cost.c_bps);
    let rb = if cost.k > 0.0 { batch.benchmark() } else { Vec::new() };
    g.sharpe_loss(r, &rb, cost.k)
}
