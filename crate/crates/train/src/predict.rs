//! Rolling-window inference: one forward pass per prediction date, keeping
//! the window's last row.

use std::ops::Range;

use din_core::objective::{ensemble_weights, WeightsMatrix};
use din_core::windows::{build_batches, ModelInputs, SequencingPolicy, Stride};
use din_nn::{AttentionMode, BatchTensors, DinModel, Tensor};
use ndarray::{s, Array2};

use crate::error::{Result, TrainError};

/// Windows per forward pass.
pub const INFERENCE_CHUNK: usize = 64;

/// Last-row outputs for consecutive prediction rows.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub weights: WeightsMatrix,
    /// Head-averaged attention of the last query row, `[rows, T]`.
    pub attention: Option<Array2<f64>>,
    /// Feature-extractor type weights, `[rows, N_T]`.
    pub fe_vsn: Option<Array2<f64>>,
    /// Position-sizer input selection weights, `[rows, 2]`.
    pub ps_vsn: Option<Array2<f64>>,
}

fn last_rows(t: &Tensor) -> Array2<f64> {
    let s = t.shape();
    t.slice(s![.., s[1] - 1, ..]).to_owned()
}

fn push_rows(acc: &mut Option<Vec<Array2<f64>>>, part: Option<&Tensor>) {
    match (acc.as_mut(), part) {
        (Some(v), Some(t)) => v.push(last_rows(t)),
        (None, Some(t)) => *acc = Some(vec![last_rows(t)]),
        _ => {}
    }
}

fn stack(parts: Option<Vec<Array2<f64>>>) -> Option<Array2<f64>> {
    parts.map(|v| {
        let views: Vec<_> = v.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("consistent widths")
    })
}

/// Predicts `rows` with stride 1.
pub fn predict_model(
    model: &DinModel,
    inputs: &ModelInputs,
    assets: &[String],
    rows: Range<usize>,
    sequence_length: usize,
    mode: AttentionMode,
) -> Result<Prediction> {
    if assets.len() != model.config.n_assets {
        return Err(TrainError::Config(format!(
            "model trades {} assets, panel has {}",
            model.config.n_assets,
            assets.len()
        )));
    }
    let policy = SequencingPolicy {
        sequence_length,
        batch_size: sequence_length,
        shuffle: false,
    };
    let (mut w, mut att, mut fe, mut ps) = (Vec::new(), None, None, None);
    let mut start = rows.start;
    while start < rows.end {
        let end = (start + INFERENCE_CHUNK).min(rows.end);
        let windows = build_batches(inputs, start..end, policy, Stride::Rolling)?;
        let bt = BatchTensors::from_batches(&windows.iter().collect::<Vec<_>>())?;
        let out = model.infer(&bt, mode)?;
        w.push(last_rows(&out.weights));
        push_rows(&mut att, out.attention.as_ref());
        push_rows(&mut fe, out.fe_vsn.as_ref());
        push_rows(&mut ps, out.ps_vsn.as_ref());
        start = end;
    }
    let values = stack(Some(w)).expect("weights present");
    Ok(Prediction {
        weights: WeightsMatrix::new(inputs.dates[rows].to_vec(), assets.to_vec(), values)?,
        attention: stack(att),
        fe_vsn: stack(fe),
        ps_vsn: stack(ps),
    })
}

/// Mean of the members' weights over `rows`.
pub fn predict_ensemble(
    members: &[&DinModel],
    inputs: &ModelInputs,
    assets: &[String],
    rows: Range<usize>,
    sequence_length: usize,
) -> Result<WeightsMatrix> {
    if members.is_empty() {
        return Err(TrainError::Config("empty ensemble".into()));
    }
    let weights = members
        .iter()
        .map(|m| {
            predict_model(m, inputs, assets, rows.clone(), sequence_length, AttentionMode::Learned).map(|p| p.weights)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ensemble_weights(&weights)?)
}
