//! Attention and variable-selection importance series, smoothed with
//! exponentially-weighted statistics.

use std::io::Write;
use std::ops::Range;

use chrono::NaiveDate;
use din_core::stats::EwStats;
use din_core::windows::ModelInputs;
use din_nn::fe::{FLEX_CS_WIDTH, FLEX_TS_LENGTH};
use din_nn::{AttentionMode, DinModel, FeConfig, PsKind};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::predict::predict_model;

pub const SMOOTHING_SPAN: usize = 63;
pub const CI_Z: f64 = 1.96;

/// Per-date weights over `J` labelled columns with EW smoothing bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSeries {
    pub dates: Vec<NaiveDate>,
    pub labels: Vec<String>,
    pub raw: Array2<f64>,
    pub smoothed: Array2<f64>,
    pub ci_low: Array2<f64>,
    pub ci_high: Array2<f64>,
    pub span: usize,
    /// Set for weights that mix several inputs and read only coarsely.
    pub condensed: bool,
}

impl ImportanceSeries {
    pub fn new(dates: Vec<NaiveDate>, labels: Vec<String>, raw: Array2<f64>, span: usize) -> Result<Self> {
        if raw.dim() != (dates.len(), labels.len()) {
            return Err(TrainError::Config(format!(
                "importance matrix {:?} does not match {} dates x {} labels",
                raw.dim(),
                dates.len(),
                labels.len()
            )));
        }
        let mut smoothed = Array2::zeros(raw.dim());
        let mut ci_low = Array2::zeros(raw.dim());
        let mut ci_high = Array2::zeros(raw.dim());
        for j in 0..labels.len() {
            let mut ew = EwStats::new(span);
            for t in 0..dates.len() {
                ew.update(raw[[t, j]]);
                let (m, s) = (ew.mean(), ew.std());
                smoothed[[t, j]] = m;
                ci_low[[t, j]] = m - CI_Z * s;
                ci_high[[t, j]] = m + CI_Z * s;
            }
        }
        Ok(Self {
            dates,
            labels,
            raw,
            smoothed,
            ci_low,
            ci_high,
            span,
            condensed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Largest `|Σ_j raw[t, j] − 1|` over all dates.
    pub fn max_row_sum_error(&self) -> f64 {
        self.raw
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Mean raw weight of each column.
    pub fn mean_importance(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        self.raw.columns().into_iter().map(|c| c.sum() / n).collect()
    }

    /// The `k` columns with the highest mean weight, best first.
    pub fn top_k(&self, k: usize) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.labels.iter().cloned().zip(self.mean_importance()).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v.truncate(k);
        v
    }

    /// Joins series over consecutive date ranges and re-smooths.
    pub fn concat(parts: &[ImportanceSeries]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TrainError::Config("no importance series".into()))?;
        let mut dates = Vec::new();
        let mut views = Vec::new();
        for p in parts {
            if p.labels != first.labels {
                return Err(TrainError::Config("importance series have different labels".into()));
            }
            if let (Some(a), Some(b)) = (dates.last(), p.dates.first()) {
                if b <= a {
                    return Err(TrainError::Overlap(format!("{b} follows {a}")));
                }
            }
            dates.extend_from_slice(&p.dates);
            views.push(p.raw.view());
        }
        let raw = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| TrainError::Config(e.to_string()))?;
        let mut out = Self::new(dates, first.labels.clone(), raw, first.span)?;
        out.condensed = first.condensed;
        Ok(out)
    }

    /// Long-format CSV: `date,label,raw,smoothed,ci_low,ci_high`.
    pub fn write_csv<W: Write>(&self, mut out: W, config_hash: &str) -> Result<()> {
        writeln!(out, "# config_hash={config_hash}")?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "label", "raw", "smoothed", "ci_low", "ci_high"])?;
        for (t, d) in self.dates.iter().enumerate() {
            for (j, label) in self.labels.iter().enumerate() {
                w.write_record([
                    d.to_string(),
                    label.clone(),
                    self.raw[[t, j]].to_string(),
                    self.smoothed[[t, j]].to_string(),
                    self.ci_low[[t, j]].to_string(),
                    self.ci_high[[t, j]].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Column labels of a last-row attention distribution, oldest lag first.
pub fn lag_labels(sequence_length: usize) -> Vec<String> {
    (0..sequence_length).rev().map(|l| format!("lag {l}")).collect()
}

/// FlexCIM feature types annotated with their receptive fields in days and
/// assets, capped at the universe size.
pub fn flexcim_labels(n_filter_layers: usize, n_assets: usize) -> Vec<String> {
    let (dt, da) = (FLEX_TS_LENGTH - 1, FLEX_CS_WIDTH - 1);
    let field = |days: usize, assets: usize| {
        let assets = assets.min(n_assets);
        let unit = if assets == 1 { "asset" } else { "assets" };
        format!("receptive field {days}d x {assets} {unit}")
    };
    let mut out = vec![format!("passthrough, {}", field(1, 1))];
    for l in 1..=n_filter_layers {
        let (t0, a0) = (1 + dt * (l - 1), 1 + da * (l - 1));
        out.push(format!("CS depth-{l}, {}", field(t0, a0 + da)));
        out.push(format!("TS depth-{l}, {}", field(t0 + dt, a0)));
        out.push(format!("combined depth-{l}, {}", field(t0 + dt, a0 + da)));
    }
    out
}

/// Last-row, head-averaged attention of a TFT position sizer for every
/// prediction row.
pub fn extract_attention(
    model: &DinModel,
    inputs: &ModelInputs,
    assets: &[String],
    rows: Range<usize>,
    sequence_length: usize,
) -> Result<ImportanceSeries> {
    if model.config.ps.kind != PsKind::Tft {
        return Err(TrainError::Unsupported(format!(
            "attention needs a TFT position sizer, model is {}",
            model.config.label()
        )));
    }
    let p = predict_model(model, inputs, assets, rows, sequence_length, AttentionMode::Learned)?;
    let raw = p.attention.expect("TFT emits attention");
    ImportanceSeries::new(p.weights.dates, lag_labels(sequence_length), raw, SMOOTHING_SPAN)
}

/// FlexCIM feature-type selection weights for every prediction row.
pub fn extract_vsn(
    model: &DinModel,
    inputs: &ModelInputs,
    assets: &[String],
    rows: Range<usize>,
    sequence_length: usize,
) -> Result<ImportanceSeries> {
    let FeConfig::FlexCim { n_filter_layers, .. } = model.config.fe else {
        return Err(TrainError::Unsupported(format!(
            "feature-type weights need a FlexCIM extractor, model is {}",
            model.config.label()
        )));
    };
    let p = predict_model(model, inputs, assets, rows, sequence_length, AttentionMode::Learned)?;
    let raw = p.fe_vsn.expect("FlexCIM emits selection weights");
    let labels = flexcim_labels(n_filter_layers, model.config.n_assets);
    ImportanceSeries::new(p.weights.dates, labels, raw, SMOOTHING_SPAN)
}

/// Input selection weights inside a TFT position sizer: extracted features
/// against calendar features.
pub fn extract_ps_vsn(
    model: &DinModel,
    inputs: &ModelInputs,
    assets: &[String],
    rows: Range<usize>,
    sequence_length: usize,
) -> Result<ImportanceSeries> {
    if model.config.ps.kind != PsKind::Tft {
        return Err(TrainError::Unsupported("input selection weights need a TFT position sizer".into()));
    }
    let p = predict_model(model, inputs, assets, rows, sequence_length, AttentionMode::Learned)?;
    let raw = p.ps_vsn.expect("TFT emits selection weights");
    let labels = vec!["extracted features".to_string(), "calendar".to_string()];
    let mut s = ImportanceSeries::new(p.weights.dates, labels, raw, SMOOTHING_SPAN)?;
    s.condensed = true;
    Ok(s)
}
