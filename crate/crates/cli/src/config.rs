//! Run configuration: one TOML document, overridable from flags.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use din_core::marketdata::{AssetClass, SynthConfig};
use din_core::tuning::TunerMethod;
use din_nn::{FeConfig, PsConfig, PsKind};
use din_train::{TrainConfig, TunerSettings};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Price CSV for `source = "csv"`.
    pub path: Option<PathBuf>,
    pub asset_class: AssetClass,
    pub vol_span: usize,
    pub winsorise: bool,
    pub winsorise_std: f64,
    pub winsorise_span: usize,
    /// Largest missing fraction over the first training set.
    pub max_missing: f64,
    pub synth: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            path: None,
            asset_class: AssetClass::Synthetic,
            vol_span: 60,
            winsorise: true,
            winsorise_std: 5.0,
            winsorise_span: 252,
            max_missing: 0.1,
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `FE:PS`, e.g. `OrigCIM:LSTM` or `FlexCIM:TFT`.
    pub variant: String,
    pub n_filters: usize,
    pub ts_filter_length: usize,
    pub n_filter_layers: usize,
    pub n_axial_heads: usize,
    pub hidden_layer_size: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: "OrigCIM:LSTM".into(),
            n_filters: 8,
            ts_filter_length: 20,
            n_filter_layers: 2,
            n_axial_heads: 2,
            hidden_layer_size: 32,
            dropout_rate: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn build(&self) -> Result<(FeConfig, PsConfig)> {
        let (fe, ps) = self
            .variant
            .split_once(':')
            .ok_or_else(|| CliError::Config(format!("variant '{}' is not FE:PS", self.variant)))?;
        let n_filters = self.n_filters;
        let fe = match fe.trim().to_ascii_lowercase().as_str() {
            "origcim" => FeConfig::OrigCim {
                n_filters,
                ts_filter_length: self.ts_filter_length,
            },
            "flexcim" => FeConfig::FlexCim {
                n_filters,
                n_filter_layers: self.n_filter_layers,
            },
            "deeplob" => FeConfig::DeepLob { n_filters },
            "axiallob" => FeConfig::AxialLob {
                n_filters,
                n_axial_heads: self.n_axial_heads,
            },
            other => return Err(CliError::Config(format!("unknown feature extractor '{other}'"))),
        };
        let ps = match ps.trim().to_ascii_lowercase().as_str() {
            "lstm" => PsConfig::lstm(self.hidden_layer_size, self.dropout_rate),
            "tft" => PsConfig::tft(self.hidden_layer_size, self.dropout_rate),
            other => return Err(CliError::Config(format!("unknown position sizer '{other}'"))),
        };
        Ok((fe, ps))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub c_bps: f64,
    pub k: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub sequence_length: usize,
    /// Defaults to the date two thirds of the way through the panel.
    pub first_test_start: Option<NaiveDate>,
    pub step_years: u32,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            c_bps: 0.0,
            k: 0.0,
            max_epochs: 250,
            patience: 25,
            sequence_length: 100,
            first_test_start: None,
            step_years: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TunerKind {
    None,
    Hb,
    Bo,
    Rs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TunerConfig {
    pub method: TunerKind,
    pub per_split: bool,
}

impl Default for TunerConfig {
    fn default() -> Self {
        Self {
            method: TunerKind::None,
            per_split: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Cost grid in bps; the first entry is the headline cost.
    pub costs: Vec<f64>,
    pub sigma_tgt: f64,
    pub rolling_window: usize,
    pub benchmarks: bool,
    pub include_lm: bool,
    pub lm_trials: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            costs: vec![0.0, 0.5, 1.0, 2.0, 5.0],
            sigma_tgt: 0.15,
            rolling_window: 252,
            benchmarks: true,
            include_lm: false,
            lm_trials: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of all randomness: ensemble seeds, tuner and synthetic data.
    pub seed: u64,
    pub n_seeds: usize,
    /// Output base directory; not part of the run identity.
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub tuner: TunerConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_seeds: 5,
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            tuner: TunerConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub costs: Option<Vec<f64>>,
    pub variant: Option<String>,
}

pub fn parse_costs(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Config(format!("bad cost '{c}' in --costs")))
        })
        .collect()
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(CliError::config)
    }

    /// Reads `path`, or defaults when `None`, then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(costs) = &overrides.costs {
            cfg.evaluation.costs = costs.clone();
        }
        if let Some(v) = &overrides.variant {
            cfg.model.variant = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        if self.n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be positive".into()));
        }
        if self.evaluation.costs.is_empty() || self.evaluation.costs.iter().any(|c| !(*c >= 0.0)) {
            return Err(CliError::Config("costs must be a non-empty list of values >= 0".into()));
        }
        if !(self.evaluation.sigma_tgt > 0.0) {
            return Err(CliError::Config("sigma_tgt must be positive".into()));
        }
        if self.evaluation.rolling_window < 2 {
            return Err(CliError::Config("rolling_window must be >= 2".into()));
        }
        if self.data.source == DataSource::Csv && self.data.path.is_none() {
            return Err(CliError::Config("data.source = \"csv\" needs data.path".into()));
        }
        if self.data.source == DataSource::Synth {
            self.data.synth.validate().map_err(CliError::config)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical (sorted-key) JSON form, without `out`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        if let Some(map) = v.as_object_mut() {
            map.remove("out");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let (fe, ps) = self.model.build()?;
        let t = &self.training;
        Ok(TrainConfig {
            learning_rate: t.learning_rate,
            c_bps: t.c_bps,
            k: t.k,
            max_epochs: t.max_epochs,
            patience: t.patience,
            sequence_length: t.sequence_length,
            seed: self.seed,
            ..TrainConfig::new(fe, ps)
        })
    }

    /// Ensemble member seeds derived from the root seed.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64).map(|i| self.seed.wrapping_mul(1000).wrapping_add(i)).collect()
    }

    pub fn tuner_settings(&self) -> Option<TunerSettings> {
        let method = match self.tuner.method {
            TunerKind::None => return None,
            TunerKind::Hb => TunerMethod::hyperband(),
            TunerKind::Bo => TunerMethod::bayesian(),
            TunerKind::Rs => TunerMethod::random(),
        };
        Some(TunerSettings {
            method,
            space: None,
            per_split: self.tuner.per_split,
            seed: self.seed,
        })
    }

    /// Synthetic panel settings with the root seed folded in.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.data.synth.seed.wrapping_add(self.seed),
            asset_class: self.data.asset_class,
            ..self.data.synth.clone()
        }
    }

    pub fn ps_kind(&self) -> Result<PsKind> {
        Ok(self.model.build()?.1.kind)
    }
}
