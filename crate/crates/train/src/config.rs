use din_core::tuning::{SearchSpace, Trial};
use din_nn::{FeConfig, PsConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

pub const DEFAULT_MAX_EPOCHS: usize = 250;
pub const DEFAULT_PATIENCE: usize = 25;
pub const DEFAULT_SEQUENCE_LENGTH: usize = 100;

/// Everything needed to train one DIN from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub fe: FeConfig,
    pub ps: PsConfig,
    pub learning_rate: f64,
    /// Training cost coefficient in basis points.
    pub c_bps: f64,
    /// Training correlation penalty.
    pub k: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub sequence_length: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(fe: FeConfig, ps: PsConfig) -> Self {
        Self {
            fe,
            ps,
            learning_rate: 1e-3,
            c_bps: 0.0,
            k: 0.0,
            max_epochs: DEFAULT_MAX_EPOCHS,
            patience: DEFAULT_PATIENCE,
            sequence_length: DEFAULT_SEQUENCE_LENGTH,
            seed: 0,
        }
    }

    pub fn dropout_rate(&self) -> f64 {
        self.ps.dropout_rate
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.fe.label(), self.ps.kind.label())
    }

    pub fn validate(&self) -> Result<()> {
        self.fe.validate()?;
        self.ps.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.c_bps >= 0.0 && self.k >= 0.0) {
            return bad("C and K must be non-negative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive");
        }
        if self.sequence_length < 2 {
            return bad("sequence_length must be at least 2");
        }
        Ok(())
    }

    /// Copy with the trial's values applied. Unknown keys are rejected.
    pub fn apply_trial(&self, trial: &Trial) -> Result<Self> {
        let mut out = *self;
        for (key, &v) in trial {
            let n = v.round() as usize;
            match (key.as_str(), &mut out.fe) {
                ("learning_rate", _) => out.learning_rate = v,
                ("dropout_rate", _) => out.ps.dropout_rate = v,
                ("hidden_layer_size", _) => out.ps.hidden_layer_size = n,
                ("n_filters", FeConfig::OrigCim { n_filters, .. })
                | ("n_filters", FeConfig::FlexCim { n_filters, .. })
                | ("n_filters", FeConfig::DeepLob { n_filters })
                | ("n_filters", FeConfig::AxialLob { n_filters, .. }) => *n_filters = n,
                ("ts_filter_length", FeConfig::OrigCim { ts_filter_length, .. }) => *ts_filter_length = n,
                ("n_filter_layers", FeConfig::FlexCim { n_filter_layers, .. }) => *n_filter_layers = n,
                ("n_axial_heads", FeConfig::AxialLob { n_axial_heads, .. }) => *n_axial_heads = n,
                (other, _) => {
                    return Err(TrainError::Config(format!(
                        "parameter '{other}' does not apply to {}",
                        self.label()
                    )))
                }
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// Published search grid for a FE/PS pairing.
pub fn search_space(fe: &FeConfig) -> SearchSpace {
    let space = SearchSpace::new()
        .with("learning_rate", &[1e-3, 1e-4, 1e-5])
        .with("dropout_rate", &[0.1, 0.2, 0.3]);
    match fe {
        FeConfig::OrigCim { .. } => space
            .with("hidden_layer_size", &[32.0, 64.0, 96.0, 128.0])
            .with("n_filters", &[16.0, 32.0, 48.0, 64.0])
            .with("ts_filter_length", &[1.0, 3.0, 5.0, 10.0, 20.0]),
        FeConfig::FlexCim { .. } => space
            .with("hidden_layer_size", &[32.0, 64.0, 96.0, 128.0])
            .with("n_filters", &[4.0, 8.0, 12.0, 16.0])
            .with("n_filter_layers", &[1.0, 3.0, 5.0, 7.0, 9.0]),
        FeConfig::DeepLob { .. } => space
            .with("hidden_layer_size", &[32.0, 64.0, 96.0, 128.0])
            .with("n_filters", &[16.0, 32.0, 48.0, 64.0]),
        FeConfig::AxialLob { .. } => space
            .with("hidden_layer_size", &[16.0, 32.0, 48.0, 64.0])
            .with("n_filters", &[8.0, 16.0, 24.0])
            .with("n_axial_heads", &[1.0, 2.0, 4.0]),
    }
}

/// Grid values for the training cost coefficient (bps).
pub const C_GRID: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];
/// Grid values for the correlation penalty.
pub const K_GRID: [f64; 4] = [0.0, 1.0, 2.0, 5.0];
