//! Training, walk-forward backtesting and interpretability for deep
//! inception networks.

pub mod config;
pub mod error;
pub mod interpret;
pub mod plot;
pub mod predict;
pub mod store;
pub mod trainer;
pub mod walkforward;

pub use config::{search_space, TrainConfig};
pub use error::{Result, TrainError};
pub use interpret::{extract_attention, extract_ps_vsn, extract_vsn, ImportanceSeries};
pub use predict::{predict_ensemble, predict_model, Prediction};
pub use store::RunStore;
pub use trainer::{train_ensemble, train_model, EarlyStopping, EpochRecord, TrainData, TrainedModel};
pub use walkforward::{
    concat_results, split_data, test_rows, tune_config, walk_forward, Dataset, LeakageAudit, SplitOutput,
    SplitRecord, TunerSettings, WalkForwardConfig, WalkForwardOutput,
};
