//! Neural components of deep inception networks: a reverse-mode tape, feature
//! extractors, position sizers and the combined model.

pub mod checkpoint;
pub mod complexity;
pub mod error;
pub mod fe;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod ps;

pub use error::{NnError, Result};
pub use fe::{FeConfig, FeatureExtractor};
pub use graph::{Graph, Tensor, Var};
pub use model::{batch_loss, BatchTensors, DinConfig, DinModel, Inference};
pub use params::{Adam, ParamSet};
pub use ps::{AttentionMode, PositionSizer, PsConfig, PsKind};
