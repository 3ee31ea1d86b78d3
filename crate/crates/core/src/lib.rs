//! Attention-based multiple-instance learning over whole-slide patch embeddings.
//!
//! Slides are cut into tiles, tiles are embedded into fixed-length vectors, and
//! each slide becomes a bag of embeddings. A gated-attention network pools each
//! bag into a slide-level classification or regression output.

pub mod evaluate;
pub mod metrics;
pub mod mil;
pub mod rng;
pub mod store;
pub mod synthetic;
pub mod tiler;
pub mod train;
pub mod viz;

pub use evaluate::{evaluate, EvalError, EvalReport, SlidePrediction};
pub use metrics::{auroc, ClassificationSummary, RegressionStats};
pub use mil::{AttentionMap, MilClassifier, MilModel, MilRegressor, ModelDims, ModelError};
pub use store::{DatasetManifest, EmbeddingBag, LabelSet, Split, StoreError, TileCoord};
pub use train::{train, LossKind, Task, TrainConfig, TrainError, TrainOutcome};
