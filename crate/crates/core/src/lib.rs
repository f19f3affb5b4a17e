//! Noisy-correspondence-robust cross-modal retrieval: confidence division,
//! pseudo-label consistency refinement and staged pair optimization.

mod container;
pub mod data;
pub mod division;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod trainer;

pub use data::{PairDataset, SplitName, SplitSpec};
pub use division::{ConsistencyTracker, DivisionResult, GmmModel, ThresholdController};
pub use encoders::{ModelConfig, ModelParams};
pub use error::{PcsrError, Result};
pub use eval::{DivisionAudit, RetrievalReport};
pub use losses::LossWeights;
pub use numerics::{DenseMatrix, Rng};
pub use trainer::{EpochReport, TrainConfig, TrainRun, Variant};
