//! Concept-disentangled cross-modal text-video retrieval on pre-extracted
//! feature banks.

pub mod ablation;
pub mod databank;
pub mod error;
pub mod inference;
pub mod losses;
pub mod model;
pub mod numkernel;
pub mod synth;
pub mod trainer;

pub use databank::{load_bank, BatchIndex, BatchSchedule, FeatureBank, SampleMode};
pub use error::{Error, Result};
pub use inference::{evaluate, RetrievalMetrics, SimilarityMatrix, Strategy, StrategyParams};
pub use model::{ModelParams, Stream, TagUsage, Temperatures};
pub use numkernel::Matrix;
pub use synth::{generate_planted_bank, SynthConfig};
