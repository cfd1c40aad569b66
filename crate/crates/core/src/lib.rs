//! Knowledge-tracing engine: ingest, prerequisite calibration, graph
//! embeddings, exercise relations, an attention predictor, training and
//! evaluation.

pub mod calibrate;
pub mod checkpoint;
pub mod embed;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod relation;
pub mod tape;
pub mod train;

pub use calibrate::{CalibrationConfig, CalibrationOutput};
pub use checkpoint::Checkpoint;
pub use embed::{GcnConfig, GcnGraph, GcnParams};
pub use error::{Error, Result};
pub use eval::synth::{SyntheticBenchmark, SyntheticConfig};
pub use eval::{EvalReport, PredictionSet};
pub use ingest::{HeterogeneousGraph, IdMap, Interaction, InteractionLog, KnowledgeLevelGraph, QMatrix};
pub use model::{ModelConfig, ModelParameters, SequenceBatch};
pub use relation::{CoefficientKind, ExerciseRelationMatrix, RelationConfig};
pub use train::{TrainConfig, TrainOutcome, TrainedModel};
