//! Stage wiring: calibrate → embed → relation → train → eval.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::calibrate::{calibrate_all, CalibrationConfig, CalibrationOutput};
use crate::embed::{cosine_matrix, gcn_forward, initial_features, EmbeddingSet, GcnConfig, GcnGraph, GcnParams};
use crate::error::Result;
use crate::eval::PredictionSet;
use crate::ingest::{build_heterogeneous_graph, HeterogeneousGraph, InteractionLog, KnowledgeLevelGraph, QMatrix};
use crate::model::{ModelConfig, ModelParameters};
use crate::relation::{ExerciseRelationMatrix, RelationConfig, RelationInputs};
use crate::train::{
    chronological_split, gcn_tensors, predict_role, segment_log, training_portion, JointRelation, RelationSource, Role,
    ScoredSegment, Tensors, TrainConfig, TrainOutcome, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub calibration: CalibrationConfig,
    pub gcn: GcnConfig,
    pub relation: RelationConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Train the GCN jointly, recomputing `A` every step.
    pub joint_gcn: bool,
    /// Seed of the predictor initialization.
    pub init_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            calibration: CalibrationConfig::default(),
            gcn: GcnConfig::default(),
            relation: RelationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            joint_gcn: true,
            init_seed: 11,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        self.gcn.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

/// Output of the calibration stage, computed on the training portion.
#[derive(Debug, Clone)]
pub struct CalibrationStage {
    pub roles: Vec<Vec<Role>>,
    pub train_log: InteractionLog,
    pub het: HeterogeneousGraph,
    pub output: CalibrationOutput,
}

pub fn stage_calibrate(
    log: &InteractionLog,
    q: &QMatrix,
    levels: &KnowledgeLevelGraph,
    config: &PipelineConfig,
) -> Result<CalibrationStage> {
    let roles = chronological_split(log, config.train.train_fraction, config.train.validation_fraction);
    let train_log = training_portion(log, &roles);
    let het = build_heterogeneous_graph(&train_log, q)?;
    let output = calibrate_all(levels, &het, q, &config.calibration)?;
    Ok(CalibrationStage { roles, train_log, het, output })
}

#[derive(Debug, Clone)]
pub struct EmbedStage {
    pub graph: GcnGraph,
    pub features: Array2<f64>,
    pub params: GcnParams,
    pub embeddings: EmbeddingSet,
    pub similarity: Array2<f64>,
}

pub fn stage_embed(cal: &CalibrationStage, config: &PipelineConfig) -> Result<EmbedStage> {
    let graph = GcnGraph::build(&cal.het, &cal.output.s_hat, &cal.output.q_hat, config.gcn.normalize)?;
    let features = initial_features(&cal.het);
    let params = GcnParams::init(features.ncols(), &config.gcn);
    let embeddings = gcn_forward(&graph, &features, &params)?;
    let similarity = cosine_matrix(&embeddings.exercise);
    Ok(EmbedStage { graph, features, params, embeddings, similarity })
}

#[derive(Debug, Clone)]
pub struct RelationStage {
    pub inputs: RelationInputs,
    pub matrix: ExerciseRelationMatrix,
}

pub fn stage_relation(cal: &CalibrationStage, embed: &EmbedStage, config: &PipelineConfig) -> Result<RelationStage> {
    let inputs = RelationInputs::build(&cal.train_log, config.relation.kind);
    let matrix = ExerciseRelationMatrix::build(&embed.similarity, &inputs, &config.relation)?;
    Ok(RelationStage { inputs, matrix })
}

pub struct TrainStage {
    pub segments: Vec<ScoredSegment>,
    pub outcome: TrainOutcome,
}

pub fn stage_train(
    log: &InteractionLog,
    cal: &CalibrationStage,
    embed: &EmbedStage,
    rel: &RelationStage,
    config: &PipelineConfig,
) -> Result<TrainStage> {
    let segments = segment_log(log, &cal.roles, config.model.max_seq);
    let mut initial: Tensors = ModelParameters::init(&config.model, log.n_exercises(), config.init_seed).tensors;
    let source = if config.joint_gcn {
        initial.extend(gcn_tensors(&embed.params));
        RelationSource::Joint(JointRelation {
            graph: embed.graph.clone(),
            features: embed.features.clone(),
            inputs: rel.inputs.clone(),
            config: config.relation,
        })
    } else {
        RelationSource::Fixed(rel.matrix.values.clone())
    };
    let mut outcome = crate::train::train(&segments, &source, initial, &config.model, &config.train)?;
    outcome.checkpoint.config = serde_json::to_value(config)?;
    Ok(TrainStage { segments, outcome })
}

/// Eval-mode predictions for the `role` positions, in consecutive
/// batches of `batch_size` (the evaluation default is [`crate::eval::DEFAULT_BATCH`]).
pub fn predictions(
    model: &TrainedModel,
    segments: &[ScoredSegment],
    role: Role,
    batch_size: usize,
) -> Result<PredictionSet> {
    let (scores, labels) = predict_role(segments, role, &model.relation, &model.params, &model.config)?;
    PredictionSet::from_scores(&scores, &labels, batch_size)
}
