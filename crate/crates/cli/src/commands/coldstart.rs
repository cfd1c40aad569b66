use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use ngfkt_core::eval::{cold_start_lengths, cold_start_students, PredictionSet};
use ngfkt_core::pipeline::{predictions, stage_calibrate, stage_embed, stage_relation, stage_train, PipelineConfig};
use ngfkt_core::train::{chronological_split, segment_log, training_portion, Role, ScoredSegment, TrainedModel};
use ngfkt_core::InteractionLog;

use super::Dataset;
use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentResult {
    pub fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub auc: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthResult {
    pub lo: usize,
    pub hi: usize,
    pub n_train: usize,
    pub auc: Option<f64>,
    pub acc: Option<f64>,
    /// Why the bucket was not run.
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub students: Vec<StudentResult>,
    pub lengths: Vec<LengthResult>,
}

/// Trains on `train_log` (all of it fit or validation) and returns the model.
fn fit(ds: &Dataset, train_log: &InteractionLog, config: &PipelineConfig) -> Result<TrainedModel> {
    let config = PipelineConfig { train: ngfkt_core::TrainConfig { train_fraction: 1.0, ..config.train }, ..*config };
    let cal = stage_calibrate(train_log, &ds.q, &ds.levels, &config)?;
    let emb = stage_embed(&cal, &config)?;
    let rel = stage_relation(&cal, &emb, &config)?;
    let tr = stage_train(train_log, &cal, &emb, &rel, &config)?;
    Ok(TrainedModel::from_checkpoint(&tr.outcome.checkpoint)?)
}

fn score(model: &TrainedModel, segments: &[ScoredSegment], batch: usize, threshold: f64) -> Result<(f64, f64)> {
    let preds: PredictionSet = predictions(model, segments, Role::Test, batch)?;
    Ok((preds.auc()?, preds.acc(threshold)?))
}

pub fn cold_start_report(cfg: &RunConfig, ds: &Dataset) -> Result<ColdStartReport> {
    let pipeline = cfg.pipeline();
    let mut students = Vec::new();
    for split in cold_start_students(&ds.log, &cfg.coldstart.fractions, cfg.seed)? {
        log::info!("student cold start: fraction {} ({} students)", split.fraction, split.train.len());
        let model = fit(ds, &ds.log.subset_students(&split.train), &pipeline)
            .with_context(|| format!("training on fraction {}", split.fraction))?;
        let test_log = ds.log.subset_students(&split.test);
        let roles: Vec<Vec<Role>> = test_log.sequences.iter().map(|s| vec![Role::Test; s.len()]).collect();
        let segments = segment_log(&test_log, &roles, model.config.max_seq);
        let (auc, acc) = score(&model, &segments, cfg.eval.batch_size, cfg.eval.threshold)?;
        students.push(StudentResult {
            fraction: split.fraction,
            n_train: split.train.len(),
            n_test: split.test.len(),
            auc,
            acc,
        });
    }

    let roles = chronological_split(&ds.log, cfg.train.train_fraction, cfg.train.validation_fraction);
    let train_part = training_portion(&ds.log, &roles);
    let test_segments = segment_log(&ds.log, &roles, cfg.model.max_seq);
    let mut lengths = Vec::new();
    for (i, bucket) in cfg.coldstart.buckets.iter().enumerate() {
        let (lo, hi) = *bucket;
        let sampled = match cold_start_lengths(&train_part, &[*bucket], cfg.seed.wrapping_add(i as u64)) {
            Ok(mut b) => b.remove(0),
            Err(e) => {
                log::warn!("length bucket ({lo}, {hi}] skipped: {e}");
                lengths.push(LengthResult { lo, hi, n_train: 0, auc: None, acc: None, skipped: Some(e.to_string()) });
                continue;
            }
        };
        log::info!("length cold start: ({lo}, {hi}] with {} students", sampled.lengths.len());
        let model = fit(ds, &sampled.apply(&train_part), &pipeline)
            .with_context(|| format!("training on bucket ({lo}, {hi}]"))?;
        let (auc, acc) = score(&model, &test_segments, cfg.eval.batch_size, cfg.eval.threshold)?;
        lengths.push(LengthResult {
            lo,
            hi,
            n_train: sampled.lengths.len(),
            auc: Some(auc),
            acc: Some(acc),
            skipped: None,
        });
    }
    Ok(ColdStartReport { students, lengths })
}
