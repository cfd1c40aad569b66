use std::collections::BTreeMap;
use std::io::Write;

use anyhow::{bail, Context, Result};

use ngfkt_core::calibrate::CalibratedMatrix;
use ngfkt_core::eval::{parse_predictions, EvalReport, Prediction, PredictionSet};
use ngfkt_core::pipeline::{
    predictions, stage_calibrate, stage_embed, stage_relation, stage_train, CalibrationStage, EmbedStage,
    RelationStage, TrainStage,
};
use ngfkt_core::relation::{relation_report, write_triplets_csv};
use ngfkt_core::train::{chronological_split, segment_log, write_curve_csv, Role, TrainConfig, TrainedModel};
use ngfkt_core::Checkpoint;

use super::Dataset;
use crate::config::RunConfig;
use crate::output::OutputDir;

const OWN_MODEL: &str = "ngfkt";

fn write_trace<W: Write>(out: W, parts: &[(&str, &CalibratedMatrix)]) -> ngfkt_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["matrix", "iteration", "log_posterior"])?;
    for (name, m) in parts {
        for (i, lp) in m.trace.iter().enumerate() {
            w.write_record([name.to_string(), i.to_string(), lp.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn calibrate_stage(cfg: &RunConfig, ds: &Dataset, out: &mut OutputDir) -> Result<CalibrationStage> {
    let cal = stage_calibrate(&ds.log, &ds.q, &ds.levels, &cfg.pipeline()).context("calibrate stage")?;
    let o = &cal.output;
    if o.skill_order.is_empty() && o.exercise_order.is_empty() {
        log::warn!("the partial-order set is empty; calibrated matrices are the prior-shrunk inputs");
    }
    for (name, m) in [("skill relation", &o.skill_relation), ("Q-matrix", &o.q)] {
        if m.converged {
            log::info!("{name}: converged after {} iterations", m.iterations());
        } else {
            log::warn!("{name}: stopped at calibration.max_iters = {} without converging", cfg.calibration.max_iters);
        }
    }
    out.stage("calibrate");
    let skills = &ds.log.skills;
    out.write_with("q_hat.csv", |b| o.q_hat.write_csv(b, &ds.log.exercises, skills))?;
    out.write_with("s_hat.csv", |b| {
        write_triplets_csv(b, &o.s_hat, skills, skills, ["skill_id", "neighbor_id", "value"])
    })?;
    out.write_with("calibration_trace.csv", |b| {
        write_trace(b, &[("skill_relation", &o.skill_relation), ("q_matrix", &o.q)])
    })?;
    Ok(cal)
}

fn embed_stage(cfg: &RunConfig, ds: &Dataset, cal: &CalibrationStage, out: &mut OutputDir) -> Result<EmbedStage> {
    let emb = stage_embed(cal, &cfg.pipeline()).context("embed stage")?;
    out.stage("embed");
    out.write_with("embeddings.csv", |b| emb.embeddings.write_csv(b, &ds.log.skills, &ds.log.exercises))?;
    Ok(emb)
}

fn relation_stage(
    cfg: &RunConfig,
    ds: &Dataset,
    cal: &CalibrationStage,
    emb: &EmbedStage,
    out: &mut OutputDir,
) -> Result<RelationStage> {
    let rel = stage_relation(cal, emb, &cfg.pipeline()).context("relation stage")?;
    log::info!("relation matrix: {} nonzero entries", rel.matrix.nonzeros().count());
    out.stage("relation");
    out.write_with("relation.csv", |b| rel.matrix.write_csv(b, &ds.log.exercises))?;
    let report = relation_report(&cal.train_log, &emb.similarity, &cfg.relation).context("relation report")?;
    out.write_json("relation_report.json", &report)?;
    Ok(rel)
}

pub fn cmd_calibrate(cfg: &RunConfig, ds: &Dataset, out: &mut OutputDir) -> Result<bool> {
    Ok(calibrate_stage(cfg, ds, out)?.output.converged())
}

pub fn cmd_relations(cfg: &RunConfig, ds: &Dataset, out: &mut OutputDir) -> Result<()> {
    let cal = calibrate_stage(cfg, ds, out)?;
    let emb = embed_stage(cfg, ds, &cal, out)?;
    relation_stage(cfg, ds, &cal, &emb, out)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub predictions: PredictionSet,
    pub report: EvalReport,
}

fn write_predictions<W: Write>(out: W, preds: &PredictionSet) -> ngfkt_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["score", "label", "batch_id"])?;
    for Prediction { score, label, batch } in &preds.items {
        w.write_record([score.to_string(), if *label { "1".into() } else { "0".into() }, batch.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn parse_competitors(items: &[String]) -> Result<BTreeMap<String, PredictionSet>> {
    let mut out = BTreeMap::new();
    for item in items {
        let (name, path) = item.split_once('=').with_context(|| format!("competitor `{item}` is not NAME=FILE"))?;
        if name == OWN_MODEL {
            bail!("competitor name `{OWN_MODEL}` is reserved");
        }
        let f = std::fs::File::open(path).with_context(|| format!("opening {path}"))?;
        out.insert(
            name.to_owned(),
            parse_predictions(std::io::BufReader::new(f)).with_context(|| format!("parsing {path}"))?,
        );
    }
    Ok(out)
}

/// Test-portion predictions and metrics for a trained model.
pub fn evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    model: &TrainedModel,
    train: &TrainConfig,
    competitors: &BTreeMap<String, PredictionSet>,
) -> Result<EvalOutput> {
    if model.params.n_exercises() != ds.log.n_exercises() {
        bail!("checkpoint covers {} exercises, data has {}", model.params.n_exercises(), ds.log.n_exercises());
    }
    let roles = chronological_split(&ds.log, train.train_fraction, train.validation_fraction);
    let segments = segment_log(&ds.log, &roles, model.config.max_seq);
    let preds = predictions(model, &segments, Role::Test, cfg.eval.batch_size).context("scoring the test portion")?;
    let report = EvalReport::build(&preds, cfg.eval.threshold, competitors, OWN_MODEL)?;
    Ok(EvalOutput { predictions: preds, report })
}

fn eval_stage(
    cfg: &RunConfig,
    ds: &Dataset,
    ckpt: &Checkpoint,
    competitors: &[String],
    out: &mut OutputDir,
) -> Result<EvalOutput> {
    let model = TrainedModel::from_checkpoint(ckpt)?;
    let train: TrainConfig = match ckpt.config.get("train") {
        Some(v) => serde_json::from_value(v.clone()).context("checkpoint train config")?,
        None => cfg.train,
    };
    let competitors = parse_competitors(competitors)?;
    let result = evaluate(cfg, ds, &model, &train, &competitors)?;
    log::info!(
        "test AUC {:.4}, ACC {:.4} over {} predictions",
        result.report.auc,
        result.report.acc,
        result.report.n_predictions
    );
    out.stage("eval");
    out.write_with("predictions.csv", |b| write_predictions(b, &result.predictions))?;
    out.write_json("eval_report.json", &result.report)?;
    Ok(result)
}

pub fn cmd_eval(
    cfg: &RunConfig,
    ds: &Dataset,
    ckpt: &Checkpoint,
    competitors: &[String],
    out: &mut OutputDir,
) -> Result<EvalOutput> {
    eval_stage(cfg, ds, ckpt, competitors, out)
}

pub struct PipelineRun {
    pub calibration: CalibrationStage,
    pub train: TrainStage,
    pub eval: Option<EvalOutput>,
}

/// Calibrate, embed, relation and train; then eval when `with_eval`.
pub fn run_pipeline(cfg: &RunConfig, ds: &Dataset, out: &mut OutputDir, with_eval: bool) -> Result<PipelineRun> {
    let cal = calibrate_stage(cfg, ds, out)?;
    let emb = embed_stage(cfg, ds, &cal, out)?;
    let rel = relation_stage(cfg, ds, &cal, &emb, out)?;
    let mut tr = stage_train(&ds.log, &cal, &emb, &rel, &cfg.pipeline()).context("train stage")?;
    tr.outcome.checkpoint.config = serde_json::to_value(cfg)?;
    out.stage("train");
    out.write("checkpoint.ngkt", &tr.outcome.checkpoint.to_bytes())?;
    out.write_with("curve.csv", |b| write_curve_csv(b, &tr.outcome.curve))?;
    out.write_with("relation_trained.csv", |b| {
        write_triplets_csv(
            b,
            &tr.outcome.relation,
            &ds.log.exercises,
            &ds.log.exercises,
            ["exercise_i", "exercise_j", "value"],
        )
    })?;
    let eval = if with_eval { Some(eval_stage(cfg, ds, &tr.outcome.checkpoint, &[], out)?) } else { None };
    Ok(PipelineRun { calibration: cal, train: tr, eval })
}
