use std::io::Write;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use ngfkt_core::eval::synth::{bayes_auc, synthetic_benchmark};
use ngfkt_core::train::{chronological_split, Role};
use ngfkt_core::{SyntheticBenchmark, SyntheticConfig};

use crate::config::RunConfig;
use crate::output::OutputDir;

const BAYES_REPLICATES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub config: SyntheticConfig,
    pub n_interactions: usize,
    pub bayes_auc_all: f64,
    /// Over the positions the default chronological split holds out.
    pub bayes_auc_test: f64,
}

pub fn synth_report(cfg: &RunConfig, bench: &SyntheticBenchmark) -> Result<SynthReport> {
    let all: Vec<f64> = bench.truth.iter().flatten().copied().collect();
    let roles = chronological_split(&bench.log, cfg.train.train_fraction, cfg.train.validation_fraction);
    let test: Vec<f64> = bench
        .truth
        .iter()
        .zip(&roles)
        .flat_map(|(p, r)| p.iter().zip(r).filter(|(_, r)| **r == Role::Test).map(|(p, _)| *p))
        .collect();
    Ok(SynthReport {
        config: bench.config,
        n_interactions: bench.log.len(),
        bayes_auc_all: bayes_auc(&all, BAYES_REPLICATES, bench.config.seed)?,
        bayes_auc_test: bayes_auc(&test, BAYES_REPLICATES, bench.config.seed)?,
    })
}

fn write_truth<W: Write>(out: W, bench: &SyntheticBenchmark) -> ngfkt_core::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["student_id", "exercise_id", "timestamp", "p_true"])?;
    for (seq, probs) in bench.log.sequences.iter().zip(&bench.truth) {
        for (x, p) in seq.iter().zip(probs) {
            w.write_record([
                bench.log.students.id(x.student).to_owned(),
                bench.log.exercises.id(x.exercise).to_owned(),
                x.timestamp.to_string(),
                p.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_synth(cfg: &RunConfig, out: &mut OutputDir) -> Result<SynthReport> {
    let bench = synthetic_benchmark(&cfg.synth)?;
    let report = synth_report(cfg, &bench)?;
    log::info!(
        "{} interactions, Bayes AUC {:.4} (test {:.4})",
        report.n_interactions,
        report.bayes_auc_all,
        report.bayes_auc_test
    );
    out.stage("synth");
    out.write_with("interactions.csv", |b| bench.log.write_csv(b))?;
    out.write_with("qmatrix.csv", |b| bench.q.write_csv(b, &bench.log.exercises, &bench.log.skills))?;
    out.write_with("knowledge_levels.csv", |b| bench.levels.write_csv(b, &bench.log.skills))?;
    out.write_with("truth.csv", |b| write_truth(b, &bench))?;
    out.write_json("synth_report.json", &report)?;
    Ok(report)
}
