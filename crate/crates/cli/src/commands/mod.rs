//! Subcommand implementations.

mod coldstart;
mod radar;
mod stages;
mod synth;

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use anyhow::{Context, Result};

use ngfkt_core::ingest::{load_knowledge_levels, parse_interactions, parse_qmatrix, ParseMode};
use ngfkt_core::{InteractionLog, KnowledgeLevelGraph, QMatrix};

use crate::config::RunConfig;
use crate::output::OutputDir;
use crate::{Command, EXIT_MAX_ITERS, EXIT_OK};

pub use coldstart::{cold_start_report, ColdStartReport};
pub use radar::{radar_snapshot, RadarSnapshot, Snapshot};
pub use stages::{evaluate, run_pipeline, EvalOutput, PipelineRun};
pub use synth::{synth_report, SynthReport};

/// The three input files, parsed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub log: InteractionLog,
    pub q: QMatrix,
    pub levels: KnowledgeLevelGraph,
    pub skipped_rows: usize,
}

fn open(path: &str) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {path}"))?))
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let mode = if cfg.data.parse_mode == "lenient" { ParseMode::Lenient } else { ParseMode::Strict };
    let parsed = parse_interactions(open(&cfg.data.interactions)?, mode)
        .with_context(|| format!("parsing {}", cfg.data.interactions))?;
    if parsed.skipped > 0 {
        log::warn!("skipped {} malformed rows of {}", parsed.skipped, cfg.data.interactions);
    }
    let log = parsed.log;
    if log.is_empty() {
        anyhow::bail!("{} holds no interactions", cfg.data.interactions);
    }
    let q = if cfg.data.qmatrix.is_empty() {
        QMatrix::from_log(&log)
    } else {
        parse_qmatrix(open(&cfg.data.qmatrix)?, &log).with_context(|| format!("parsing {}", cfg.data.qmatrix))?
    };
    let levels = if cfg.data.levels.is_empty() {
        KnowledgeLevelGraph::new(log.n_skills(), &[], Some(&log.skills))?
    } else {
        load_knowledge_levels(open(&cfg.data.levels)?, &log.skills)
            .with_context(|| format!("parsing {}", cfg.data.levels))?
    };
    Ok(Dataset { log, q, levels, skipped_rows: parsed.skipped })
}

pub fn load_checkpoint(path: &Path) -> Result<ngfkt_core::Checkpoint> {
    let f = File::open(path).with_context(|| format!("opening checkpoint {}", path.display()))?;
    ngfkt_core::Checkpoint::read(BufReader::new(f)).with_context(|| format!("reading checkpoint {}", path.display()))
}

pub fn dispatch(command: &Command, cfg: &RunConfig) -> Result<i32> {
    match command {
        Command::Synth => {
            let mut out = OutputDir::new(&cfg.output);
            synth::cmd_synth(cfg, &mut out)?;
            out.finish("synth", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
        Command::Calibrate => {
            let ds = load_dataset(cfg)?;
            let mut out = OutputDir::new(&cfg.output);
            let converged = stages::cmd_calibrate(cfg, &ds, &mut out)?;
            out.finish("calibrate", cfg.to_flat_json())?;
            Ok(if converged { EXIT_OK } else { EXIT_MAX_ITERS })
        }
        Command::Relations => {
            let ds = load_dataset(cfg)?;
            let mut out = OutputDir::new(&cfg.output);
            stages::cmd_relations(cfg, &ds, &mut out)?;
            out.finish("relations", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
        Command::Train => {
            let ds = load_dataset(cfg)?;
            let mut out = OutputDir::new(&cfg.output);
            stages::run_pipeline(cfg, &ds, &mut out, false)?;
            out.finish("train", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
        Command::Pipeline => {
            let ds = load_dataset(cfg)?;
            let mut out = OutputDir::new(&cfg.output);
            stages::run_pipeline(cfg, &ds, &mut out, true)?;
            out.finish("pipeline", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
        Command::Eval(args) => {
            let ds = load_dataset(cfg)?;
            let ckpt = load_checkpoint(&args.checkpoint)?;
            let mut out = OutputDir::new(&cfg.output);
            stages::cmd_eval(cfg, &ds, &ckpt, &args.competitors, &mut out)?;
            out.finish("eval", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
        Command::Coldstart => {
            let ds = load_dataset(cfg)?;
            let report = cold_start_report(cfg, &ds)?;
            let mut out = OutputDir::new(&cfg.output);
            out.stage("coldstart");
            out.write_json("coldstart.json", &report)?;
            out.finish("coldstart", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
        Command::Radar(args) => {
            let ds = load_dataset(cfg)?;
            let ckpt = load_checkpoint(&args.checkpoint)?;
            let snapshot = radar_snapshot(&ds, &ckpt, &args.student, &args.times, &args.skills)?;
            let mut out = OutputDir::new(&cfg.output);
            out.stage("radar");
            out.write_json("radar.json", &snapshot)?;
            out.finish("radar", cfg.to_flat_json())?;
            Ok(EXIT_OK)
        }
    }
}
