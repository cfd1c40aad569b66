//! Synthetic students with a planted learning-and-forgetting signal.
//!
//! Every student has an ability per skill and a practice gain that decays
//! exponentially between practices of that skill:
//!
//! ```text
//! K ← K·exp(−forgetting·Δh),   p = σ(offset + θ + K − β_e),   K ← K + gain
//! ```
//!
//! The true response probabilities are kept so the Bayes-optimal AUC can be
//! estimated by Monte Carlo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auc;
use crate::ingest::{IdMap, Interaction, InteractionLog, KnowledgeLevelGraph, QMatrix};
use crate::tape::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_students: usize,
    pub n_skills: usize,
    pub n_steps: usize,
    pub exercises_per_skill: usize,
    pub ability_sd: f64,
    pub difficulty_sd: f64,
    /// Added to every student's mastery.
    pub mastery_offset: f64,
    pub learning_gain: f64,
    /// Decay rate of the practice gain, per hour.
    pub forgetting_rate: f64,
    pub mean_gap_hours: f64,
    pub start_time: i64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 7,
            n_students: 200,
            n_skills: 2,
            n_steps: 100,
            exercises_per_skill: 10,
            ability_sd: 1.0,
            difficulty_sd: 1.0,
            mastery_offset: 0.0,
            learning_gain: 0.2,
            forgetting_rate: 0.05,
            mean_gap_hours: 6.0,
            start_time: 1_600_000_000,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_students == 0 || self.n_skills == 0 || self.n_steps == 0 || self.exercises_per_skill == 0 {
            return Err(Error::Config("synthetic sizes must be positive".into()));
        }
        let nonneg = [self.ability_sd, self.difficulty_sd, self.learning_gain, self.forgetting_rate];
        if nonneg.iter().any(|v| v.is_nan() || *v < 0.0) || self.mean_gap_hours.is_nan() || self.mean_gap_hours <= 0.0 {
            return Err(Error::Config("synthetic rates must be non-negative and the mean gap positive".into()));
        }
        if self.mastery_offset.is_nan() {
            return Err(Error::Config("synthetic mastery offset is NaN".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub log: InteractionLog,
    pub q: QMatrix,
    /// Chain `k0 → k1 → …`.
    pub levels: KnowledgeLevelGraph,
    /// `β_e` per exercise.
    pub difficulty: Vec<f64>,
    /// `θ` per student and skill.
    pub ability: Vec<Vec<f64>>,
    /// True `p(correct)`, aligned with `log.sequences`.
    pub truth: Vec<Vec<f64>>,
}

pub fn synthetic_benchmark(config: &SyntheticConfig) -> Result<SyntheticBenchmark> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = |sd: f64| Normal::new(0.0, sd).map_err(|e| Error::Config(e.to_string()));
    let ability_dist = normal(config.ability_sd)?;
    let difficulty_dist = normal(config.difficulty_sd)?;
    let gap_dist = Exp::new(1.0 / config.mean_gap_hours).map_err(|e| Error::Config(e.to_string()))?;

    let skills = IdMap::from_ids((0..config.n_skills).map(|k| format!("k{k}")));
    let exercises = IdMap::from_ids(
        (0..config.n_skills).flat_map(|k| (0..config.exercises_per_skill).map(move |j| format!("e{k}_{j}"))),
    );
    let students = IdMap::from_ids((0..config.n_students).map(|s| format!("s{s:04}")));
    let difficulty: Vec<f64> = (0..exercises.len()).map(|_| difficulty_dist.sample(&mut rng)).collect();

    let mut sequences = Vec::with_capacity(config.n_students);
    let mut truth = Vec::with_capacity(config.n_students);
    let mut ability = Vec::with_capacity(config.n_students);
    let mut row = 0;
    for s in 0..config.n_students {
        let theta: Vec<f64> = (0..config.n_skills).map(|_| ability_dist.sample(&mut rng)).collect();
        let mut gain = vec![0.0; config.n_skills];
        let mut last: Vec<Option<f64>> = vec![None; config.n_skills];
        let mut hours = rng.random_range(0.0..24.0);
        let mut seq = Vec::with_capacity(config.n_steps);
        let mut probs = Vec::with_capacity(config.n_steps);
        for step in 0..config.n_steps {
            if step > 0 {
                hours += gap_dist.sample(&mut rng).max(1.0 / 3600.0);
            }
            let k = rng.random_range(0..config.n_skills);
            let e = k * config.exercises_per_skill + rng.random_range(0..config.exercises_per_skill);
            if let Some(prev) = last[k] {
                gain[k] *= (-config.forgetting_rate * (hours - prev)).exp();
            }
            let p = sigmoid(config.mastery_offset + theta[k] + gain[k] - difficulty[e]);
            let correct = rng.random::<f64>() < p;
            gain[k] += config.learning_gain;
            last[k] = Some(hours);
            seq.push(Interaction {
                student: s,
                exercise: e,
                skills: vec![k],
                timestamp: config.start_time + (hours * 3600.0).round() as i64,
                correct,
                row,
            });
            probs.push(p);
            row += 1;
        }
        sequences.push(seq);
        truth.push(probs);
        ability.push(theta);
    }
    let log = InteractionLog::from_parts(students, exercises, skills, sequences);
    let q = QMatrix::from_log(&log);
    let links: Vec<(usize, usize)> = (1..config.n_skills).map(|k| (k - 1, k)).collect();
    let levels = KnowledgeLevelGraph::new(config.n_skills, &links, Some(&log.skills))?;
    Ok(SyntheticBenchmark { config: *config, log, q, levels, difficulty, ability, truth })
}

/// Monte-Carlo AUC of the true probabilities against freshly drawn
/// labels: the ceiling any predictor can expect on these positions.
pub fn bayes_auc(truth: &[f64], replicates: usize, seed: u64) -> Result<f64> {
    if truth.is_empty() || replicates == 0 {
        return Err(Error::Invalid("Bayes AUC needs probabilities and replicates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut used = 0;
    for _ in 0..replicates {
        let labels: Vec<bool> = truth.iter().map(|p| rng.random::<f64>() < *p).collect();
        if let Ok(a) = auc(truth, &labels) {
            total += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Invalid("every replicate was single-class".into()));
    }
    Ok(total / used as f64)
}
