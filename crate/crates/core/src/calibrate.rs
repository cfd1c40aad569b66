//! Knowledge relation importance rank calibration.
//!
//! Each skill's neighbors are ranked by how they relate to it in the
//! knowledge hierarchy (parent 0, child 1, two-hop relative 2, co-exercise
//! 3). Ranked pairs form a partial-order set, and a binary Q-matrix or skill
//! relation matrix is calibrated by gradient ascent on a pairwise log
//! posterior with a Gaussian prior:
//!
//! ```text
//! log p(M | D) = Σ_(i,a,b)∈D ln σ(M[i,a] − M[i,b]) − Σ_ij M[i,j]² / 2σ²
//! ```
//!
//! The rank-only pair probability `1 / (1 + exp(λ (rank_a − rank_b)))`
//! seeds the iterate for every ranked neighbor.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{HeterogeneousGraph, KnowledgeLevelGraph, QMatrix};
use crate::tape::{sigmoid, softplus};

pub const RANK_PARENT: u8 = 0;
pub const RANK_CHILD: u8 = 1;
pub const RANK_TWO_HOP: u8 = 2;
pub const RANK_CO_EXERCISE: u8 = 3;

/// Ranked neighbors of one matrix row (a skill, or an exercise for Q).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborRanking {
    pub row: usize,
    /// `(neighbor, rank)`, sorted by rank then neighbor index.
    pub ranked: Vec<(usize, u8)>,
}

impl NeighborRanking {
    fn from_min_ranks(row: usize, ranks: BTreeMap<usize, u8>) -> Self {
        let mut ranked: Vec<(usize, u8)> = ranks.into_iter().collect();
        ranked.sort_by_key(|&(n, r)| (r, n));
        NeighborRanking { row, ranked }
    }

    pub fn rank_of(&self, neighbor: usize) -> Option<u8> {
        self.ranked.iter().find(|(n, _)| *n == neighbor).map(|(_, r)| *r)
    }
}

fn offer(ranks: &mut BTreeMap<usize, u8>, neighbor: usize, rank: u8) {
    ranks.entry(neighbor).and_modify(|r| *r = (*r).min(rank)).or_insert(rank);
}

/// Ranks the neighbors of `skill`. Two-hop relatives are grandparents,
/// grandchildren and siblings through a shared parent.
pub fn neighbor_ranks(skill: usize, levels: &KnowledgeLevelGraph, het: &HeterogeneousGraph) -> Result<NeighborRanking> {
    if skill >= levels.n_skills() || skill >= het.n_skills {
        return Err(Error::Unknown { kind: "skill", id: skill.to_string() });
    }
    let mut ranks = BTreeMap::new();
    for &p in levels.parents(skill) {
        offer(&mut ranks, p, RANK_PARENT);
        for &gp in levels.parents(p) {
            offer(&mut ranks, gp, RANK_TWO_HOP);
        }
        for &sib in levels.children(p) {
            offer(&mut ranks, sib, RANK_TWO_HOP);
        }
    }
    for &c in levels.children(skill) {
        offer(&mut ranks, c, RANK_CHILD);
        for &gc in levels.children(c) {
            offer(&mut ranks, gc, RANK_TWO_HOP);
        }
    }
    for e in het.exercises_of(skill).collect::<Vec<_>>() {
        for other in het.skills_of(e) {
            offer(&mut ranks, other, RANK_CO_EXERCISE);
        }
    }
    ranks.remove(&skill);
    Ok(NeighborRanking::from_min_ranks(skill, ranks))
}

/// Rankings for every skill.
pub fn all_skill_ranks(levels: &KnowledgeLevelGraph, het: &HeterogeneousGraph) -> Result<Vec<NeighborRanking>> {
    (0..het.n_skills).map(|s| neighbor_ranks(s, levels, het)).collect()
}

/// Ranks the skills relevant to an exercise: its tagged skills at rank 0,
/// and every neighbor `n` of a tagged skill at `min(1 + rank(n), 3)`.
pub fn exercise_ranks(
    exercise: usize,
    het: &HeterogeneousGraph,
    skill_ranks: &[NeighborRanking],
) -> Result<NeighborRanking> {
    if exercise >= het.n_exercises {
        return Err(Error::Unknown { kind: "exercise", id: exercise.to_string() });
    }
    let tagged: Vec<usize> = het.skills_of(exercise).collect();
    let mut ranks = BTreeMap::new();
    for &s in &tagged {
        for &(n, r) in &skill_ranks[s].ranked {
            offer(&mut ranks, n, (r + 1).min(RANK_CO_EXERCISE));
        }
    }
    for &s in &tagged {
        ranks.insert(s, 0);
    }
    Ok(NeighborRanking::from_min_ranks(exercise, ranks))
}

/// Rank-only preference probability that `a` outranks `b`.
pub fn pair_probability(rank_a: i64, rank_b: i64, lambda: f64) -> f64 {
    sigmoid(-lambda * (rank_a - rank_b) as f64)
}

/// Triples `(row, preferred, less_preferred)` together with the rankings
/// they were drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PartialOrderSet {
    pub rankings: Vec<NeighborRanking>,
    pub triples: Vec<(usize, usize, usize)>,
}

impl PartialOrderSet {
    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Fraction of triples with `m[i,a] > m[i,b]`; 1 for an empty set.
    pub fn satisfied_fraction(&self, m: &Array2<f64>) -> f64 {
        if self.triples.is_empty() {
            return 1.0;
        }
        let ok = self.triples.iter().filter(|&&(i, a, b)| m[[i, a]] > m[[i, b]]).count();
        ok as f64 / self.triples.len() as f64
    }

    /// Cells that carry a ranked neighbor.
    pub fn support(&self, shape: (usize, usize)) -> Array2<bool> {
        let mut mask = Array2::from_elem(shape, false);
        for r in &self.rankings {
            for &(n, _) in &r.ranked {
                mask[[r.row, n]] = true;
            }
        }
        mask
    }
}

pub fn build_partial_order(rankings: Vec<NeighborRanking>) -> PartialOrderSet {
    let mut triples = Vec::new();
    for r in &rankings {
        for &(a, ra) in &r.ranked {
            for &(b, rb) in &r.ranked {
                if ra < rb {
                    triples.push((r.row, a, b));
                }
            }
        }
    }
    PartialOrderSet { rankings, triples }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub lambda: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { lambda: 1.0, sigma: 1.0, alpha: 0.1, max_iters: 1000, tol: 1e-6 }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("calibrate.{name} must be positive, got {v}")))
            }
        };
        positive("lambda", self.lambda)?;
        positive("sigma", self.sigma)?;
        positive("alpha", self.alpha)?;
        positive("tol", self.tol)?;
        if self.tol >= 1.0 {
            return Err(Error::Config("calibrate.tol must be < 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("calibrate.max_iters must be positive".into()));
        }
        Ok(())
    }
}

fn check_shape(m: &Array2<f64>, d: &PartialOrderSet) -> Result<()> {
    for &(i, a, b) in &d.triples {
        if i >= m.nrows() || a >= m.ncols() || b >= m.ncols() {
            return Err(Error::Shape(format!("triple ({i}, {a}, {b}) outside {}x{} matrix", m.nrows(), m.ncols())));
        }
    }
    Ok(())
}

pub fn log_posterior(m: &Array2<f64>, d: &PartialOrderSet, config: &CalibrationConfig) -> Result<f64> {
    if let Some(v) = m.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("calibration matrix entry {v}")));
    }
    check_shape(m, d)?;
    let likelihood: f64 = d.triples.iter().map(|&(i, a, b)| -softplus(m[[i, b]] - m[[i, a]])).sum();
    let prior: f64 = m.iter().map(|v| v * v).sum::<f64>() / (2.0 * config.sigma * config.sigma);
    Ok(likelihood - prior)
}

/// Analytic gradient of [`log_posterior`] with respect to `m`.
pub fn log_posterior_gradient(m: &Array2<f64>, d: &PartialOrderSet, config: &CalibrationConfig) -> Array2<f64> {
    let mut g = m.mapv(|v| -v / (config.sigma * config.sigma));
    for &(i, a, b) in &d.triples {
        let w = sigmoid(m[[i, b]] - m[[i, a]]);
        g[[i, a]] += w;
        g[[i, b]] -= w;
    }
    g
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedMatrix {
    pub values: Array2<f64>,
    /// Log posterior of the initial iterate and of every accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl CalibratedMatrix {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }

    /// Relevance weights in (0, 1) on the ranked support, zero elsewhere.
    pub fn relevance(&self, d: &PartialOrderSet) -> Array2<f64> {
        let support = d.support(self.values.dim());
        let mut out = Array2::zeros(self.values.dim());
        ndarray::Zip::from(&mut out).and(&self.values).and(&support).for_each(|o, v, s| {
            if *s {
                *o = sigmoid(*v)
            }
        });
        out
    }
}

/// Rank-seeded starting point: ranked cells get `pair_probability(rank, 0)`,
/// every other cell keeps its raw value.
pub fn initial_iterate(raw: &Array2<f64>, d: &PartialOrderSet, lambda: f64) -> Array2<f64> {
    let mut m = raw.clone();
    for r in &d.rankings {
        for &(n, rank) in &r.ranked {
            m[[r.row, n]] = pair_probability(rank as i64, 0, lambda);
        }
    }
    m
}

/// Gradient ascent on the log posterior from [`initial_iterate`]. Stops when
/// the relative change `|Δ| / (1 + |logpost|)` drops below `tol`, when the
/// gradient vanishes, or after `max_iters` steps.
pub fn calibrate(raw: &Array2<f64>, d: &PartialOrderSet, config: &CalibrationConfig) -> Result<CalibratedMatrix> {
    config.validate()?;
    check_shape(raw, d)?;
    if d.is_empty() {
        log::debug!("empty partial-order set; calibration only shrinks toward the prior");
    }
    let mut m = initial_iterate(raw, d, config.lambda);
    let mut current = log_posterior(&m, d, config)?;
    let mut trace = vec![current];
    let mut converged = false;
    for iteration in 1..=config.max_iters {
        let g = log_posterior_gradient(&m, d, config);
        if g.iter().all(|v| *v == 0.0) {
            converged = true;
            break;
        }
        m.scaled_add(config.alpha, &g);
        let next = log_posterior(&m, d, config).map_err(|e| Error::Diverged { iteration, reason: e.to_string() })?;
        if !next.is_finite() {
            return Err(Error::Diverged { iteration, reason: format!("log posterior {next}") });
        }
        trace.push(next);
        let change = (next - current).abs() / (1.0 + next.abs());
        current = next;
        if change < config.tol {
            converged = true;
            break;
        }
    }
    Ok(CalibratedMatrix { values: m, trace, converged })
}

/// Binary skill relation matrix: `S[i, j] = 1` for every ranked neighbor.
pub fn raw_skill_relation(rankings: &[NeighborRanking], n_skills: usize) -> Array2<f64> {
    let mut s = Array2::zeros((n_skills, n_skills));
    for r in rankings {
        for &(n, _) in &r.ranked {
            s[[r.row, n]] = 1.0;
        }
    }
    s
}

/// Everything the calibration stage produces.
#[derive(Debug, Clone)]
pub struct CalibrationOutput {
    pub skill_order: PartialOrderSet,
    pub exercise_order: PartialOrderSet,
    pub skill_relation: CalibratedMatrix,
    pub q: CalibratedMatrix,
    /// Calibrated Q-matrix as relevance weights.
    pub q_hat: QMatrix,
    /// Calibrated skill relation matrix as relevance weights.
    pub s_hat: Array2<f64>,
}

impl CalibrationOutput {
    pub fn converged(&self) -> bool {
        self.skill_relation.converged && self.q.converged
    }
}

/// Calibrates both the skill relation matrix and the Q-matrix.
pub fn calibrate_all(
    levels: &KnowledgeLevelGraph,
    het: &HeterogeneousGraph,
    raw_q: &QMatrix,
    config: &CalibrationConfig,
) -> Result<CalibrationOutput> {
    let skill_ranks = all_skill_ranks(levels, het)?;
    let exercise_ranks: Vec<NeighborRanking> =
        (0..het.n_exercises).map(|e| exercise_ranks(e, het, &skill_ranks)).collect::<Result<_>>()?;
    let raw_s = raw_skill_relation(&skill_ranks, het.n_skills);
    let skill_order = build_partial_order(skill_ranks);
    let exercise_order = build_partial_order(exercise_ranks);
    let skill_relation = calibrate(&raw_s, &skill_order, config)?;
    let q = calibrate(&raw_q.values, &exercise_order, config)?;
    let s_hat = skill_relation.relevance(&skill_order);
    let q_hat = QMatrix { values: q.relevance(&exercise_order), calibrated: true };
    Ok(CalibrationOutput { skill_order, exercise_order, skill_relation, q, q_hat, s_hat })
}
