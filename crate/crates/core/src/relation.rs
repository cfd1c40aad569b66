//! Exercise relation matrix.
//!
//! `A[i, j]` blends embedding similarity, difficulty similarity and a
//! contingency-table association coefficient, keeps at most one direction
//! per exercise pair, and drops everything below the sparsity threshold.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{IdMap, InteractionLog};
use crate::tape::{Tape, Var};

/// Number of attempts below which a student's difficulty is the default.
pub const MIN_ATTEMPTS: usize = 5;
pub const MAX_LEVEL: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CognitiveDifficulty {
    pub student: usize,
    pub exercise: usize,
    pub time: i64,
    pub level: u8,
}

/// Difficulty level of `exercise` for `student` from the attempts with
/// timestamp `<= t`: `floor(4 * incorrect / attempts)` once there are at
/// least five attempts, otherwise 5.
pub fn cognitive_difficulty(
    log: &InteractionLog,
    student: usize,
    exercise: usize,
    t: i64,
) -> Result<CognitiveDifficulty> {
    if exercise >= log.n_exercises() {
        return Err(Error::Unknown { kind: "exercise", id: exercise.to_string() });
    }
    let seq = log.sequence(student)?;
    let (attempts, incorrect) = seq
        .iter()
        .filter(|it| it.exercise == exercise && it.timestamp <= t)
        .fold((0usize, 0usize), |(n, w), it| (n + 1, w + usize::from(!it.correct)));
    Ok(CognitiveDifficulty { student, exercise, time: t, level: level_from_counts(attempts, incorrect) })
}

fn level_from_counts(attempts: usize, incorrect: usize) -> u8 {
    if attempts >= MIN_ATTEMPTS {
        // integer floor of 4 * incorrect / attempts
        ((4 * incorrect) / attempts) as u8
    } else {
        MAX_LEVEL
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ItemDifficulty {
    pub exercise: usize,
    pub phi: f64,
}

/// Mean over attempting students of their difficulty level at their last
/// attempt. Never-attempted exercises get the hardest level, 5.
pub fn item_difficulty(log: &InteractionLog, exercise: usize) -> Result<ItemDifficulty> {
    if exercise >= log.n_exercises() {
        return Err(Error::Unknown { kind: "exercise", id: exercise.to_string() });
    }
    Ok(ItemDifficulty { exercise, phi: all_item_difficulties(log)[exercise] })
}

/// [`item_difficulty`] for every exercise in one pass.
pub fn all_item_difficulties(log: &InteractionLog) -> Vec<f64> {
    let n = log.n_exercises();
    let mut sums = vec![0.0; n];
    let mut students = vec![0usize; n];
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for seq in &log.sequences {
        counts.clear();
        for it in seq {
            let c = counts.entry(it.exercise).or_default();
            c.0 += 1;
            c.1 += usize::from(!it.correct);
        }
        for (&e, &(attempts, incorrect)) in &counts {
            sums[e] += f64::from(level_from_counts(attempts, incorrect));
            students[e] += 1;
        }
    }
    sums.iter().zip(&students).map(|(s, n)| if *n == 0 { f64::from(MAX_LEVEL) } else { s / *n as f64 }).collect()
}

/// `1 / (1 + |φ_i − φ_j|)`.
pub fn difficulty_similarity(phi_i: f64, phi_j: f64) -> f64 {
    1.0 / (1.0 + (phi_i - phi_j).abs())
}

/// Latest-response cross tabulation of two exercises over common students.
/// `a`: both wrong, `b`: i right and j wrong, `c`: i wrong and j right,
/// `d`: both right.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    fn record(&mut self, i_correct: bool, j_correct: bool) {
        match (i_correct, j_correct) {
            (false, false) => self.a += 1,
            (true, false) => self.b += 1,
            (false, true) => self.c += 1,
            (true, true) => self.d += 1,
        }
    }

    /// The table with the roles of the two exercises swapped.
    pub fn transposed(&self) -> Self {
        ContingencyTable { a: self.a, b: self.c, c: self.b, d: self.d }
    }
}

fn latest_responses(seq: &[crate::ingest::Interaction]) -> BTreeMap<usize, bool> {
    // sequences are time ordered, so the last write wins
    seq.iter().map(|it| (it.exercise, it.correct)).collect()
}

pub fn contingency_table(log: &InteractionLog, i: usize, j: usize) -> ContingencyTable {
    let mut table = ContingencyTable::default();
    for seq in &log.sequences {
        let latest = latest_responses(seq);
        if let (Some(&ri), Some(&rj)) = (latest.get(&i), latest.get(&j)) {
            table.record(ri, rj);
        }
    }
    table
}

/// Every pairwise table at once; `tables[i * n + j]` is `(i, j)`.
pub fn all_contingency_tables(log: &InteractionLog) -> Vec<ContingencyTable> {
    let n = log.n_exercises();
    let mut tables = vec![ContingencyTable::default(); n * n];
    for seq in &log.sequences {
        let latest: Vec<(usize, bool)> = latest_responses(seq).into_iter().collect();
        for &(i, ri) in &latest {
            for &(j, rj) in &latest {
                tables[i * n + j].record(ri, rj);
            }
        }
    }
    tables
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientKind {
    Kappa,
    AdjustedKappa,
    Phi,
    Yule,
    Ochiai,
    Sokal,
    Jaccard,
}

impl CoefficientKind {
    pub const ALL: [CoefficientKind; 7] = [
        CoefficientKind::Kappa,
        CoefficientKind::AdjustedKappa,
        CoefficientKind::Phi,
        CoefficientKind::Yule,
        CoefficientKind::Ochiai,
        CoefficientKind::Sokal,
        CoefficientKind::Jaccard,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CoefficientKind::Kappa => "kappa",
            CoefficientKind::AdjustedKappa => "adjusted_kappa",
            CoefficientKind::Phi => "phi",
            CoefficientKind::Yule => "yule",
            CoefficientKind::Ochiai => "ochiai",
            CoefficientKind::Sokal => "sokal",
            CoefficientKind::Jaccard => "jaccard",
        }
    }
}

impl fmt::Display for CoefficientKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoefficientKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CoefficientKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown coefficient `{s}`")))
    }
}

/// The coefficient, or `None` when its denominator is zero.
pub fn try_coefficient(t: &ContingencyTable, kind: CoefficientKind) -> Option<f64> {
    let (a, b, c, d) = (t.a as f64, t.b as f64, t.c as f64, t.d as f64);
    let cross = a * d - b * c;
    let (num, den) = match kind {
        CoefficientKind::Kappa => (2.0 * cross, (a + b) * (b + d) + (a + c) * (c + d)),
        CoefficientKind::AdjustedKappa => (2.0 * cross, (a + c) * (c + d)),
        CoefficientKind::Phi => (cross, ((a + b) * (b + d) * (a + c) * (c + d)).sqrt()),
        CoefficientKind::Yule => (cross, a * d + b * c),
        CoefficientKind::Ochiai => (a, ((a + b) * (a + c)).sqrt()),
        CoefficientKind::Sokal => (a + d, (a + b + c + d).sqrt()),
        CoefficientKind::Jaccard => (a, a + b + c),
    };
    (den != 0.0).then(|| num / den)
}

/// Association coefficient; a zero denominator yields 0.
pub fn association_coefficient(t: &ContingencyTable, kind: CoefficientKind) -> f64 {
    try_coefficient(t, kind).unwrap_or(0.0)
}

/// For each unordered pair keeps the larger entry in place and zeroes the
/// other; ties keep the `(i, j)`, `i < j` entry. The diagonal is untouched.
pub fn asymmetrize(w: &Array2<f64>) -> Array2<f64> {
    assert_eq!(w.nrows(), w.ncols(), "asymmetrize needs a square matrix");
    let mut out = w.clone();
    let n = w.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let (x, y) = (out[[i, j]], out[[j, i]]);
            if x >= y {
                out[[i, j]] = x.max(y);
                out[[j, i]] = 0.0;
            } else {
                out[[j, i]] = y.max(x);
                out[[i, j]] = 0.0;
            }
        }
    }
    out
}

/// Cells that survive [`asymmetrize`] as the kept member of their pair,
/// plus the diagonal.
pub fn kept_positions(w: &Array2<f64>) -> Array2<bool> {
    let n = w.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| match i.cmp(&j) {
        std::cmp::Ordering::Equal => true,
        std::cmp::Ordering::Less => w[[i, j]] >= w[[j, i]],
        std::cmp::Ordering::Greater => w[[j, i]] < w[[i, j]],
    })
}

/// Thresholded blend `μ1·simi + μ2·diff + μ3·w`.
pub fn exercise_relation(simi: f64, diff: f64, w: f64, mu: [f64; 3], theta: f64) -> f64 {
    let s = mu[0] * simi + (mu[1] * diff + mu[2] * w);
    if s >= theta {
        s
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelationConfig {
    pub kind: CoefficientKind,
    pub theta: f64,
    pub mu: [f64; 3],
}

impl Default for RelationConfig {
    fn default() -> Self {
        RelationConfig { kind: CoefficientKind::AdjustedKappa, theta: 0.65, mu: [0.1, 0.2, 0.7] }
    }
}

/// The parts of `A` that do not depend on the embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationInputs {
    pub phi: Vec<f64>,
    pub difficulty: Array2<f64>,
    /// Asymmetrized association coefficients.
    pub association: Array2<f64>,
    pub keep: Array2<bool>,
    pub zero_denominators: usize,
}

impl RelationInputs {
    pub fn build(log: &InteractionLog, kind: CoefficientKind) -> Self {
        let n = log.n_exercises();
        let phi = all_item_difficulties(log);
        let difficulty = Array2::from_shape_fn((n, n), |(i, j)| difficulty_similarity(phi[i], phi[j]));
        let tables = all_contingency_tables(log);
        let mut zero_denominators = 0;
        let raw = Array2::from_shape_fn((n, n), |(i, j)| match try_coefficient(&tables[i * n + j], kind) {
            Some(v) => v,
            None => {
                zero_denominators += 1;
                0.0
            }
        });
        if zero_denominators > 0 {
            log::debug!("{kind}: {zero_denominators} tables with zero denominator set to 0");
        }
        RelationInputs {
            phi,
            keep: kept_positions(&raw),
            association: asymmetrize(&raw),
            difficulty,
            zero_denominators,
        }
    }

    pub fn n_exercises(&self) -> usize {
        self.phi.len()
    }

    /// `μ2·diff + μ3·w`, the embedding-independent part of the blend.
    pub fn static_part(&self, mu: [f64; 3]) -> Array2<f64> {
        let mut out = &self.difficulty * mu[1];
        out.scaled_add(mu[2], &self.association);
        out
    }
}

/// Records `A` on `tape` from a cosine-similarity node.
pub fn relation_matrix_tape(tape: &mut Tape, similarity: Var, inputs: &RelationInputs, config: &RelationConfig) -> Var {
    let scaled = tape.scale(similarity, config.mu[0]);
    let fixed = tape.leaf(inputs.static_part(config.mu));
    let blended = tape.add(scaled, fixed);
    tape.threshold(blended, config.theta, &inputs.keep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExerciseRelationMatrix {
    pub values: Array2<f64>,
    pub config: RelationConfig,
}

impl ExerciseRelationMatrix {
    pub fn build(similarity: &Array2<f64>, inputs: &RelationInputs, config: &RelationConfig) -> Result<Self> {
        let n = inputs.n_exercises();
        if similarity.dim() != (n, n) {
            return Err(Error::Shape(format!("similarity is {:?}, expected {n}x{n}", similarity.dim())));
        }
        let mut tape = Tape::new();
        let sim = tape.leaf(similarity.clone());
        let a = relation_matrix_tape(&mut tape, sim, inputs, config);
        Ok(ExerciseRelationMatrix { values: tape.value(a).clone(), config: *config })
    }

    pub fn n_exercises(&self) -> usize {
        self.values.nrows()
    }

    pub fn nonzeros(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.values.indexed_iter().filter(|(_, v)| **v != 0.0).map(|(ij, v)| (ij, *v))
    }

    /// `i,j,value` rows for the nonzero entries.
    pub fn write_csv<W: Write>(&self, out: W, exercises: &IdMap) -> Result<()> {
        write_triplets_csv(out, &self.values, exercises, exercises, ["i", "j", "value"])
    }
}

/// Nonzero entries of `m` as labelled triplets.
pub fn write_triplets_csv<W: Write>(
    out: W,
    m: &Array2<f64>,
    rows: &IdMap,
    cols: &IdMap,
    header: [&str; 3],
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(header)?;
    for ((i, j), v) in m.indexed_iter() {
        if *v != 0.0 {
            writer.write_record([rows.id(i), cols.id(j), &format!("{v}")])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// `[A[next, h] for h in history]`.
pub fn relation_vector(a: &ExerciseRelationMatrix, history: &[usize], next: usize) -> Result<Vec<f64>> {
    let n = a.n_exercises();
    if let Some(bad) = history.iter().chain(std::iter::once(&next)).find(|e| **e >= n) {
        return Err(Error::Unknown { kind: "exercise", id: bad.to_string() });
    }
    Ok(history.iter().map(|h| a.values[[next, *h]]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientStats {
    pub nonzeros: usize,
    pub density: f64,
    pub mean_nonzero: f64,
    pub zero_denominators: usize,
}

/// Sparsity statistics of `A` under every coefficient kind.
pub fn relation_report(
    log: &InteractionLog,
    similarity: &Array2<f64>,
    config: &RelationConfig,
) -> Result<BTreeMap<String, CoefficientStats>> {
    let mut out = BTreeMap::new();
    let n = log.n_exercises();
    for kind in CoefficientKind::ALL {
        let inputs = RelationInputs::build(log, kind);
        let a = ExerciseRelationMatrix::build(similarity, &inputs, &RelationConfig { kind, ..*config })?;
        let values: Vec<f64> = a.nonzeros().map(|(_, v)| v).collect();
        let nonzeros = values.len();
        out.insert(
            kind.name().to_owned(),
            CoefficientStats {
                nonzeros,
                density: if n == 0 { 0.0 } else { nonzeros as f64 / (n * n) as f64 },
                mean_nonzero: if nonzeros == 0 { 0.0 } else { values.iter().sum::<f64>() / nonzeros as f64 },
                zero_denominators: inputs.zero_denominators,
            },
        );
    }
    Ok(out)
}
