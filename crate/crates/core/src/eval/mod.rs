//! Metrics, the performance-stability score and cold-start protocols.

pub mod synth;

use std::collections::BTreeMap;
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::InteractionLog;

/// Size of the evaluation batches used for PS.
pub const DEFAULT_BATCH: usize = 200;

pub const STUDENT_FRACTIONS: [f64; 6] = [0.10, 0.12, 0.14, 0.16, 0.18, 0.20];

pub const LENGTH_BUCKETS: [(usize, usize); 6] = [(50, 75), (75, 100), (100, 125), (125, 150), (150, 175), (175, 200)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub score: f64,
    pub label: bool,
    pub batch: usize,
}

/// Scored predictions grouped into evaluation batches.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionSet {
    pub items: Vec<Prediction>,
}

impl PredictionSet {
    /// Assigns consecutive runs of `batch_size` predictions to batches.
    pub fn from_scores(scores: &[f64], labels: &[bool], batch_size: usize) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        let batch_size = batch_size.max(1);
        let items = scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (s, l))| Prediction { score: *s, label: *l, batch: i / batch_size })
            .collect();
        let set = PredictionSet { items };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::Invalid("empty prediction set".into()));
        }
        if let Some(p) = self.items.iter().find(|p| !p.score.is_finite() || !(0.0..=1.0).contains(&p.score)) {
            return Err(Error::Invalid(format!("score {} outside [0, 1]", p.score)));
        }
        Ok(())
    }

    pub fn scores(&self) -> Vec<f64> {
        self.items.iter().map(|p| p.score).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.items.iter().map(|p| p.label).collect()
    }

    /// Predictions of each batch, in batch-id order.
    pub fn batches(&self) -> BTreeMap<usize, PredictionSet> {
        let mut out: BTreeMap<usize, PredictionSet> = BTreeMap::new();
        for p in &self.items {
            out.entry(p.batch).or_default().items.push(*p);
        }
        out
    }

    pub fn auc(&self) -> Result<f64> {
        auc(&self.scores(), &self.labels())
    }

    pub fn acc(&self, threshold: f64) -> Result<f64> {
        acc(&self.scores(), &self.labels(), threshold)
    }
}

/// Reads `score,label,batch_id` rows.
pub fn parse_predictions<R: Read>(source: R) -> Result<PredictionSet> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers()?.clone();
    let expected = ["score", "label", "batch_id"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Header(format!("expected {expected:?}, found {headers:?}")));
    }
    let mut items = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let record = record?;
        let line = n as u64 + 2;
        let bad = |reason: String| Error::MalformedRow { line, reason };
        let score: f64 = record[0].parse().map_err(|_| bad(format!("bad score `{}`", &record[0])))?;
        let label = match &record[1] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("label must be 0/1, found `{other}`"))),
        };
        let batch: usize = record[2].parse().map_err(|_| bad(format!("bad batch id `{}`", &record[2])))?;
        items.push(Prediction { score, label, batch });
    }
    let set = PredictionSet { items };
    set.validate()?;
    Ok(set)
}

/// Rank-based AUC with ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let positives = labels.iter().filter(|l| **l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Invalid("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    // Sum of (doubled) midranks of the positives; integer until the end.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank (i + j + 2) / 2
        let doubled_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|k| labels[**k]).count() as u128;
        doubled_rank_sum += doubled_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (positives as u128, negatives as u128);
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// Fraction of predictions with `(score >= threshold) == label`.
pub fn acc(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = scores.iter().zip(labels).filter(|(s, l)| (**s >= threshold) == **l).count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Competition ranks ("1224") for metrics where larger is better.
pub fn competition_ranks(metrics: &[f64]) -> Vec<usize> {
    metrics.iter().map(|m| 1 + metrics.iter().filter(|o| *o > m).count()).collect()
}

/// Ranks of every competing model in one batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankRecord {
    pub batch: usize,
    pub ranks: Vec<usize>,
}

/// Performance stability of one model given its rank in every batch:
/// `(1/N_batch) Σ (N_model − rank + 1) / N_model`.
pub fn ps(ranks: &[usize], n_model: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Invalid("PS over zero batches".into()));
    }
    if n_model == 0 {
        return Err(Error::Invalid("PS needs at least one model".into()));
    }
    if let Some(r) = ranks.iter().find(|r| **r == 0 || **r > n_model) {
        return Err(Error::Invalid(format!("rank {r} outside [1, {n_model}]")));
    }
    let total: usize = ranks.iter().map(|r| n_model - r + 1).sum();
    Ok(total as f64 / (n_model as f64 * ranks.len() as f64))
}

/// Per-batch AUC ranks of competing models and their PS values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsTable {
    pub models: Vec<String>,
    pub records: Vec<RankRecord>,
    pub ps: BTreeMap<String, f64>,
    /// Batches where some model saw a single label class.
    pub skipped_batches: Vec<usize>,
}

/// Ranks models by per-batch AUC. All models must cover the same batch
/// ids; batches with a single label class are skipped.
pub fn ps_table(models: &BTreeMap<String, PredictionSet>) -> Result<PsTable> {
    if models.is_empty() {
        return Err(Error::Invalid("no models to rank".into()));
    }
    let names: Vec<String> = models.keys().cloned().collect();
    let per_model: Vec<BTreeMap<usize, PredictionSet>> = models.values().map(PredictionSet::batches).collect();
    let batch_ids: Vec<usize> = per_model[0].keys().copied().collect();
    for (name, batches) in names.iter().zip(&per_model) {
        if batches.keys().copied().collect::<Vec<_>>() != batch_ids {
            return Err(Error::IndexMismatch(format!("model `{name}` covers different batches")));
        }
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for b in &batch_ids {
        let aucs: Option<Vec<f64>> = per_model.iter().map(|m| m[b].auc().ok()).collect();
        match aucs {
            Some(aucs) => records.push(RankRecord { batch: *b, ranks: competition_ranks(&aucs) }),
            None => skipped.push(*b),
        }
    }
    let mut ps_values = BTreeMap::new();
    for (m, name) in names.iter().enumerate() {
        let ranks: Vec<usize> = records.iter().map(|r| r.ranks[m]).collect();
        ps_values.insert(name.clone(), ps(&ranks, names.len())?);
    }
    Ok(PsTable { models: names, records, ps: ps_values, skipped_batches: skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_predictions: usize,
    pub n_batches: usize,
    pub auc: f64,
    pub acc: f64,
    pub threshold: f64,
    /// Per-model PS, present when competing predictions were supplied.
    pub ps: Option<PsTable>,
}

impl EvalReport {
    pub fn build(
        preds: &PredictionSet,
        threshold: f64,
        competitors: &BTreeMap<String, PredictionSet>,
        own_name: &str,
    ) -> Result<Self> {
        preds.validate()?;
        let ps = if competitors.is_empty() {
            None
        } else {
            let mut all = competitors.clone();
            all.insert(own_name.to_owned(), preds.clone());
            Some(ps_table(&all)?)
        };
        Ok(EvalReport {
            n_predictions: preds.items.len(),
            n_batches: preds.batches().len(),
            auc: preds.auc()?,
            acc: preds.acc(threshold)?,
            threshold,
            ps,
        })
    }
}

/// Training and held-out students for one cold-start fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSplit {
    pub fraction: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded student samples: `round(f·N)` students train, the rest test.
pub fn cold_start_students(log: &InteractionLog, fractions: &[f64], seed: u64) -> Result<Vec<StudentSplit>> {
    let n = log.n_students();
    let mut out = Vec::with_capacity(fractions.len());
    for (i, f) in fractions.iter().enumerate() {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::Invalid(format!("fraction {f} outside (0, 1]")));
        }
        let k = (f * n as f64).round() as usize;
        if k == 0 {
            return Err(Error::Invalid(format!("fraction {f} of {n} students selects nobody")));
        }
        if k >= n {
            return Err(Error::Invalid(format!("fraction {f} leaves no held-out students")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let mut students: Vec<usize> = (0..n).collect();
        students.shuffle(&mut rng);
        let mut train = students[..k].to_vec();
        let mut test = students[k..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        out.push(StudentSplit { fraction: *f, train, test });
    }
    Ok(out)
}

/// Sampled training lengths for one `(lo, hi]` bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
    /// `(student, truncated length)` for every kept student.
    pub lengths: Vec<(usize, usize)>,
}

impl LengthBucket {
    /// The kept students, each truncated to its sampled length.
    pub fn apply(&self, log: &InteractionLog) -> InteractionLog {
        let students: Vec<usize> = self.lengths.iter().map(|(s, _)| *s).collect();
        let lengths: Vec<usize> = self.lengths.iter().map(|(_, l)| *l).collect();
        log.subset_students(&students).prefixes(&lengths)
    }
}

/// Truncates every sequence to a seeded length in `(lo, min(hi, len)]`;
/// sequences of length `<= lo` are dropped.
pub fn cold_start_lengths(log: &InteractionLog, buckets: &[(usize, usize)], seed: u64) -> Result<Vec<LengthBucket>> {
    for w in buckets.windows(2) {
        if w[1].0 < w[0].0 {
            return Err(Error::Invalid("length buckets must be increasing".into()));
        }
    }
    let mut out = Vec::with_capacity(buckets.len());
    for (i, (lo, hi)) in buckets.iter().enumerate() {
        if lo >= hi {
            return Err(Error::Invalid(format!("bucket ({lo}, {hi}] is empty")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + i as u64));
        let lengths: Vec<(usize, usize)> = log
            .sequences
            .iter()
            .enumerate()
            .filter(|(_, seq)| seq.len() > *lo)
            .map(|(s, seq)| (s, rng.random_range(lo + 1..=(*hi).min(seq.len()))))
            .collect();
        if lengths.is_empty() {
            return Err(Error::Invalid(format!("no sequence is longer than {lo} for bucket ({lo}, {hi}]")));
        }
        out.push(LengthBucket { lo: *lo, hi: *hi, lengths });
    }
    Ok(out)
}
