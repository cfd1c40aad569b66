//! Cross-entropy training of the predictor, optionally together with the
//! GCN that feeds the exercise relation matrix.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState};
use crate::embed::{cosine_matrix_tape, gcn_forward_tape, GcnGraph, GcnParams, GcnVars};
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::ingest::InteractionLog;
use crate::model::{score_segment, segment_forward, ModelConfig, ModelParameters, ModelVars, Segment};
use crate::relation::{relation_matrix_tape, RelationConfig, RelationInputs};
use crate::tape::{Tape, Var};

/// Named parameter tensors.
pub type Tensors = BTreeMap<String, Array2<f64>>;

pub const RELATION_TENSOR: &str = "relation.a";
const GCN_PREFIX: &str = "gcn.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Run a gradient check on the first batch before training.
    pub grad_check: bool,
    /// Leading share of each student's sequence used for training.
    pub train_fraction: f64,
    /// Trailing share of the training part held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            epochs: 10,
            learning_rate: 1e-3,
            seed: 7,
            optimizer: OptimizerKind::Adam,
            grad_check: false,
            train_fraction: 0.8,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "train.learning_rate must be a non-negative number, got {}",
                self.learning_rate
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train.train_fraction must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("train.validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy.
pub fn loss(p: &[f64], y: &[bool]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} probabilities for {} labels", p.len(), y.len())));
    }
    if p.is_empty() {
        return Err(Error::Invalid("loss of an empty set".into()));
    }
    let total: f64 = p.iter().zip(y).map(|(p, y)| if *y { -p.ln() } else { -(1.0 - p).ln() }).sum();
    Ok(total / p.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Fit,
    Validation,
    Test,
}

/// Chronological roles per student: the first `train_fraction` of each
/// sequence trains (its last `validation_fraction` validates), the rest
/// tests.
pub fn chronological_split(log: &InteractionLog, train_fraction: f64, validation_fraction: f64) -> Vec<Vec<Role>> {
    log.sequences
        .iter()
        .map(|seq| {
            let n = seq.len();
            let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
            let n_val = ((n_train as f64 * validation_fraction).round() as usize).min(n_train);
            let n_fit = n_train - n_val;
            (0..n)
                .map(|i| {
                    if i < n_fit {
                        Role::Fit
                    } else if i < n_train {
                        Role::Validation
                    } else {
                        Role::Test
                    }
                })
                .collect()
        })
        .collect()
}

/// The training part (fit and validation) of every sequence.
pub fn training_portion(log: &InteractionLog, roles: &[Vec<Role>]) -> InteractionLog {
    let lengths: Vec<usize> = roles.iter().map(|r| r.iter().filter(|x| **x != Role::Test).count()).collect();
    log.prefixes(&lengths)
}

/// A segment and the role of each of its positions; `None` marks context
/// that is scored in another segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSegment {
    pub student: usize,
    pub segment: Segment,
    pub roles: Vec<Option<Role>>,
}

impl ScoredSegment {
    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|r| **r == Some(role)).count()
    }
}

/// Cuts every sequence into segments of at most `max_seq + 1` positions
/// overlapping by one, so each position is scored exactly once with at
/// most `max_seq` predecessors.
pub fn segment_log(log: &InteractionLog, roles: &[Vec<Role>], max_seq: usize) -> Vec<ScoredSegment> {
    let mut out = Vec::new();
    for (student, seq) in log.sequences.iter().enumerate() {
        let mut start = 0;
        while start < seq.len() {
            let first_scored = if start == 0 { 0 } else { start + 1 };
            let end = (start + max_seq + 1).min(seq.len());
            if first_scored >= end {
                break;
            }
            let mut segment = Segment::default();
            let mut seg_roles = Vec::with_capacity(end - start);
            for (i, it) in seq.iter().enumerate().take(end).skip(start) {
                segment.push(it.exercise, it.correct, it.timestamp);
                seg_roles.push(if i >= first_scored {
                    roles.get(student).and_then(|r| r.get(i)).copied()
                } else {
                    None
                });
            }
            out.push(ScoredSegment { student, segment, roles: seg_roles });
            start += max_seq;
        }
    }
    out
}

/// Graph, features and fixed relation inputs for recomputing `A` from the
/// GCN parameters.
#[derive(Debug, Clone)]
pub struct JointRelation {
    pub graph: GcnGraph,
    pub features: Array2<f64>,
    pub inputs: RelationInputs,
    pub config: RelationConfig,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum RelationSource {
    Fixed(Array2<f64>),
    Joint(JointRelation),
}

pub fn gcn_tensors(params: &GcnParams) -> Tensors {
    params.named().into_iter().map(|(n, t)| (n, t.clone())).collect()
}

pub fn gcn_from_tensors(tensors: &Tensors) -> Result<GcnParams> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    while let (Some(w), Some(b)) =
        (tensors.get(&format!("gcn.w{}", weights.len())), tensors.get(&format!("gcn.b{}", biases.len())))
    {
        weights.push(w.clone());
        biases.push(b.clone());
    }
    let extra = tensors.keys().filter(|k| k.starts_with(GCN_PREFIX)).count();
    if extra != 2 * weights.len() || weights.is_empty() {
        return Err(Error::Checkpoint("gcn tensors are not a contiguous layer stack".into()));
    }
    Ok(GcnParams { weights, biases })
}

pub fn model_from_tensors(tensors: &Tensors) -> ModelParameters {
    ModelParameters {
        tensors: tensors
            .iter()
            .filter(|(k, _)| !k.starts_with(GCN_PREFIX) && k.as_str() != RELATION_TENSOR)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    }
}

fn strict_past(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(r, c)| if c < r { 1.0 } else { 0.0 })
}

/// Records `A` for the current tensors; `None` for a fixed matrix.
fn relation_node(tape: &mut Tape, source: &RelationSource, vars: &BTreeMap<String, Var>) -> Result<Option<Var>> {
    match source {
        RelationSource::Fixed(_) => Ok(None),
        RelationSource::Joint(j) => {
            let n_layers = vars.keys().filter(|k| k.starts_with("gcn.w")).count();
            let gcn = GcnVars {
                weights: (0..n_layers).map(|l| vars[&format!("gcn.w{l}")]).collect(),
                biases: (0..n_layers).map(|l| vars[&format!("gcn.b{l}")]).collect(),
            };
            let features = tape.leaf(j.features.clone());
            let nodes = gcn_forward_tape(tape, &j.graph, features, &gcn);
            let rows: Vec<usize> = (0..j.graph.layout.n_exercises).map(|e| j.graph.layout.exercise(e)).collect();
            let exercise = tape.gather_rows(nodes, rows);
            let similarity = cosine_matrix_tape(tape, exercise);
            Ok(Some(relation_matrix_tape(tape, similarity, &j.inputs, &j.config)))
        }
    }
}

/// Current `A` for `tensors`.
pub fn current_relation(source: &RelationSource, tensors: &Tensors) -> Result<Array2<f64>> {
    match source {
        RelationSource::Fixed(a) => Ok(a.clone()),
        RelationSource::Joint(_) => {
            let mut tape = Tape::new();
            let vars = register(&mut tape, tensors);
            let node = relation_node(&mut tape, source, &vars)?.expect("joint relation node");
            Ok(tape.value(node).clone())
        }
    }
}

fn register(tape: &mut Tape, tensors: &Tensors) -> BTreeMap<String, Var> {
    tensors.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone()))).collect()
}

/// Mean cross-entropy over the `role` positions of a set of segments.
pub struct BatchLoss<'a> {
    pub source: &'a RelationSource,
    pub model: &'a ModelConfig,
    pub segments: Vec<&'a ScoredSegment>,
    pub role: Role,
}

struct Recorded {
    tape: Tape,
    vars: BTreeMap<String, Var>,
    loss: Var,
}

impl BatchLoss<'_> {
    pub fn positions(&self) -> usize {
        self.segments.iter().map(|s| s.count(self.role)).sum()
    }

    fn record(&self, tensors: &Tensors, mut rng: Option<&mut ChaCha8Rng>) -> Result<Recorded> {
        let count = self.positions();
        if count == 0 {
            return Err(Error::Invalid("batch has no positions to score".into()));
        }
        let mut tape = Tape::new();
        let vars = register(&mut tape, tensors);
        let model_vars = ModelVars {
            vars: vars.iter().filter(|(k, _)| !k.starts_with(GCN_PREFIX)).map(|(k, v)| (k.clone(), *v)).collect(),
        };
        let a_node = relation_node(&mut tape, self.source, &vars)?;
        let mut total: Option<Var> = None;
        for seg in &self.segments {
            if seg.count(self.role) == 0 {
                continue;
            }
            let n = seg.segment.len();
            let relation = match (self.source, a_node) {
                (RelationSource::Fixed(a), _) => tape.leaf(seg.segment.relation_rows(a)),
                (RelationSource::Joint(_), Some(a)) => {
                    let gathered = tape.gather2(a, seg.segment.exercises.clone(), seg.segment.exercises.clone());
                    tape.mul_const(gathered, strict_past(n))
                }
                (RelationSource::Joint(_), None) => unreachable!("joint source records a node"),
            };
            let trace =
                segment_forward(&mut tape, &model_vars, self.model, &seg.segment, relation, rng.as_deref_mut())?;
            let labels = Array2::from_shape_fn((n, 1), |(i, _)| if seg.segment.responses[i] { 1.0 } else { 0.0 });
            let weights =
                Array2::from_shape_fn((n, 1), |(i, _)| if seg.roles[i] == Some(self.role) { 1.0 } else { 0.0 });
            let term = tape.bce_with_logits(trace.logits, labels, weights);
            total = Some(match total {
                Some(t) => tape.add(t, term),
                None => term,
            });
        }
        let loss = tape.scale(total.expect("nonempty batch"), 1.0 / count as f64);
        Ok(Recorded { tape, vars, loss })
    }

    /// Loss and gradients for every tensor; dropout when `rng` is given.
    pub fn loss_and_gradient(&self, tensors: &Tensors, rng: Option<&mut ChaCha8Rng>) -> Result<(f64, Tensors)> {
        let rec = self.record(tensors, rng)?;
        let value = rec.tape.scalar(rec.loss);
        let grads = rec.tape.backward(rec.loss);
        let out =
            rec.vars.iter().map(|(name, var)| (name.clone(), grads.get_or_zeros(*var, tensors[name].dim()))).collect();
        Ok((value, out))
    }
}

impl Objective for BatchLoss<'_> {
    fn value(&self, params: &Tensors) -> Result<(f64, Vec<bool>)> {
        let rec = self.record(params, None)?;
        Ok((rec.tape.scalar(rec.loss), rec.tape.activation_pattern()))
    }

    fn gradient(&self, params: &Tensors) -> Result<Tensors> {
        Ok(self.loss_and_gradient(params, None)?.1)
    }
}

/// A differentiable function of named tensors. `value` also returns the
/// activation pattern, so checks can skip points where it changes.
pub trait Objective {
    fn value(&self, params: &Tensors) -> Result<(f64, Vec<bool>)>;
    fn gradient(&self, params: &Tensors) -> Result<Tensors>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Sampled coordinates per tensor (all when the tensor is smaller).
    pub coords_per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { epsilon: 1e-5, coords_per_tensor: 6, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates skipped because a ReLU or threshold flipped inside the
    /// difference interval.
    pub skipped: usize,
    pub worst: Option<(String, usize, usize)>,
}

/// Central differences on sampled coordinates against `gradient`.
pub fn gradient_check(
    objective: &dyn Objective,
    params: &Tensors,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let analytic = objective.gradient(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, skipped: 0, worst: None };
    let mut probe = params.clone();
    for (name, tensor) in params {
        let (rows, cols) = tensor.dim();
        let mut coords: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
        coords.shuffle(&mut rng);
        coords.truncate(config.coords_per_tensor);
        for (r, c) in coords {
            let base = tensor[[r, c]];
            probe.get_mut(name).expect("probe tensor")[[r, c]] = base + config.epsilon;
            let (plus, pattern_plus) = objective.value(&probe)?;
            probe.get_mut(name).expect("probe tensor")[[r, c]] = base - config.epsilon;
            let (minus, pattern_minus) = objective.value(&probe)?;
            probe.get_mut(name).expect("probe tensor")[[r, c]] = base;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("objective near `{name}`[{r},{c}]")));
            }
            if pattern_plus != pattern_minus {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * config.epsilon);
            let exact = analytic.get(name).map_or(0.0, |g| g[[r, c]]);
            if !exact.is_finite() {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
            let denom = exact.abs().max(numeric.abs()).max(config.floor);
            let err = (exact - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((name.clone(), r, c));
            }
        }
    }
    Ok(report)
}

/// Per-tensor optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    first: Tensors,
    second: Tensors,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            first: Tensors::new(),
            second: Tensors::new(),
        }
    }

    pub fn step(&mut self, params: &mut Tensors, grads: &Tensors) {
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, g) in grads {
                    if let Some(p) = params.get_mut(name) {
                        p.scaled_add(-lr, g);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
                let c1 = 1.0 - b1.powi(self.steps as i32);
                let c2 = 1.0 - b2.powi(self.steps as i32);
                for (name, g) in grads {
                    let Some(p) = params.get_mut(name) else { continue };
                    let m = self.first.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
                    let v = self.second.entry(name.clone()).or_insert_with(|| Array2::zeros(g.dim()));
                    ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, g| {
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: Option<f64>,
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[EpochRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["epoch", "loss", "val_auc"])?;
    for r in curve {
        let auc = r.val_auc.map(|a| a.to_string()).unwrap_or_default();
        writer.write_record([r.epoch.to_string(), r.loss.to_string(), auc])?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub tensors: Tensors,
    /// `A` at the best epoch.
    pub relation: Array2<f64>,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: u64,
    pub grad_check: Option<GradCheckReport>,
    pub checkpoint: Checkpoint,
}

impl TrainOutcome {
    pub fn model(&self) -> ModelParameters {
        model_from_tensors(&self.tensors)
    }
}

/// Scores the `role` positions of `segments` in eval mode.
pub fn predict_role(
    segments: &[ScoredSegment],
    role: Role,
    a: &Array2<f64>,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for seg in segments.iter().filter(|s| s.count(role) > 0) {
        let p = score_segment(&seg.segment, a, params, config)?;
        for (i, r) in seg.roles.iter().enumerate() {
            if *r == Some(role) {
                scores.push(p[i]);
                labels.push(seg.segment.responses[i]);
            }
        }
    }
    Ok((scores, labels))
}

fn validation_auc(
    segments: &[ScoredSegment],
    a: &Array2<f64>,
    tensors: &Tensors,
    config: &ModelConfig,
) -> Result<Option<f64>> {
    let (scores, labels) = predict_role(segments, Role::Validation, a, &model_from_tensors(tensors), config)?;
    Ok(auc(&scores, &labels).ok())
}

/// Checkpoint holding `tensors`, `A` and a config snapshot.
pub fn make_checkpoint(
    tensors: &Tensors,
    relation: &Array2<f64>,
    config: serde_json::Value,
    step: u64,
    rng: &ChaCha8Rng,
) -> Checkpoint {
    let mut all = tensors.clone();
    all.insert(RELATION_TENSOR.into(), relation.clone());
    Checkpoint::new(config, all, step, Some(RngState::capture(rng)))
}

/// Predictor parameters, `A` and model config recovered from a checkpoint.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: ModelParameters,
    pub relation: Array2<f64>,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ckpt.config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("config has no `model` section".into()))?,
        )?;
        config.validate()?;
        let params = model_from_tensors(&ckpt.tensors);
        params.validate(&config)?;
        let relation = ckpt.tensor(RELATION_TENSOR)?.clone();
        if relation.dim() != (params.n_exercises(), params.n_exercises()) {
            return Err(Error::Checkpoint(format!(
                "relation matrix {:?} for {} exercises",
                relation.dim(),
                params.n_exercises()
            )));
        }
        Ok(TrainedModel { config, params, relation })
    }
}

/// Trains from `initial` tensors (predictor, plus GCN for a joint source).
/// The returned checkpoint is the best validation epoch.
pub fn train(
    segments: &[ScoredSegment],
    source: &RelationSource,
    initial: Tensors,
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    config.validate()?;
    model_from_tensors(&initial).validate(model_config)?;
    if matches!(source, RelationSource::Joint(_)) {
        gcn_from_tensors(&initial)?;
    }
    let fit: Vec<usize> = (0..segments.len()).filter(|i| segments[*i].count(Role::Fit) > 0).collect();
    if fit.is_empty() {
        return Err(Error::Invalid("no training positions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = initial;
    let grad_check = if config.grad_check {
        let batch = BatchLoss {
            source,
            model: model_config,
            segments: fit.iter().take(2).map(|i| &segments[*i]).collect(),
            role: Role::Fit,
        };
        let report = gradient_check(
            &batch,
            &tensors,
            &GradCheckConfig { coords_per_tensor: 3, seed: config.seed, ..Default::default() },
        )?;
        log::info!(
            "gradient check: max relative error {:.3e} over {} coordinates",
            report.max_relative_error,
            report.checked
        );
        Some(report)
    } else {
        None
    };
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Tensors, Array2<f64>)> = None;
    let mut order = fit.clone();
    let snapshot = serde_json::json!({ "model": model_config, "train": config });
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        let mut positions = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch = BatchLoss {
                source,
                model: model_config,
                segments: chunk.iter().map(|i| &segments[*i]).collect(),
                role: Role::Fit,
            };
            let count = batch.positions();
            let (value, grads) = batch.loss_and_gradient(&tensors, Some(&mut rng))?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: optimizer.steps as usize + 1,
                    reason: format!("loss {value}"),
                });
            }
            optimizer.step(&mut tensors, &grads);
            weighted_loss += value * count as f64;
            positions += count;
        }
        let relation = current_relation(source, &tensors)?;
        let val_auc = validation_auc(segments, &relation, &tensors, model_config)?;
        let loss = weighted_loss / positions as f64;
        log::info!("epoch {epoch}: loss {loss:.5}, validation AUC {val_auc:?}");
        curve.push(EpochRecord { epoch, loss, val_auc });
        let score = val_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(b, ..)| score > *b) {
            best = Some((score, epoch, tensors.clone(), relation));
        }
    }
    let (_, best_epoch, tensors, relation) = best.expect("at least one epoch");
    let checkpoint = make_checkpoint(&tensors, &relation, snapshot, optimizer.steps, &rng);
    Ok(TrainOutcome { tensors, relation, curve, best_epoch, steps: optimizer.steps, grad_check, checkpoint })
}

/// Draws independent uniform values; handy for random test instances.
pub fn random_tensors(shapes: &[(String, (usize, usize))], scale: f64, rng: &mut ChaCha8Rng) -> Tensors {
    shapes
        .iter()
        .map(|(n, s)| (n.clone(), Array2::from_shape_simple_fn(*s, || rng.random_range(-scale..=scale))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth::{synthetic_benchmark, SyntheticConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn loss_examples() {
        assert_abs_diff_eq!(loss(&[0.5, 0.5], &[true, false]).unwrap(), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(loss(&[0.9], &[true]).unwrap(), 0.105_360_515_657_826_3, epsilon = 1e-15);
        assert!(loss(&[1.0 - 1e-15, 1e-15], &[true, false]).unwrap() < 1e-14);
        assert!(loss(&[0.5], &[true, false]).is_err());
    }

    struct Linear(Tensors);

    impl Objective for Linear {
        fn value(&self, params: &Tensors) -> Result<(f64, Vec<bool>)> {
            Ok((params.iter().map(|(n, t)| (t * &self.0[n]).sum()).sum(), vec![]))
        }
        fn gradient(&self, _: &Tensors) -> Result<Tensors> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn gradient_check_on_linear_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shapes = vec![("a".to_string(), (3, 4)), ("b".to_string(), (1, 5))];
        let c = random_tensors(&shapes, 1.0, &mut rng);
        let theta = random_tensors(&shapes, 0.1, &mut rng);
        let cfg = GradCheckConfig { coords_per_tensor: 100, ..Default::default() };
        let r = gradient_check(&Linear(c), &theta, &cfg).unwrap();
        assert_eq!(r.checked, 17);
        assert!(r.max_relative_error < 1e-10, "{}", r.max_relative_error);
        let zero = random_tensors(&shapes, 0.0, &mut rng);
        assert_eq!(gradient_check(&Linear(zero), &theta, &cfg).unwrap().max_relative_error, 0.0);
    }

    #[test]
    fn roles_are_chronological() {
        let b =
            synthetic_benchmark(&SyntheticConfig { n_students: 3, n_steps: 50, ..SyntheticConfig::default() }).unwrap();
        let roles = chronological_split(&b.log, 0.8, 0.1);
        let r = &roles[0];
        assert_eq!(r.iter().filter(|x| **x == Role::Test).count(), 10);
        assert_eq!(r.iter().filter(|x| **x == Role::Validation).count(), 4);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(training_portion(&b.log, &roles).sequences[0].len(), 40);
    }

    #[test]
    fn segments_score_each_position_once() {
        let b =
            synthetic_benchmark(&SyntheticConfig { n_students: 2, n_steps: 23, ..SyntheticConfig::default() }).unwrap();
        let roles = chronological_split(&b.log, 0.8, 0.1);
        let segs = segment_log(&b.log, &roles, 5);
        let per_student: usize = segs.iter().filter(|s| s.student == 0).map(|s| s.roles.iter().flatten().count()).sum();
        assert_eq!(per_student, 23);
        assert!(segs.iter().all(|s| s.segment.len() <= 6));
        assert_eq!(segs[1].roles[0], None);
        assert_eq!(segs[1].segment.exercises[0], segs[0].segment.exercises[5]);
    }

    fn tiny_setup() -> (Vec<ScoredSegment>, RelationSource, Tensors, ModelConfig) {
        let b = synthetic_benchmark(&SyntheticConfig {
            n_students: 10,
            n_steps: 12,
            exercises_per_skill: 3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mc = ModelConfig { d_model: 4, max_seq: 6, clip_k: 2, ffn_dim: 4, dropout: 0.0, ..ModelConfig::default() };
        let roles = chronological_split(&b.log, 0.8, 0.1);
        let segs = segment_log(&b.log, &roles, mc.max_seq);
        let a = Array2::from_shape_fn((6, 6), |(i, j)| if i != j { 0.7 + 0.01 * (i + j) as f64 } else { 0.0 });
        let params = ModelParameters::init(&mc, 6, 3);
        (segs, RelationSource::Fixed(a), params.tensors, mc)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (segs, source, init, mc) = tiny_setup();
        for optimizer in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let cfg = TrainConfig { epochs: 1, batch_size: 4, learning_rate: 0.0, optimizer, ..TrainConfig::default() };
            let out = train(&segs, &source, init.clone(), &mc, &cfg).unwrap();
            assert_eq!(out.curve.len(), 1);
            assert!(out
                .tensors
                .iter()
                .all(|(n, t)| t.iter().zip(init[n].iter()).all(|(a, b)| a.to_bits() == b.to_bits())));
        }
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let (segs, source, init, mc) = tiny_setup();
        let batch = BatchLoss { source: &source, model: &mc, segments: segs.iter().collect(), role: Role::Fit };
        let (before, grads) = batch.loss_and_gradient(&init, None).unwrap();
        for lr in [1e-3, 1e-4] {
            let mut stepped = init.clone();
            Optimizer::new(OptimizerKind::Sgd, lr).step(&mut stepped, &grads);
            assert!(batch.value(&stepped).unwrap().0 < before);
            let mut stepped = init.clone();
            Optimizer::new(OptimizerKind::Adam, lr).step(&mut stepped, &grads);
            assert!(batch.value(&stepped).unwrap().0 < before);
        }
    }

    #[test]
    fn training_is_seed_deterministic() {
        let (segs, source, init, mc) = tiny_setup();
        let cfg = TrainConfig { epochs: 2, batch_size: 3, learning_rate: 1e-2, ..TrainConfig::default() };
        let a = train(&segs, &source, init.clone(), &mc, &cfg).unwrap();
        let b = train(&segs, &source, init, &mc, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn model_gradient_matches_differences() {
        let (segs, source, init, mc) = tiny_setup();
        let batch = BatchLoss { source: &source, model: &mc, segments: segs.iter().take(3).collect(), role: Role::Fit };
        let r = gradient_check(&batch, &init, &GradCheckConfig { coords_per_tensor: 8, ..Default::default() }).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
        assert!(r.checked > 50);
    }
}
