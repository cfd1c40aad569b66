//! Position-relation-forgetting attention predictor.
//!
//! A sequence segment of `L` interactions is scored in one pass. Row `n` of
//! every stage belongs to interaction `n`:
//!
//! 1. relative-position self-attention over positions `j <= n` gives `Z`;
//! 2. relation attention from the embedding of exercise `n` over `Z_i`,
//!    `i < n`, mixed with the normalized relation row `R^E`, gives `H`;
//! 3. the forgetting layer mixes `H` with the γ-weighted decay
//!    `ξ1·exp(−ξ2·Δ)` broadcast through a learned vector;
//! 4. a ReLU feed-forward block and a sigmoid produce `p(correct)`.
//!
//! Predicting interaction `n` never reads its own response, so the segment
//! pass is equivalent to scoring each prefix separately.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::ExerciseRelationMatrix;
use crate::tape::{sigmoid, Tape, Var};

pub const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub max_seq: usize,
    pub clip_k: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_dim: usize,
    pub delta: f64,
    pub delta_f: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub dropout: f64,
    pub use_position_values: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 200,
            max_seq: 200,
            clip_k: 16,
            heads: 1,
            ffn_dim: 200,
            delta: 0.5,
            delta_f: 0.5,
            xi1: 1.0,
            xi2: 0.1,
            dropout: 1e-2,
            use_position_values: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.max_seq == 0 || self.clip_k == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return fail("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("model.d_model {} not divisible by model.heads {}", self.d_model, self.heads));
        }
        for (name, v) in [("delta", self.delta), ("delta_f", self.delta_f)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("model.{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.xi1 > 0.0 && self.xi2 > 0.0) {
            return fail("model.xi1 and model.xi2 must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("model.dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Parameter names, in a fixed order.
pub mod names {
    pub const INTERACTION: &str = "input.interaction";
    pub const EXERCISE: &str = "input.exercise";
    pub const POS_KEY: &str = "pos.key";
    pub const POS_VALUE: &str = "pos.value";
    pub const SELF_Q: &str = "self.wq";
    pub const SELF_K: &str = "self.wk";
    pub const SELF_V: &str = "self.wv";
    pub const REL_Q: &str = "rel.wq";
    pub const REL_K: &str = "rel.wk";
    pub const REL_V: &str = "rel.wv";
    pub const FORGET_PROJ: &str = "forget.proj";
    pub const FFN_WL: &str = "ffn.wl";
    pub const FFN_BL: &str = "ffn.bl";
    pub const FFN_WS: &str = "ffn.ws";
    pub const FFN_BS: &str = "ffn.bs";
    pub const OUT_W: &str = "out.w";
    pub const OUT_B: &str = "out.b";
}

/// Every trainable tensor of the predictor, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl ModelParameters {
    pub fn shapes(config: &ModelConfig, n_exercises: usize) -> Vec<(&'static str, (usize, usize))> {
        use names::*;
        let d = config.d_model;
        let table = 2 * config.clip_k + 1;
        vec![
            (INTERACTION, (2 * n_exercises, d)),
            (EXERCISE, (n_exercises, d)),
            (POS_KEY, (table, d)),
            (POS_VALUE, (table, d)),
            (SELF_Q, (d, d)),
            (SELF_K, (d, d)),
            (SELF_V, (d, d)),
            (REL_Q, (d, d)),
            (REL_K, (d, d)),
            (REL_V, (d, d)),
            (FORGET_PROJ, (1, d)),
            (FFN_WL, (d, config.ffn_dim)),
            (FFN_BL, (1, config.ffn_dim)),
            (FFN_WS, (config.ffn_dim, d)),
            (FFN_BS, (1, d)),
            (OUT_W, (d, 1)),
            (OUT_B, (1, 1)),
        ]
    }

    /// Seeded uniform weights (`±1/√fan_in`, embeddings `±1/√d`), zero
    /// biases.
    pub fn init(config: &ModelConfig, n_exercises: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::shapes(config, n_exercises) {
            let value = if name.starts_with("ffn.b") || name == names::OUT_B {
                Array2::zeros(shape)
            } else {
                let fan_in = if name.starts_with("input.") || name.starts_with("pos.") || name == names::FORGET_PROJ {
                    config.d_model
                } else {
                    shape.0
                };
                let bound = 1.0 / (fan_in as f64).sqrt();
                Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound))
            };
            tensors.insert(name.to_owned(), value);
        }
        ModelParameters { tensors }
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(config: &ModelConfig, n_exercises: usize) -> Self {
        let tensors =
            Self::shapes(config, n_exercises).into_iter().map(|(n, s)| (n.to_owned(), Array2::zeros(s))).collect();
        ModelParameters { tensors }
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    pub fn n_exercises(&self) -> usize {
        self.get(names::EXERCISE).nrows()
    }

    /// Checks names, shapes and finiteness against `config`.
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let n_exercises = self.tensors.get(names::EXERCISE).map(|t| t.nrows()).unwrap_or(0);
        let expected = Self::shapes(config, n_exercises);
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!("expected {} tensors, found {}", expected.len(), self.tensors.len())));
        }
        for (name, shape) in expected {
            let t = self.tensors.get(name).ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))?;
            if t.dim() != shape {
                return Err(Error::Shape(format!("`{name}` is {:?}, expected {shape:?}", t.dim())));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter `{name}`")));
            }
        }
        Ok(())
    }
}

/// Tape handles for the predictor parameters.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub vars: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn register(tape: &mut Tape, params: &ModelParameters) -> Self {
        let vars = params.tensors.iter().map(|(n, t)| (n.clone(), tape.leaf(t.clone()))).collect();
        ModelVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Inverted dropout on an attention or hidden node.
fn dropout(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = tape.value(x).mapv(|_| if rng.random::<f64>() < rate { 0.0 } else { keep });
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

pub fn causal_mask(len: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, len), |(i, j)| j <= i)
}

pub fn strict_past_mask(len: usize) -> Array2<bool> {
    Array2::from_shape_fn((len, len), |(i, j)| j < i)
}

/// Projections and relative-position tables of the self-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct PositionAttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub pos_key: Var,
    pub pos_value: Var,
}

/// Relative-position self-attention. Returns `Z` and the attention matrix
/// of every head.
#[allow(clippy::too_many_arguments)]
pub fn relative_position_attention(
    tape: &mut Tape,
    x: Var,
    vars: PositionAttentionVars,
    config: &ModelConfig,
    mask: &Array2<bool>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Var, Vec<Var>) {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let q = tape.matmul(x, vars.wq);
    let k = tape.matmul(x, vars.wk);
    let v = tape.matmul(x, vars.wv);
    let mut heads = Vec::with_capacity(config.heads);
    let mut alphas = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = (tape.slice_cols(q, lo, hi), tape.slice_cols(k, lo, hi), tape.slice_cols(v, lo, hi));
        let pk = tape.slice_cols(vars.pos_key, lo, hi);
        let content = tape.matmul_t(qh, kh);
        let by_offset = tape.matmul_t(qh, pk);
        let position = tape.gather_rel(by_offset, config.clip_k);
        let scores = tape.add(content, position);
        let scores = tape.scale(scores, scale);
        let alpha = tape.masked_softmax(scores, mask);
        alphas.push(alpha);
        let alpha = dropout(tape, alpha, config.dropout, rng.as_deref_mut());
        let mut z = tape.matmul(alpha, vh);
        if config.use_position_values {
            let pv = tape.slice_cols(vars.pos_value, lo, hi);
            let binned = tape.bin_rel(alpha, config.clip_k);
            let pos = tape.matmul(binned, pv);
            z = tape.add(z, pos);
        }
        heads.push(z);
    }
    (tape.concat_cols(&heads), alphas)
}

#[derive(Debug, Clone, Copy)]
pub struct RelationAttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Output of [`relation_attention`].
#[derive(Debug, Clone)]
pub struct RelationAttention {
    pub h: Var,
    pub alphas: Vec<Var>,
    pub gammas: Vec<Var>,
}

/// Relation attention: `γ = δ·α + (1 − δ)·R̃` with `R̃` the row-normalized
/// relation rows; rows without any relation fall back to `γ = α`.
#[allow(clippy::too_many_arguments)]
pub fn relation_attention(
    tape: &mut Tape,
    z: Var,
    queries: Var,
    relation: Var,
    vars: RelationAttentionVars,
    config: &ModelConfig,
    mask: &Array2<bool>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> RelationAttention {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let normalized = tape.row_normalize(relation);
    let weights: Vec<f64> =
        tape.value(relation).rows().into_iter().map(|r| if r.sum() > 0.0 { config.delta } else { 1.0 }).collect();
    let relation_part = tape.scale(normalized, 1.0 - config.delta);
    let q = tape.matmul(queries, vars.wq);
    let k = tape.matmul(z, vars.wk);
    let v = tape.matmul(z, vars.wv);
    let mut heads = Vec::with_capacity(config.heads);
    let mut alphas = Vec::with_capacity(config.heads);
    let mut gammas = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = (tape.slice_cols(q, lo, hi), tape.slice_cols(k, lo, hi), tape.slice_cols(v, lo, hi));
        let scores = tape.matmul_t(qh, kh);
        let scores = tape.scale(scores, scale);
        let alpha = tape.masked_softmax(scores, mask);
        alphas.push(alpha);
        let alpha = dropout(tape, alpha, config.dropout, rng.as_deref_mut());
        let attention_part = tape.row_scale(alpha, weights.clone());
        let gamma = tape.add(attention_part, relation_part);
        gammas.push(gamma);
        heads.push(tape.matmul(gamma, vh));
    }
    RelationAttention { h: tape.concat_cols(&heads), alphas, gammas }
}

/// `R^F_i = ξ1·exp(−ξ2·Δ_i)` for gaps in hours.
pub fn forgetting_curve(gaps: &[f64], xi1: f64, xi2: f64) -> Result<Vec<f64>> {
    gaps.iter()
        .map(|g| {
            if *g < 0.0 || g.is_nan() {
                Err(Error::Invalid(format!("negative time gap {g}")))
            } else {
                Ok(xi1 * (-xi2 * g).exp())
            }
        })
        .collect()
}

/// Forgetting layer: `O = δ_F·H + (1 − δ_F)·(Σ_i γ_i R^F_i)·v`, where the
/// decay matrix holds `R^F` on the strict past of every row and `v` is the
/// learned broadcast vector. Multi-head γ are averaged.
pub fn forgetting(tape: &mut Tape, h: Var, gammas: &[Var], decay: Array2<f64>, proj: Var, delta_f: f64) -> Var {
    let mut pooled: Option<Var> = None;
    for gamma in gammas {
        let weighted = tape.mul_const(*gamma, decay.clone());
        let s = tape.row_sum(weighted);
        pooled = Some(match pooled {
            Some(p) => tape.add(p, s),
            None => s,
        });
    }
    let pooled = tape.scale(pooled.expect("at least one head"), 1.0 / gammas.len() as f64);
    let broadcast = tape.matmul(pooled, proj);
    let kept = tape.scale(h, delta_f);
    let decayed = tape.scale(broadcast, 1.0 - delta_f);
    tape.add(kept, decayed)
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wl: Var,
    pub bl: Var,
    pub ws: Var,
    pub bs: Var,
    pub wo: Var,
    pub bo: Var,
}

/// `F = ReLU(O W_l + b_l) W_s + b_s`, returns the logits `F W + b`.
pub fn prediction_head(
    tape: &mut Tape,
    o: Var,
    vars: HeadVars,
    dropout_rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let hidden = tape.matmul(o, vars.wl);
    let hidden = tape.add_row(hidden, vars.bl);
    let hidden = tape.relu(hidden);
    let hidden = dropout(tape, hidden, dropout_rate, rng);
    let f = tape.matmul(hidden, vars.ws);
    let f = tape.add_row(f, vars.bs);
    let logits = tape.matmul(f, vars.wo);
    tape.add_row(logits, vars.bo)
}

/// Scalar form of the prediction head.
pub fn predict(o: &[f64], params: &ModelParameters) -> f64 {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params);
    let o = tape.leaf(Array2::from_shape_vec((1, o.len()), o.to_vec()).expect("row vector"));
    let logits = prediction_head(&mut tape, o, head_vars(&vars), 0.0, None);
    sigmoid(tape.scalar(logits))
}

fn head_vars(vars: &ModelVars) -> HeadVars {
    use names::*;
    HeadVars {
        wl: vars.get(FFN_WL),
        bl: vars.get(FFN_BL),
        ws: vars.get(FFN_WS),
        bs: vars.get(FFN_BS),
        wo: vars.get(OUT_W),
        bo: vars.get(OUT_B),
    }
}

/// A contiguous run of one student's interactions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Segment {
    pub exercises: Vec<usize>,
    pub responses: Vec<bool>,
    pub timestamps: Vec<i64>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.exercises.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exercises.is_empty()
    }

    pub fn push(&mut self, exercise: usize, response: bool, timestamp: i64) {
        self.exercises.push(exercise);
        self.responses.push(response);
        self.timestamps.push(timestamp);
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.exercises.iter().zip(&self.responses).map(|(e, r)| 2 * e + usize::from(*r)).collect()
    }

    /// Strict-past relation rows `R[n, i] = A[e_n, e_i]` for `i < n`.
    pub fn relation_rows(&self, a: &Array2<f64>) -> Array2<f64> {
        let n = self.len();
        Array2::from_shape_fn((n, n), |(r, c)| if c < r { a[[self.exercises[r], self.exercises[c]]] } else { 0.0 })
    }

    /// Strict-past decay `ξ1·exp(−ξ2·(t_n − t_i)/3600)`.
    pub fn decay(&self, xi1: f64, xi2: f64) -> Result<Array2<f64>> {
        let n = self.len();
        let mut out = Array2::zeros((n, n));
        for r in 0..n {
            let gaps: Vec<f64> =
                (0..r).map(|c| (self.timestamps[r] - self.timestamps[c]) as f64 / SECONDS_PER_HOUR).collect();
            for (c, v) in forgetting_curve(&gaps, xi1, xi2)?.into_iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        Ok(out)
    }
}

/// Intermediate nodes of one segment pass.
#[derive(Debug, Clone)]
pub struct SegmentTrace {
    pub z: Var,
    pub self_alphas: Vec<Var>,
    pub relation: RelationAttention,
    pub o: Var,
    pub logits: Var,
}

/// Records a full segment pass. `relation` is the `L x L` strict-past
/// relation node.
pub fn segment_forward(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    segment: &Segment,
    relation: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SegmentTrace> {
    use names::*;
    let n = segment.len();
    if n == 0 {
        return Err(Error::Invalid("empty segment".into()));
    }
    if n > config.max_seq + 1 {
        return Err(Error::Invalid(format!("segment of {n} exceeds max_seq {} plus the query", config.max_seq)));
    }
    if tape.value(relation).dim() != (n, n) {
        return Err(Error::Shape(format!("relation rows {:?} for a segment of {n}", tape.value(relation).dim())));
    }
    let n_exercises = tape.value(vars.get(EXERCISE)).nrows();
    if let Some(bad) = segment.exercises.iter().find(|e| **e >= n_exercises) {
        return Err(Error::Unknown { kind: "exercise", id: bad.to_string() });
    }
    let decay = segment.decay(config.xi1, config.xi2)?;
    let x = tape.gather_rows(vars.get(INTERACTION), segment.tokens());
    let queries = tape.gather_rows(vars.get(EXERCISE), segment.exercises.clone());
    let pos_vars = PositionAttentionVars {
        wq: vars.get(SELF_Q),
        wk: vars.get(SELF_K),
        wv: vars.get(SELF_V),
        pos_key: vars.get(POS_KEY),
        pos_value: vars.get(POS_VALUE),
    };
    let (z, self_alphas) = relative_position_attention(tape, x, pos_vars, config, &causal_mask(n), rng.as_deref_mut());
    let rel_vars = RelationAttentionVars { wq: vars.get(REL_Q), wk: vars.get(REL_K), wv: vars.get(REL_V) };
    let relation =
        relation_attention(tape, z, queries, relation, rel_vars, config, &strict_past_mask(n), rng.as_deref_mut());
    let o = forgetting(tape, relation.h, &relation.gammas, decay, vars.get(FORGET_PROJ), config.delta_f);
    let logits = prediction_head(tape, o, head_vars(vars), config.dropout, rng);
    Ok(SegmentTrace { z, self_alphas, relation, o, logits })
}

/// Eval-mode probabilities for every position of `segment`; position `n`
/// is predicted from positions `< n` only.
pub fn score_segment(
    segment: &Segment,
    a: &Array2<f64>,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params);
    let relation = tape.leaf(segment.relation_rows(a));
    let trace = segment_forward(&mut tape, &vars, config, segment, relation, None)?;
    Ok(tape.value(trace.logits).iter().map(|z| sigmoid(*z)).collect())
}

/// One query: a window of past interactions, the next exercise, its
/// relation vector and the time gaps to it.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub window: Segment,
    pub query: usize,
    pub query_time: i64,
    /// `R^E`, one entry per window position.
    pub relation: Vec<f64>,
    /// `Δ_i` in hours.
    pub gaps: Vec<f64>,
}

impl SequenceBatch {
    /// Derives `R^E` from `a` and the gaps from the timestamps.
    pub fn new(window: Segment, query: usize, query_time: i64, a: &ExerciseRelationMatrix) -> Result<Self> {
        let relation = crate::relation::relation_vector(a, &window.exercises, query)?;
        let gaps = window.timestamps.iter().map(|t| (query_time - t) as f64 / SECONDS_PER_HOUR).collect();
        let batch = SequenceBatch { window, query, query_time, relation, gaps };
        batch.validate(usize::MAX)?;
        Ok(batch)
    }

    pub fn validate(&self, max_seq: usize) -> Result<()> {
        let n = self.window.len();
        if self.window.responses.len() != n || self.window.timestamps.len() != n {
            return Err(Error::Shape("window columns differ in length".into()));
        }
        if n > max_seq {
            return Err(Error::Invalid(format!("window of {n} exceeds max_seq {max_seq}")));
        }
        if self.relation.len() != n || self.gaps.len() != n {
            return Err(Error::Shape(format!(
                "R^E has {} and Δ has {} entries for a window of {n}",
                self.relation.len(),
                self.gaps.len()
            )));
        }
        if let Some(g) = self.gaps.iter().find(|g| **g < 0.0 || g.is_nan()) {
            return Err(Error::Invalid(format!("negative time gap {g}")));
        }
        Ok(())
    }

    /// The window followed by the query as a segment; the query row
    /// carries `R^E` and its timestamp is placed so the gaps are preserved.
    fn as_segment(&self) -> (Segment, Array2<f64>) {
        let mut seg = self.window.clone();
        seg.push(self.query, false, self.query_time);
        let n = seg.len();
        let mut rows = Array2::zeros((n, n));
        for (i, v) in self.relation.iter().enumerate() {
            rows[[n - 1, i]] = *v;
        }
        (seg, rows)
    }
}

/// Probability that the next answer is correct. Dropout is active only
/// when a training RNG is supplied.
pub fn forward(
    batch: &SequenceBatch,
    params: &ModelParameters,
    config: &ModelConfig,
    train_rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    batch.validate(config.max_seq)?;
    let (segment, rows) = batch.as_segment();
    let mut tape = Tape::new();
    let vars = ModelVars::register(&mut tape, params);
    let relation = tape.leaf(rows);
    let trace = segment_forward(&mut tape, &vars, config, &segment, relation, train_rng)?;
    let logits = tape.value(trace.logits);
    let p = sigmoid(logits[[logits.nrows() - 1, 0]]);
    if !p.is_finite() {
        return Err(Error::NonFinite("prediction".into()));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, s};

    fn small_config(d: usize, k: usize) -> ModelConfig {
        ModelConfig { d_model: d, max_seq: 8, clip_k: k, ffn_dim: d, dropout: 0.0, ..ModelConfig::default() }
    }

    fn row(v: &Array2<f64>, r: usize) -> Vec<f64> {
        v.row(r).to_vec()
    }

    fn vec_mat(x: &[f64], m: &Array2<f64>) -> Vec<f64> {
        (0..m.ncols()).map(|c| x.iter().enumerate().map(|(r, v)| v * m[[r, c]]).sum()).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn softmax(e: &[f64]) -> Vec<f64> {
        let m = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = e.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = ex.iter().sum();
        ex.iter().map(|v| v / s).collect()
    }

    /// Loop-by-loop forward of one query, single head.
    fn oracle_forward(b: &SequenceBatch, p: &ModelParameters, c: &ModelConfig) -> f64 {
        use names::*;
        let d = c.d_model;
        let sd = (d as f64).sqrt();
        let k = c.clip_k as i64;
        let clip = |off: i64| (off.clamp(-k, k) + k) as usize;
        let m = b.window.len();
        let xs: Vec<Vec<f64>> = b.window.tokens().iter().map(|t| row(p.get(INTERACTION), *t)).collect();
        let mut zs = Vec::new();
        for i in 0..m {
            let q = vec_mat(&xs[i], p.get(SELF_Q));
            let e: Vec<f64> = (0..=i)
                .map(|j| {
                    let kj = vec_mat(&xs[j], p.get(SELF_K));
                    let ak = row(p.get(POS_KEY), clip(j as i64 - i as i64));
                    (dot(&q, &kj) + dot(&q, &ak)) / sd
                })
                .collect();
            let a = softmax(&e);
            let mut z = vec![0.0; d];
            for j in 0..=i {
                let vj = vec_mat(&xs[j], p.get(SELF_V));
                let av = row(p.get(POS_VALUE), clip(j as i64 - i as i64));
                for t in 0..d {
                    z[t] += a[j] * (vj[t] + if c.use_position_values { av[t] } else { 0.0 });
                }
            }
            zs.push(z);
        }
        let mut o = vec![0.0; d];
        if m > 0 {
            let q = vec_mat(&row(p.get(EXERCISE), b.query), p.get(REL_Q));
            let e: Vec<f64> = zs.iter().map(|z| dot(&q, &vec_mat(z, p.get(REL_K))) / sd).collect();
            let a = softmax(&e);
            let total: f64 = b.relation.iter().sum();
            let gamma: Vec<f64> = if total > 0.0 {
                a.iter().zip(&b.relation).map(|(a, r)| c.delta * a + (1.0 - c.delta) * r / total).collect()
            } else {
                a
            };
            let mut h = vec![0.0; d];
            for (g, z) in gamma.iter().zip(&zs) {
                for (t, v) in vec_mat(z, p.get(REL_V)).iter().enumerate() {
                    h[t] += g * v;
                }
            }
            let rbar: f64 = gamma.iter().zip(&b.gaps).map(|(g, dt)| g * c.xi1 * (-c.xi2 * dt).exp()).sum();
            let v = row(p.get(FORGET_PROJ), 0);
            for t in 0..d {
                o[t] = c.delta_f * h[t] + (1.0 - c.delta_f) * rbar * v[t];
            }
        }
        let hidden: Vec<f64> =
            vec_mat(&o, p.get(FFN_WL)).iter().zip(p.get(FFN_BL).iter()).map(|(a, b)| (a + b).max(0.0)).collect();
        let f: Vec<f64> =
            vec_mat(&hidden, p.get(FFN_WS)).iter().zip(p.get(FFN_BS).iter()).map(|(a, b)| a + b).collect();
        let logit = vec_mat(&f, p.get(OUT_W))[0] + p.get(OUT_B)[[0, 0]];
        1.0 / (1.0 + (-logit).exp())
    }

    fn batch(window: &[(usize, bool, i64)], query: usize, t: i64, relation: Vec<f64>) -> SequenceBatch {
        let mut seg = Segment::default();
        for (e, r, ts) in window {
            seg.push(*e, *r, *ts);
        }
        let gaps = seg.timestamps.iter().map(|s| (t - s) as f64 / SECONDS_PER_HOUR).collect();
        SequenceBatch { window: seg, query, query_time: t, relation, gaps }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { delta: 1.5, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { xi2: 0.0, ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn parameters_have_declared_shapes() {
        let c = small_config(4, 2);
        let p = ModelParameters::init(&c, 5, 1);
        p.validate(&c).unwrap();
        assert_eq!(p.get(names::POS_KEY).dim(), (5, 4));
        assert_eq!(p.get(names::INTERACTION).dim(), (10, 4));
        assert_eq!(p, ModelParameters::init(&c, 5, 1));
        assert_ne!(p, ModelParameters::init(&c, 5, 2));
        let mut bad = p.clone();
        bad.get_mut(names::OUT_B)[[0, 0]] = f64::NAN;
        assert!(bad.validate(&c).is_err());
    }

    fn position_vars(tape: &mut Tape, p: &ModelParameters) -> PositionAttentionVars {
        use names::*;
        PositionAttentionVars {
            wq: tape.leaf(p.get(SELF_Q).clone()),
            wk: tape.leaf(p.get(SELF_K).clone()),
            wv: tape.leaf(p.get(SELF_V).clone()),
            pos_key: tape.leaf(p.get(POS_KEY).clone()),
            pos_value: tape.leaf(p.get(POS_VALUE).clone()),
        }
    }

    #[test]
    fn single_position_attention_selects_itself() {
        let c = ModelConfig { use_position_values: false, ..small_config(3, 2) };
        let p = ModelParameters::init(&c, 2, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.3, -0.7, 1.1]]);
        let vars = position_vars(&mut tape, &p);
        let (z, alphas) = relative_position_attention(&mut tape, x, vars, &c, &causal_mask(1), None);
        assert_eq!(tape.value(alphas[0]), &array![[1.0]]);
        let expected = tape.value(x).dot(p.get(names::SELF_V));
        assert_eq!(tape.value(z), &expected);
    }

    #[test]
    fn equal_scores_give_uniform_rows() {
        let c = small_config(4, 2);
        let mut p = ModelParameters::init(&c, 3, 4);
        p.get_mut(names::SELF_Q).fill(0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_fn((5, 4), |(i, j)| (i * 4 + j) as f64 * 0.1));
        let vars = position_vars(&mut tape, &p);
        let (_, alphas) = relative_position_attention(&mut tape, x, vars, &c, &causal_mask(5), None);
        let a = tape.value(alphas[0]);
        for i in 0..5 {
            for j in 0..5 {
                let expected = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert_abs_diff_eq!(a[[i, j]], expected, epsilon = 1e-15);
            }
            assert_abs_diff_eq!(a.row(i).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn clipped_distances_share_position_terms() {
        let k = 2;
        let c = small_config(4, k);
        let p = ModelParameters::init(&c, 3, 5);
        let n = 8;
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0));
        let vars = position_vars(&mut tape, &p);
        let q = tape.matmul(x, vars.wq);
        let per_offset = tape.matmul_t(q, vars.pos_key);
        let position = tape.gather_rel(per_offset, k);
        let pos = tape.value(position);
        let i = 7;
        // distances k and k + 3 (and k + 5) look up the same table row
        assert_eq!(pos[[i, i - k]], pos[[i, i - k - 3]]);
        assert_eq!(pos[[i, i - k]], pos[[i, i - k - 5]]);
        assert_ne!(pos[[i, i - k]], pos[[i, i - k + 1]]);
    }

    fn relation_setup(
        delta: f64,
        relation: Array2<f64>,
        zero_query: bool,
    ) -> (Tape, RelationAttention, Var, Array2<f64>) {
        let c = ModelConfig { delta, ..small_config(2, 2) };
        let p = ModelParameters::init(&c, 2, 9);
        let mut tape = Tape::new();
        let n = relation.nrows();
        let z = tape.leaf(Array2::from_shape_fn((n, 2), |(i, j)| (i + 2 * j) as f64 * 0.5 - 0.4));
        let queries =
            tape.leaf(if zero_query { Array2::zeros((n, 2)) } else { array![[0.2, 0.9], [-0.4, 0.3], [1.0, 0.1]] });
        let rel = tape.leaf(relation);
        let wv = p.get(names::REL_V).clone();
        let vars = RelationAttentionVars {
            wq: tape.leaf(p.get(names::REL_Q).clone()),
            wk: tape.leaf(p.get(names::REL_K).clone()),
            wv: tape.leaf(wv.clone()),
        };
        let out = relation_attention(&mut tape, z, queries, rel, vars, &c, &strict_past_mask(n), None);
        (tape, out, z, wv)
    }

    #[test]
    fn relation_mixing_cases() {
        let rel = array![[0.0, 0.0, 0.0], [0.4, 0.0, 0.0], [0.0, 0.7, 0.0]];
        // δ = 1: pure attention
        let (tape, out, _, _) = relation_setup(1.0, rel.clone(), false);
        assert_eq!(tape.value(out.gammas[0]), tape.value(out.alphas[0]));
        // δ = 0 and a one-hot relation row: H selects Z_p W^V
        let (tape, out, z, wv) = relation_setup(0.0, rel, false);
        let zw = tape.value(z).dot(&wv);
        assert_eq!(tape.value(out.h).row(2), zw.row(1));
        assert_eq!(tape.value(out.h).row(1), zw.row(0));
        // δ = 0.5, α = (0.5, 0.5), R^E = (1, 0) → γ = (0.75, 0.25)
        let rel = array![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let (tape, out, _, _) = relation_setup(0.5, rel, true);
        let gamma = tape.value(out.gammas[0]);
        assert_eq!(gamma.slice(s![2, ..2]).to_vec(), vec![0.75, 0.25]);
        // no relation on a row → γ = α
        assert_eq!(gamma.row(1), tape.value(out.alphas[0]).row(1));
        for r in 1..3 {
            assert_abs_diff_eq!(gamma.row(r).sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forgetting_curve_cases() {
        assert_eq!(forgetting_curve(&[0.0], 1.7, 0.3).unwrap(), vec![1.7]);
        let rf = forgetting_curve(&[0.0, std::f64::consts::LN_2], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(rf[0], 1.0);
        assert_abs_diff_eq!(rf[1], 0.5, epsilon = 1e-15);
        assert!(forgetting_curve(&[1.0, -0.5], 1.0, 1.0).is_err());
        let seg = Segment { exercises: vec![0, 1], responses: vec![true, false], timestamps: vec![10, 5] };
        assert!(seg.decay(1.0, 1.0).is_err());
    }

    #[test]
    fn forgetting_with_unit_mix_returns_h() {
        let mut tape = Tape::new();
        let h = tape.leaf(array![[0.1, -0.2], [3.0, 0.5]]);
        let gamma = tape.leaf(array![[0.0, 0.0], [1.0, 0.0]]);
        let proj = tape.leaf(array![[5.0, -4.0]]);
        let o = forgetting(&mut tape, h, &[gamma], array![[0.0, 0.0], [0.9, 0.0]], proj, 1.0);
        assert_eq!(tape.value(o), tape.value(h));
        let o = forgetting(&mut tape, h, &[gamma], array![[0.0, 0.0], [0.9, 0.0]], proj, 0.5);
        assert_abs_diff_eq!(tape.value(o)[[1, 0]], 0.5 * 3.0 + 0.5 * 0.9 * 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(o)[[0, 1]], -0.1, epsilon = 1e-15);
    }

    #[test]
    fn predict_cases() {
        let c = small_config(2, 1);
        let zero = ModelParameters::zeros(&c, 1);
        assert_eq!(predict(&[3.0, -1.0], &zero), 0.5);
        let mut p = zero.clone();
        *p.get_mut(names::FFN_WL) = array![[1.0, -1.0], [0.5, 2.0]];
        *p.get_mut(names::FFN_BL) = array![[0.1, -0.3]];
        *p.get_mut(names::FFN_WS) = array![[2.0, 0.0], [1.0, 1.0]];
        *p.get_mut(names::FFN_BS) = array![[0.0, 0.2]];
        *p.get_mut(names::OUT_W) = array![[0.5], [-1.0]];
        *p.get_mut(names::OUT_B) = array![[0.05]];
        // O = (1, 0.4): hidden = relu(1.2+0.1, -0.2-0.3) = (1.3, 0)
        // F = (2.6, 0.2); logit = 1.3 - 0.2 + 0.05 = 1.15
        assert_abs_diff_eq!(predict(&[1.0, 0.4], &p), 1.0 / (1.0 + (-1.15f64).exp()), epsilon = 1e-15);
        *p.get_mut(names::OUT_B) = array![[1e4]];
        assert_eq!(predict(&[1.0, 0.4], &p), 1.0);
    }

    #[test]
    fn zero_parameters_predict_one_half() {
        let c = small_config(4, 2);
        let p = ModelParameters::zeros(&c, 3);
        let b = batch(&[(0, true, 0)], 1, 7200, vec![0.3]);
        assert_eq!(forward(&b, &p, &c, None).unwrap(), 0.5);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        for (seed, use_pv) in [(1, true), (2, false), (3, true)] {
            let c = ModelConfig { use_position_values: use_pv, ..small_config(4, 2) };
            let p = ModelParameters::init(&c, 4, seed);
            let b = batch(
                &[(0, true, 0), (2, false, 3600), (1, true, 9000), (3, false, 20000), (2, true, 30000)],
                1,
                40000,
                vec![0.2, 0.0, 0.9, 0.0, 0.4],
            );
            let got = forward(&b, &p, &c, None).unwrap();
            assert_abs_diff_eq!(got, oracle_forward(&b, &p, &c), epsilon = 1e-12);
            let no_rel = SequenceBatch { relation: vec![0.0; 5], ..b.clone() };
            assert_abs_diff_eq!(
                forward(&no_rel, &p, &c, None).unwrap(),
                oracle_forward(&no_rel, &p, &c),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn eval_forward_is_deterministic_and_dropout_is_train_only() {
        let c = ModelConfig { dropout: 0.5, ..small_config(4, 2) };
        let p = ModelParameters::init(&c, 3, 11);
        let b = batch(&[(0, true, 0), (1, false, 100), (2, true, 200)], 0, 300, vec![0.5, 0.1, 0.0]);
        let a = forward(&b, &p, &c, None).unwrap();
        assert_eq!(a.to_bits(), forward(&b, &p, &c, None).unwrap().to_bits());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trained: Vec<f64> = (0..8).map(|_| forward(&b, &p, &c, Some(&mut rng)).unwrap()).collect();
        assert!(trained.iter().any(|t| *t != a));
    }

    #[test]
    fn related_past_failure_dominates() {
        let c = ModelConfig { delta: 0.0, delta_f: 0.5, ..small_config(2, 1) };
        let mut p = ModelParameters::zeros(&c, 3);
        // wrong answers embed to (-1, 0), right answers to (1, 0)
        *p.get_mut(names::INTERACTION) =
            array![[-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]];
        *p.get_mut(names::SELF_V) = Array2::eye(2);
        *p.get_mut(names::REL_V) = Array2::eye(2);
        *p.get_mut(names::FFN_WL) = array![[1.0, -1.0], [0.0, 0.0]];
        *p.get_mut(names::FFN_WS) = Array2::eye(2);
        *p.get_mut(names::OUT_W) = array![[1.0], [-1.0]];
        let b = batch(&[(0, false, 0), (1, true, 3600), (1, true, 7200)], 2, 10800, vec![1.0, 0.05, 0.05]);
        let p_dominated = forward(&b, &p, &c, None).unwrap();
        assert!(p_dominated < 0.5, "{p_dominated}");
        assert_abs_diff_eq!(p_dominated, oracle_forward(&b, &p, &c), epsilon = 1e-12);
        let flipped = SequenceBatch { relation: vec![0.05, 0.05, 1.0], ..b };
        assert!(forward(&flipped, &p, &c, None).unwrap() > 0.5);
    }

    #[test]
    fn empty_window_gives_prior() {
        let c = small_config(4, 2);
        let p = ModelParameters::init(&c, 3, 6);
        let a = forward(&batch(&[], 0, 0, vec![]), &p, &c, None).unwrap();
        let b = forward(&batch(&[], 2, 50, vec![]), &p, &c, None).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(a, oracle_forward(&batch(&[], 0, 0, vec![]), &p, &c), epsilon = 1e-12);
    }

    #[test]
    fn batch_validation() {
        let c = small_config(4, 2);
        let p = ModelParameters::init(&c, 3, 6);
        assert!(forward(&batch(&[(0, true, 0)], 1, 10, vec![]), &p, &c, None).is_err());
        assert!(forward(&batch(&[(0, true, 100)], 1, 10, vec![0.0]), &p, &c, None).is_err());
        assert!(forward(&batch(&[(0, true, 0)], 9, 10, vec![0.0]), &p, &c, None).is_err());
        let long: Vec<_> = (0..9).map(|i| (0, true, i)).collect();
        assert!(forward(&batch(&long, 1, 10, vec![0.0; 9]), &p, &c, None).is_err());
    }

    #[test]
    fn segment_scores_equal_prefix_forwards() {
        let c = small_config(4, 2);
        let p = ModelParameters::init(&c, 4, 8);
        let a = Array2::from_shape_fn((4, 4), |(i, j)| if i > j { 0.1 * (i + j) as f64 } else { 0.0 });
        let seg = Segment {
            exercises: vec![0, 3, 1, 2, 3, 0],
            responses: vec![true, false, false, true, true, false],
            timestamps: vec![0, 50, 4000, 4100, 90000, 90500],
        };
        let scores = score_segment(&seg, &a, &p, &c).unwrap();
        for n in 0..seg.len() {
            let window = Segment {
                exercises: seg.exercises[..n].to_vec(),
                responses: seg.responses[..n].to_vec(),
                timestamps: seg.timestamps[..n].to_vec(),
            };
            let relation = window.exercises.iter().map(|e| a[[seg.exercises[n], *e]]).collect();
            let b = batch(&[], seg.exercises[n], seg.timestamps[n], relation);
            let b = SequenceBatch {
                gaps: window.timestamps.iter().map(|t| (seg.timestamps[n] - t) as f64 / SECONDS_PER_HOUR).collect(),
                window,
                ..b
            };
            assert_abs_diff_eq!(scores[n], forward(&b, &p, &c, None).unwrap(), epsilon = 1e-12);
        }
        // responses never leak into their own prediction
        let mut flipped = seg.clone();
        flipped.responses[5] = !flipped.responses[5];
        assert_eq!(scores[5], score_segment(&flipped, &a, &p, &c).unwrap()[5]);
    }
}
