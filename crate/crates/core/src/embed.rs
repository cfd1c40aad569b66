//! Graph convolution over the unified skill / exercise / student graph.
//!
//! Node layout is `[skills | exercises | students]`. Each layer computes
//! `ReLU((A + I) H W + b)`, i.e. a plain weighted sum over the node itself and
//! its neighbors followed by one shared linear map, optionally with symmetric
//! degree normalization.

use std::io::Write;
use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{HeterogeneousGraph, IdMap, QMatrix};
use crate::tape::{Csr, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcnConfig {
    pub layers: usize,
    pub dim: usize,
    pub seed: u64,
    /// Symmetric degree normalization of `A + I`.
    pub normalize: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig { layers: 2, dim: 64, seed: 7, normalize: false }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 {
            return Err(Error::Config("gcn.layers and gcn.dim must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeLayout {
    pub n_skills: usize,
    pub n_exercises: usize,
    pub n_students: usize,
}

impl NodeLayout {
    pub fn of(het: &HeterogeneousGraph) -> Self {
        NodeLayout { n_skills: het.n_skills, n_exercises: het.n_exercises, n_students: het.n_students }
    }

    pub fn len(&self) -> usize {
        self.n_skills + self.n_exercises + self.n_students
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn skill(&self, s: usize) -> usize {
        s
    }

    pub fn exercise(&self, e: usize) -> usize {
        self.n_skills + e
    }

    pub fn student(&self, s: usize) -> usize {
        self.n_skills + self.n_exercises + s
    }
}

/// The propagation operator `A + I` (possibly normalized) with its layout.
#[derive(Debug, Clone)]
pub struct GcnGraph {
    pub layout: NodeLayout,
    pub propagation: Arc<Csr>,
}

impl GcnGraph {
    /// Wraps a neighbor adjacency (diagonal ignored) and adds the self-loop.
    pub fn from_adjacency(layout: NodeLayout, adjacency: &Csr, normalize: bool) -> Result<Self> {
        let n = layout.len();
        if adjacency.rows() != n || adjacency.cols() != n {
            return Err(Error::Shape(format!(
                "adjacency is {}x{}, layout has {n} nodes",
                adjacency.rows(),
                adjacency.cols()
            )));
        }
        let mut triplets: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
        for r in 0..n {
            triplets.extend(adjacency.row(r).filter(|(c, _)| *c != r).map(|(c, v)| (r, c, v)));
        }
        if normalize {
            let mut degree = vec![0.0; n];
            for (r, _, v) in &triplets {
                degree[*r] += v;
            }
            for (r, c, v) in triplets.iter_mut() {
                let scale = (degree[*r] * degree[*c]).sqrt();
                if scale > 0.0 {
                    *v /= scale;
                }
            }
        }
        Ok(GcnGraph { layout, propagation: Arc::new(Csr::from_triplets(n, n, &triplets)) })
    }

    /// Combined adjacency: calibrated skill relations, calibrated Q
    /// weights (both directions) and unit student-exercise links.
    pub fn build(het: &HeterogeneousGraph, s_hat: &Array2<f64>, q_hat: &QMatrix, normalize: bool) -> Result<Self> {
        let layout = NodeLayout::of(het);
        if s_hat.dim() != (layout.n_skills, layout.n_skills) {
            return Err(Error::Shape("skill relation matrix does not match the skill count".into()));
        }
        if q_hat.values.dim() != (layout.n_exercises, layout.n_skills) {
            return Err(Error::Shape("Q-matrix does not match the graph".into()));
        }
        let mut triplets = Vec::new();
        for ((i, j), w) in s_hat.indexed_iter() {
            if i != j && *w != 0.0 {
                triplets.push((layout.skill(i), layout.skill(j), *w));
            }
        }
        for ((e, k), w) in q_hat.values.indexed_iter() {
            if *w != 0.0 {
                triplets.push((layout.exercise(e), layout.skill(k), *w));
                triplets.push((layout.skill(k), layout.exercise(e), *w));
            }
        }
        for &(s, e) in &het.student_exercise {
            triplets.push((layout.student(s), layout.exercise(e), 1.0));
            triplets.push((layout.exercise(e), layout.student(s), 1.0));
        }
        let adjacency = Csr::from_triplets(layout.len(), layout.len(), &triplets);
        Self::from_adjacency(layout, &adjacency, normalize)
    }
}

/// One-hot features for skills and exercises; each student gets the mean of
/// the features of the exercises they answered.
pub fn initial_features(het: &HeterogeneousGraph) -> Array2<f64> {
    let layout = NodeLayout::of(het);
    let width = layout.n_skills + layout.n_exercises;
    let mut x = Array2::zeros((layout.len(), width));
    for i in 0..width {
        x[[i, i]] = 1.0;
    }
    let mut counts = vec![0usize; layout.n_students];
    for &(s, _) in &het.student_exercise {
        counts[s] += 1;
    }
    for &(s, e) in &het.student_exercise {
        x[[layout.student(s), layout.exercise(e)]] += 1.0 / counts[s] as f64;
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
}

impl GcnParams {
    /// Seeded uniform weights in `[-1/√dim, 1/√dim]`, zero biases.
    pub fn init(input_dim: usize, config: &GcnConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (config.dim as f64).sqrt();
        let mut weights = Vec::with_capacity(config.layers);
        let mut biases = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let fan_in = if layer == 0 { input_dim } else { config.dim };
            weights.push(Array2::from_shape_simple_fn((fan_in, config.dim), || rng.random_range(-bound..=bound)));
            biases.push(Array2::zeros((1, config.dim)));
        }
        GcnParams { weights, biases }
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("gcn.w{l}"), w));
            out.push((format!("gcn.b{l}"), b));
        }
        out
    }
}

/// Tape handles for GCN parameters.
#[derive(Debug, Clone)]
pub struct GcnVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl GcnVars {
    pub fn register(tape: &mut Tape, params: &GcnParams) -> Self {
        GcnVars {
            weights: params.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: params.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }
}

/// Records the stacked convolution on `tape`; returns all node states.
pub fn gcn_forward_tape(tape: &mut Tape, graph: &GcnGraph, features: Var, vars: &GcnVars) -> Var {
    let mut h = features;
    for (w, b) in vars.weights.iter().zip(&vars.biases) {
        let projected = tape.matmul(h, *w);
        let summed = tape.spmm(graph.propagation.clone(), projected);
        let shifted = tape.add_row(summed, *b);
        h = tape.relu(shifted);
    }
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub exercise: Array2<f64>,
    pub skill: Array2<f64>,
}

impl EmbeddingSet {
    fn from_nodes(nodes: &Array2<f64>, layout: &NodeLayout) -> Self {
        let skill = nodes.slice(ndarray::s![0..layout.n_skills, ..]).to_owned();
        let exercise = nodes.slice(ndarray::s![layout.n_skills..layout.n_skills + layout.n_exercises, ..]).to_owned();
        EmbeddingSet { exercise, skill }
    }

    /// `node_id,v0,v1,...` rows; skills first, then exercises.
    pub fn write_csv<W: Write>(&self, out: W, skills: &IdMap, exercises: &IdMap) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let mut header = vec!["node_id".to_owned()];
        header.extend((0..self.exercise.ncols().max(self.skill.ncols())).map(|d| format!("v{d}")));
        writer.write_record(&header)?;
        for (prefix, names, m) in [("skill:", skills, &self.skill), ("exercise:", exercises, &self.exercise)] {
            for (i, row) in m.rows().into_iter().enumerate() {
                let mut rec = vec![format!("{prefix}{}", names.id(i))];
                rec.extend(row.iter().map(|v| format!("{v}")));
                writer.write_record(&rec)?;
            }
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn gcn_forward(graph: &GcnGraph, features: &Array2<f64>, params: &GcnParams) -> Result<EmbeddingSet> {
    if features.nrows() != graph.layout.len() {
        return Err(Error::Shape(format!("{} feature rows for {} nodes", features.nrows(), graph.layout.len())));
    }
    let mut in_dim = features.ncols();
    for (l, (w, b)) in params.weights.iter().zip(&params.biases).enumerate() {
        if w.nrows() != in_dim || b.dim() != (1, w.ncols()) {
            return Err(Error::Shape(format!(
                "gcn layer {l}: weight {:?}, bias {:?}, input width {in_dim}",
                w.dim(),
                b.dim()
            )));
        }
        in_dim = w.ncols();
    }
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let vars = GcnVars::register(&mut tape, params);
    let out = gcn_forward_tape(&mut tape, graph, x, &vars);
    let nodes = tape.value(out);
    if nodes.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gcn activation".into()));
    }
    Ok(EmbeddingSet::from_nodes(nodes, &graph.layout))
}

/// Cosine similarity; a zero-norm side yields 0.
pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine similarity of different widths");
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Records the exercise cosine-similarity matrix `N Nᵀ` with `N` the
/// row-normalized embeddings.
pub fn cosine_matrix_tape(tape: &mut Tape, embeddings: Var) -> Var {
    let normalized = tape.row_l2_normalize(embeddings);
    tape.matmul_t(normalized, normalized)
}

pub fn cosine_matrix(embeddings: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let e = tape.leaf(embeddings.clone());
    let c = cosine_matrix_tape(&mut tape, e);
    tape.value(c).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};

    fn skills_only(n: usize) -> NodeLayout {
        NodeLayout { n_skills: n, n_exercises: 0, n_students: 0 }
    }

    fn identity_params(dim: usize, layers: usize) -> GcnParams {
        GcnParams { weights: vec![Array2::eye(dim); layers], biases: vec![Array2::zeros((1, dim)); layers] }
    }

    #[test]
    fn isolated_node_identity_and_relu() {
        let g = GcnGraph::from_adjacency(skills_only(1), &Csr::from_triplets(1, 1, &[]), false).unwrap();
        let out = gcn_forward(&g, &array![[0.5, 2.0]], &identity_params(2, 1)).unwrap();
        assert_eq!(out.skill, array![[0.5, 2.0]]);
        let out = gcn_forward(&g, &array![[-1.0, -2.0]], &identity_params(2, 1)).unwrap();
        assert_eq!(out.skill, array![[0.0, 0.0]]);
    }

    #[test]
    fn two_node_clique_sums_self_and_neighbor() {
        let adj = Csr::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let g = GcnGraph::from_adjacency(skills_only(2), &adj, false).unwrap();
        let out = gcn_forward(&g, &array![[1.0, 0.0], [0.0, 1.0]], &identity_params(2, 1)).unwrap();
        assert_eq!(out.skill, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn dimension_mismatch_errors() {
        let g = GcnGraph::from_adjacency(skills_only(2), &Csr::from_triplets(2, 2, &[]), false).unwrap();
        assert!(gcn_forward(&g, &Array2::zeros((3, 2)), &identity_params(2, 1)).is_err());
        assert!(gcn_forward(&g, &Array2::zeros((2, 3)), &identity_params(2, 1)).is_err());
    }

    #[test]
    fn normalized_propagation_of_clique() {
        let adj = Csr::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let g = GcnGraph::from_adjacency(skills_only(2), &adj, true).unwrap();
        assert_eq!(g.propagation.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn cosine_values() {
        let a = Array1::from(vec![1.0, 2.0]);
        assert_abs_diff_eq!(cosine_similarity(a.view(), a.view()), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 0.0);
        assert_abs_diff_eq!(cosine_similarity(array![1.0, 2.0].view(), array![2.0, 1.0].view()), 0.8, epsilon = 1e-12);
        assert_eq!(cosine_similarity(array![0.0, 0.0].view(), array![2.0, 1.0].view()), 0.0);
    }

    #[test]
    fn cosine_matrix_agrees_with_pairwise() {
        let e = array![[1.0, 2.0, 0.0], [2.0, 1.0, 1.0], [0.0, 0.0, 0.0]];
        let c = cosine_matrix(&e);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(c[[i, j]], cosine_similarity(e.row(i), e.row(j)), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn features_average_student_exercises() {
        let het = HeterogeneousGraph {
            n_students: 1,
            n_exercises: 2,
            n_skills: 1,
            exercise_skill: vec![(0, 0, 1.0), (1, 0, 1.0)],
            student_exercise: vec![(0, 0), (0, 1)],
        };
        let x = initial_features(&het);
        assert_eq!(x.dim(), (4, 3));
        assert_eq!(x.row(3).to_vec(), vec![0.0, 0.5, 0.5]);
        assert_eq!(x.row(1).to_vec(), vec![0.0, 1.0, 0.0]);
    }
}
