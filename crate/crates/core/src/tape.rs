//! A small reverse-mode differentiation tape over dense `f64` matrices.
//!
//! Every operation records its inputs and whatever it needs for the
//! pullback; [`Tape::backward`] walks the nodes in reverse insertion order.
//! Only the handful of operations the predictor and the GCN need are
//! provided. All reductions run in a fixed order, so a forward/backward pair
//! is bit-reproducible.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

/// Compressed sparse row matrix, used for graph adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicate
    /// coordinates are summed; explicit zeros are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        let mut m = Csr { rows, cols, indptr, indices, values };
        m.prune_zeros();
        m
    }

    fn prune_zeros(&mut self) {
        if self.values.iter().all(|v| *v != 0.0) {
            return;
        }
        let mut indptr = vec![0usize; self.rows + 1];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..self.rows {
            for k in self.indptr[r]..self.indptr[r + 1] {
                if self.values[k] != 0.0 {
                    indices.push(self.indices[k]);
                    values.push(self.values[k]);
                }
            }
            indptr[r + 1] = indices.len();
        }
        self.indptr = indptr;
        self.indices = indices;
        self.values = values;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(col, value)` over the stored entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn transpose(&self) -> Csr {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        Csr::from_triplets(self.cols, self.rows, &triplets)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// Dense product `self * rhs`.
    pub fn matmul(&self, rhs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, rhs.nrows(), "sparse matmul shape mismatch");
        let mut out = Array2::zeros((self.rows, rhs.ncols()));
        for r in 0..self.rows {
            let mut target = out.row_mut(r);
            for (c, v) in self.row(r) {
                target.scaled_add(v, &rhs.row(c));
            }
        }
        out
    }
}

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var),
    SpMM(Arc<Csr>, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Gather2(Var, Vec<usize>, Vec<usize>),
    GatherRel(Var, usize),
    BinRel(Var, usize),
    RowSum(Var),
    RowNormalize(Var, Vec<f64>),
    RowL2Normalize(Var, Vec<f64>),
    Threshold(Var, Array2<bool>),
    BceWithLogits(Var, Array2<f64>, Array2<f64>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Relative offset `j - i` clipped to `[-k, k]`, shifted into a table row.
#[inline]
pub fn clipped_offset(i: usize, j: usize, k: usize) -> usize {
    let offset = j as i64 - i as i64;
    (offset.clamp(-(k as i64), k as i64) + k as i64) as usize
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a * bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a single row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = self.value(a) * &c;
        self.push(value, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor))
    }

    /// Multiplies row `i` by `weights[i]`.
    pub fn row_scale(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.nrows(), weights.len());
        for (mut row, w) in value.rows_mut().into_iter().zip(&weights) {
            row *= *w;
        }
        self.push(value, Op::RowScale(a, weights))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    /// Row softmax restricted to the `true` cells of `mask`. Masked cells
    /// are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &Array2<bool>) -> Var {
        let x = self.value(a);
        assert_eq!(x.dim(), mask.dim(), "softmax mask shape mismatch");
        let mut value = Array2::zeros(x.dim());
        for ((xr, mr), mut out) in x.rows().into_iter().zip(mask.rows()).zip(value.rows_mut()) {
            let max = xr.iter().zip(mr.iter()).filter(|(_, m)| **m).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for ((o, v), m) in out.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if *m {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            out /= total;
        }
        self.push(value, Op::MaskedSoftmax(a))
    }

    pub fn spmm(&mut self, matrix: Arc<Csr>, b: Var) -> Var {
        let value = matrix.matmul(self.value(b));
        self.push(value, Op::SpMM(matrix, b))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &index);
        self.push(value, Op::GatherRows(a, index))
    }

    /// `out[i, j] = a[rows[i], cols[j]]`.
    pub fn gather2(&mut self, a: Var, rows: Vec<usize>, cols: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows).select(Axis(1), &cols);
        self.push(value, Op::Gather2(a, rows, cols))
    }

    /// Expands an `L x (2k+1)` table of per-offset scores into an `L x L`
    /// matrix: `out[i, j] = a[i, clip(j - i, k) + k]`.
    pub fn gather_rel(&mut self, a: Var, k: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.ncols(), 2 * k + 1, "gather_rel table width");
        let n = src.nrows();
        let value = Array2::from_shape_fn((n, n), |(i, j)| src[[i, clipped_offset(i, j, k)]]);
        self.push(value, Op::GatherRel(a, k))
    }

    /// Adjoint of [`Tape::gather_rel`]: sums an `L x L` matrix into
    /// `L x (2k+1)` offset bins.
    pub fn bin_rel(&mut self, a: Var, k: usize) -> Var {
        let value = bin_offsets(self.value(a), k);
        self.push(value, Op::BinRel(a, k))
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a))
    }

    /// Divides each row by its sum. Rows whose sum is not positive become
    /// zero.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums: Vec<f64> = x.rows().into_iter().map(|r| r.sum()).collect();
        let mut value = x.clone();
        for (mut row, s) in value.rows_mut().into_iter().zip(&sums) {
            if *s > 0.0 {
                row /= *s;
            } else {
                row.fill(0.0);
            }
        }
        self.push(value, Op::RowNormalize(a, sums))
    }

    /// Scales each row to unit Euclidean norm; zero rows stay zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut value = x.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(&norms) {
            if *n > 0.0 {
                row /= *n;
            }
        }
        self.push(value, Op::RowL2Normalize(a, norms))
    }

    /// Keeps `a[i, j]` where `keep[i, j]` holds and `a[i, j] >= theta`,
    /// zeroes it elsewhere.
    pub fn threshold(&mut self, a: Var, theta: f64, keep: &Array2<bool>) -> Var {
        let x = self.value(a);
        let mut active = keep.clone();
        Zip::from(&mut active).and(x).for_each(|k, v| *k = *k && *v >= theta);
        let mut value = x.clone();
        Zip::from(&mut value).and(&active).for_each(|v, k| {
            if !*k {
                *v = 0.0
            }
        });
        self.push(value, Op::Threshold(a, active))
    }

    /// Weighted sum of binary cross-entropy terms computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Array2<f64>, weights: Array2<f64>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.dim(), labels.dim());
        assert_eq!(z.dim(), weights.dim());
        let mut total = 0.0;
        for ((z, y), w) in z.iter().zip(labels.iter()).zip(weights.iter()) {
            if *w != 0.0 {
                total += w * (softplus(*z) - y * z);
            }
        }
        self.push(Array2::from_elem((1, 1), total), Op::BceWithLogits(logits, labels, weights))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    /// Sign pattern of every ReLU input and threshold gate on the tape.
    /// Two evaluations with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => out.extend(self.value(*a).iter().map(|v| *v > 0.0)),
                Op::Threshold(_, active) => out.extend(active.iter().copied()),
                Op::RowNormalize(a, _) => out.extend(self.value(*a).rows().into_iter().map(|r| r.sum() > 0.0)),
                _ => {}
            }
        }
        out
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = gy.dot(self.value(*b));
                    let gb = gy.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *b, gy.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, gy.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::Mul(a, b) => {
                    let ga = &gy * self.value(*b);
                    let gb = &gy * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, &gy * c),
                Op::Scale(a, f) => accumulate(&mut grads, *a, &gy * *f),
                Op::RowScale(a, w) => {
                    let mut ga = gy.clone();
                    for (mut row, w) in ga.rows_mut().into_iter().zip(w) {
                        row *= *w;
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = gy.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, x| {
                        if *x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &gy * &node.value.mapv(|y| y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::MaskedSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = &gy * y;
                    for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.scaled_add(-dot, &yr);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SpMM(m, b) => {
                    let gb = m.transpose().matmul(&gy);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + gy.ncols()]).assign(&gy);
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        let gp = gy.slice(s![.., offset..offset + width]).to_owned();
                        offset += width;
                        accumulate(&mut grads, *p, gp);
                    }
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (r, src) in index.iter().enumerate() {
                        let mut target = ga.row_mut(*src);
                        target += &gy.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather2(a, rows, cols) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (i, r) in rows.iter().enumerate() {
                        for (j, c) in cols.iter().enumerate() {
                            ga[[*r, *c]] += gy[[i, j]];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRel(a, k) => accumulate(&mut grads, *a, bin_offsets(&gy, *k)),
                Op::BinRel(a, k) => {
                    let n = gy.nrows();
                    let ga = Array2::from_shape_fn((n, n), |(i, j)| gy[[i, clipped_offset(i, j, *k)]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let dim = self.value(*a).dim();
                    let ga = Array2::from_shape_fn(dim, |(i, _)| gy[[i, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowNormalize(a, sums) => {
                    let y = &node.value;
                    let mut ga = gy.clone();
                    for ((mut row, yr), s) in ga.rows_mut().into_iter().zip(y.rows()).zip(sums) {
                        if *s > 0.0 {
                            let dot = row.dot(&yr);
                            row.mapv_inplace(|g| (g - dot) / *s);
                        } else {
                            row.fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::RowL2Normalize(a, norms) => {
                    let y = &node.value;
                    let mut ga = gy.clone();
                    for ((mut row, yr), n) in ga.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        if *n > 0.0 {
                            let dot = row.dot(&yr);
                            row.scaled_add(-dot, &yr);
                            row /= *n;
                        } else {
                            row.fill(0.0);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Threshold(a, active) => {
                    let mut ga = gy.clone();
                    Zip::from(&mut ga).and(active).for_each(|g, k| {
                        if !*k {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::BceWithLogits(z, labels, weights) => {
                    let scale = gy[[0, 0]];
                    let mut ga = self.value(*z).mapv(sigmoid);
                    Zip::from(&mut ga).and(labels).and(weights).for_each(|g, y, w| {
                        *g = scale * w * (*g - y);
                    });
                    accumulate(&mut grads, *z, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), gy[[0, 0]]);
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[idx] = Some(gy);
        }
        Gradients(grads)
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn bin_offsets(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros((n, 2 * k + 1));
    for i in 0..n {
        for j in 0..x.ncols() {
            out[[i, clipped_offset(i, j, k)]] += x[[i, j]];
        }
    }
    out
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients(Vec<Option<Array2<f64>>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.0.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the
    /// output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            minus.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        assert_eq!(a.dim(), b.dim());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}\n{a}\n{b}");
        }
    }

    #[test]
    fn csr_sums_duplicates_and_drops_zeros() {
        let m = Csr::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.0)]);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.to_dense(), array![[0.0, 3.0], [0.0, 0.0]]);
        assert_eq!(m.transpose().to_dense(), array![[0.0, 0.0], [3.0, 0.0]]);
    }

    #[test]
    fn masked_softmax_rows_and_fully_masked_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0]]);
        let mask = array![[true, true, false], [false, false, false]];
        let y = tape.masked_softmax(x, &mask);
        let v = tape.value(y);
        assert!((v.row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(v[[0, 2]], 0.0);
        assert!(v.row(1).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x0 = array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6], [-0.3, 0.2, 0.9]];
        let w = array![[0.2, -0.1], [0.7, 0.3], [-0.5, 0.4]];
        let mask = Array2::from_shape_fn((3, 3), |(i, j)| j <= i);
        let build = |tape: &mut Tape, xv: &Array2<f64>| -> (Var, Var) {
            let x = tape.leaf(xv.clone());
            let wv = tape.leaf(w.clone());
            let pos = tape.leaf(array![[0.1, 0.2, 0.3], [0.4, -0.2, 0.1], [0.3, 0.3, -0.5]]);
            let scores = tape.matmul_t(x, x);
            let rel = tape.gather_rel(pos, 1);
            let scores = tape.add(scores, rel);
            let alpha = tape.masked_softmax(scores, &mask);
            let binned = tape.bin_rel(alpha, 1);
            let mixed = tape.matmul(alpha, x);
            let mixed = tape.add(mixed, binned);
            let norm = tape.row_l2_normalize(mixed);
            let h = tape.matmul(norm, wv);
            let h = tape.relu(h);
            let hs = tape.row_sum(h);
            let sig = tape.sigmoid(hs);
            let rn = tape.row_normalize(alpha);
            let g = tape.gather2(rn, vec![2, 0], vec![1, 1, 2]);
            let sg = tape.sum(g);
            let loss = tape.bce_with_logits(sig, array![[1.0], [0.0], [1.0]], array![[1.0], [1.0], [0.5]]);
            let loss = tape.add(loss, sg);
            (x, loss)
        };
        let mut tape = Tape::new();
        let (x, loss) = build(&mut tape, &x0);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let numeric = numeric_grad(
            |xv| {
                let mut t = Tape::new();
                let (_, l) = build(&mut t, xv);
                t.scalar(l)
            },
            &x0,
        );
        assert_close(&analytic, &numeric, 1e-7);
    }

    #[test]
    fn slice_concat_spmm_threshold_gradients() {
        let x0 = array![[0.3, -0.2, 0.5, 0.8], [0.1, 0.4, -0.6, 0.2]];
        let adj = Arc::new(Csr::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 0.5), (1, 1, 2.0)]));
        let keep = array![[true, true], [false, true]];
        let build = |tape: &mut Tape, xv: &Array2<f64>| -> (Var, Var) {
            let x = tape.leaf(xv.clone());
            let a = tape.slice_cols(x, 0, 2);
            let b = tape.slice_cols(x, 2, 4);
            let bs = tape.scale(b, 1.5);
            let c = tape.concat_cols(&[bs, a]);
            let p = tape.spmm(adj.clone(), c);
            let gathered = tape.gather_rows(p, vec![1, 0, 1]);
            let sq = tape.mul(gathered, gathered);
            let t = tape.matmul_t(x, x);
            let t = tape.threshold(t, 0.05, &keep);
            let t = tape.row_scale(t, vec![2.0, -1.0]);
            let bias = tape.leaf(array![[0.1, 0.2]]);
            let t = tape.add_row(t, bias);
            let t = tape.mul_const(t, array![[1.0, 0.5], [0.25, 2.0]]);
            let s1 = tape.sum(sq);
            let s2 = tape.sum(t);
            (x, tape.add(s1, s2))
        };
        let mut tape = Tape::new();
        let (x, loss) = build(&mut tape, &x0);
        let analytic = tape.backward(loss).get(x).unwrap().clone();
        let numeric = numeric_grad(
            |xv| {
                let mut t = Tape::new();
                let (_, l) = build(&mut t, xv);
                t.scalar(l)
            },
            &x0,
        );
        assert_close(&analytic, &numeric, 1e-7);
    }

    #[test]
    fn clipped_offset_shares_boundary_rows() {
        assert_eq!(clipped_offset(0, 5, 2), clipped_offset(0, 2, 2));
        assert_eq!(clipped_offset(7, 0, 2), 0);
        assert_eq!(clipped_offset(3, 3, 2), 2);
    }
}
