//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records a computation graph of matrix operations; calling
//! [`Tape::backward`] on a scalar (1×1) loss node accumulates gradients
//! into a [`Grads`] buffer aligned with a [`ParamSet`]. Everything is
//! double precision so finite-difference checks can be tight.

use ndarray::{Array2, Axis};
use std::collections::HashMap;

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// Index of a parameter tensor in a [`ParamSet`].
pub type ParamId = usize;

const LAYER_NORM_EPS: f64 = 1e-6;

/// Named collection of trainable parameter matrices.
#[derive(Debug, Clone)]
pub struct ParamSet {
    tensors: Vec<Array2<f64>>,
    names: Vec<String>,
}

/// Gradient buffers, one per parameter, same shapes as the [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            tensors: Vec::new(),
            names: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Array2<f64>) -> ParamId {
        self.tensors.push(tensor);
        self.names.push(name.to_string());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            tensors: self
                .tensors
                .iter()
                .map(|t| Array2::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// True iff every parameter entry is finite.
    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl Grads {
    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(other.tensors.iter()) {
            *a += b;
        }
    }
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// a (m×n) + row (1×n), broadcast over rows.
    AddRow(NodeId, NodeId),
    /// a (m×n) * row (1×n), broadcast over rows.
    MulRow(NodeId, NodeId),
    /// Select rows of a table by index; backward scatter-adds.
    Gather(NodeId, Vec<usize>),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    /// Row-wise standardization (x - mean) / sqrt(var + eps), no affine part.
    LayerNormRows(NodeId),
    /// Sum of squared entries -> 1×1.
    SumSquares(NodeId),
    /// Mean over counted rows of -log softmax(logits)[target] -> 1×1.
    MeanCrossEntropy(NodeId, Vec<usize>, Vec<bool>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// A recorded computation, replayable backwards.
pub struct Tape {
    nodes: Vec<Node>,
    param_memo: HashMap<ParamId, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_memo: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    /// Bring a parameter onto the tape (memoized per tape).
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_memo.get(&id) {
            return n;
        }
        let n = self.push(params.get(id).clone(), Op::Param(id));
        self.param_memo.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[a].value * &self.nodes[row].value;
        self.push(v, Op::MulRow(a, row))
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((indices.len(), t.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&t.row(ix));
        }
        self.push(v, Op::Gather(table, indices.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[a]
            .value
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|z| (z - max).exp());
            let sum: f64 = row.sum();
            row.mapv_inplace(|z| z / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a].value;
        let n = x.ncols() as f64;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
            let denom = (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|z| (z - mean) / denom);
        }
        self.push(v, Op::LayerNormRows(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a].value.iter().map(|v| v * v).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumSquares(a))
    }

    /// Mean over rows with `counted[i]` of `-log softmax(logits[i])[targets[i]]`.
    ///
    /// Panics if no row is counted.
    pub fn mean_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        counted: &[bool],
    ) -> NodeId {
        let x = &self.nodes[logits].value;
        assert_eq!(x.nrows(), targets.len());
        assert_eq!(x.nrows(), counted.len());
        let n_counted = counted.iter().filter(|&&c| c).count();
        assert!(n_counted > 0, "mean_cross_entropy over zero counted rows");
        let mut total = 0.0;
        for (i, row) in x.rows().into_iter().enumerate() {
            if !counted[i] {
                continue;
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let v = Array2::from_elem((1, 1), total / n_counted as f64);
        self.push(v, Op::MeanCrossEntropy(logits, targets.to_vec(), counted.to_vec()))
    }

    /// Backpropagate from a 1×1 `loss` node, accumulating parameter
    /// gradients into `grads` (scaled by `seed`, typically 1.0).
    pub fn backward(&self, loss: NodeId, grads: &mut Grads, seed: f64) {
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss] = Some(Array2::from_elem((1, 1), seed));

        for id in (0..=loss).rev() {
            let d = match adj[id].take() {
                Some(d) => d,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Const => {}
                Op::Param(pid) => {
                    grads.tensors[*pid] += &d;
                }
                Op::MatMul(a, b) => {
                    let da = d.dot(&self.nodes[*b].value.t());
                    let db = self.nodes[*a].value.t().dot(&d);
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, d.clone());
                    accumulate(&mut adj, *b, d);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *a, d.clone());
                    accumulate(&mut adj, *b, -d);
                }
                Op::Mul(a, b) => {
                    let da = &d * &self.nodes[*b].value;
                    let db = &d * &self.nodes[*a].value;
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *b, db);
                }
                Op::Scale(a, f) => {
                    accumulate(&mut adj, *a, d.mapv(|v| v * f));
                }
                Op::Relu(a) => {
                    let da = &d * &self.nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    accumulate(&mut adj, *a, da);
                }
                Op::AddRow(a, row) => {
                    let drow = d.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut adj, *a, d);
                    accumulate(&mut adj, *row, drow);
                }
                Op::MulRow(a, row) => {
                    let da = &d * &self.nodes[*row].value;
                    let drow = (&d * &self.nodes[*a].value)
                        .sum_axis(Axis(0))
                        .insert_axis(Axis(0));
                    accumulate(&mut adj, *a, da);
                    accumulate(&mut adj, *row, drow);
                }
                Op::Gather(table, indices) => {
                    let t = &self.nodes[*table].value;
                    let mut dt = Array2::zeros(t.raw_dim());
                    for (i, &ix) in indices.iter().enumerate() {
                        let mut r = dt.row_mut(ix);
                        r += &d.row(i);
                    }
                    accumulate(&mut adj, *table, dt);
                }
                Op::SliceCols(a, start, len) => {
                    let src = &self.nodes[*a].value;
                    let mut da = Array2::zeros(src.raw_dim());
                    da.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&d);
                    accumulate(&mut adj, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let dp = d.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut adj, p, dp);
                        offset += w;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut adj, *a, d.t().to_owned());
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = &d * y;
                    for (i, mut row) in da.rows_mut().into_iter().enumerate() {
                        let dot: f64 = row.sum();
                        let yrow = y.row(i);
                        for (j, v) in row.iter_mut().enumerate() {
                            *v -= dot * yrow[j];
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::LayerNormRows(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let n = x.ncols() as f64;
                    let mut da = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        let xrow = x.row(i);
                        let yrow = y.row(i);
                        let drow = d.row(i);
                        let mean = xrow.sum() / n;
                        let var =
                            xrow.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
                        let denom = (var + LAYER_NORM_EPS).sqrt();
                        let dmean: f64 = drow.sum() / n;
                        let dy_dot_y: f64 =
                            drow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
                        let mut out = da.row_mut(i);
                        for j in 0..x.ncols() {
                            out[j] = (drow[j] - dmean - yrow[j] * dy_dot_y) / denom;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::SumSquares(a) => {
                    let g = d[[0, 0]];
                    let da = self.nodes[*a].value.mapv(|v| 2.0 * v * g);
                    accumulate(&mut adj, *a, da);
                }
                Op::MeanCrossEntropy(a, targets, counted) => {
                    let g = d[[0, 0]];
                    let x = &self.nodes[*a].value;
                    let n_counted = counted.iter().filter(|&&c| c).count() as f64;
                    let mut da = Array2::zeros(x.raw_dim());
                    for i in 0..x.nrows() {
                        if !counted[i] {
                            continue;
                        }
                        let row = x.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        let mut out = da.row_mut(i);
                        for j in 0..x.ncols() {
                            let p = exps[j] / sum;
                            out[j] = g * (p - if j == targets[i] { 1.0 } else { 0.0 }) / n_counted;
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(adj: &mut [Option<Array2<f64>>], id: NodeId, d: Array2<f64>) {
    match &mut adj[id] {
        Some(existing) => *existing += &d,
        slot => *slot = Some(d),
    }
}

/// Stable row-wise log-softmax, outside the tape (for scoring at eval time).
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    row.iter().map(|z| z - lse).collect()
}
