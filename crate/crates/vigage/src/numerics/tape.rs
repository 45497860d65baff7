//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only arena: every operation pushes one node
//! (values + shape + a record of how it was computed) and returns a
//! [`TensorId`] indexing into the arena. `backward` walks the records in
//! reverse, accumulating gradients additively — exactly the discipline a
//! network with residual connections needs, since a tensor feeding several
//! consumers receives the sum of their contributions.
//!
//! Conventions baked into the ops:
//! - everything is `f64`,
//! - 2-D tensors are row-major; node features are rows,
//! - subgradients at kinks are 0 (`relu` at 0, `abs` at 0),
//! - summation orders are fixed (ascending indices), so replaying a tape on
//!   the same inputs is bit-identical.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Neighbor structure consumed by the graph-aggregation ops: rank-ordered
/// neighbor lists (self excluded) plus the degree normalizer `c_i = |N_i|`.
/// Shared behind `Rc` so one graph can feed many ops without copies.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphTopology {
    pub neighbors: Vec<Vec<usize>>,
    pub degree: Vec<f64>,
}

impl GraphTopology {
    pub fn new(neighbors: Vec<Vec<usize>>) -> Self {
        let degree = neighbors.iter().map(|n| n.len() as f64).collect();
        Self { neighbors, degree }
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

/// How a node was produced; inputs are ids of earlier nodes.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    Add { a: TensorId, b: TensorId },
    AddRowVec { a: TensorId, v: TensorId },
    AddScalar { a: TensorId },
    Scale { a: TensorId, c: f64 },
    Mul { a: TensorId, b: TensorId },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    Abs { a: TensorId },
    SoftmaxRows { a: TensorId },
    Concat { parts: Vec<TensorId>, axis: usize },
    SliceCols { a: TensorId, start: usize, end: usize },
    GatherRows { a: TensorId, idx: Rc<Vec<usize>> },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    AggregateWeighted {
        neighbors: TensorId,
        selfm: TensorId,
        alpha_edge: TensorId,
        alpha_self: TensorId,
        topo: Rc<GraphTopology>,
    },
    AggregateSum {
        neighbors: TensorId,
        selfm: TensorId,
        topo: Rc<GraphTopology>,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// Wengert tape: ordered op records plus the values they produced.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// ── shape helpers ────────────────────────────────────────────────────────

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (shape[0], 1),
        _ => (shape[0], shape[1]),
    }
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

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> TensorId {
        self.nodes.push(Node { data, shape, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    /// Registers an input leaf, copying the tensor's values.
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf)
    }

    /// Registers an input leaf with an explicit shape holding the same data
    /// (e.g. view a `[2D]` parameter vector as a `[2D, 1]` matmul operand).
    /// Gradients read back from the leaf have the underlying flat layout, so
    /// they accumulate into the original tensor unchanged.
    pub fn input_reshaped(&mut self, t: &Tensor, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Dimension {
                op: "input_reshaped",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(self.push(t.data().to_vec(), shape, Op::Leaf))
    }

    /// Registers a leaf from raw parts.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension {
                op: "leaf",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape, Op::Leaf))
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Copies the node out as a standalone tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape node is internally consistent")
    }

    /// Gradient of the last `backward` root w.r.t. this node, if it was
    /// reached by the backward sweep.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `a @ b` for 2-D operands: `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = dims2(self.shape(a));
        let (kb, n) = dims2(self.shape(b));
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for kk in 0..ka {
                    let aik = av[i * ka + kk];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        Ok(self.push(out, vec![m, n], Op::Matmul { a, b }))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push(out, vec![n, m], Op::Transpose { a }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add { a, b }))
    }

    /// Adds a vector to every row of a 2-D tensor (bias broadcast).
    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        let vlen: usize = self.shape(v).iter().product();
        if vlen != n {
            return Err(Error::Dimension {
                op: "add_row_vec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let av = self.value(a);
        let vv = self.value(v);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + vv[j];
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddRowVec { a, v }))
    }

    /// Adds a constant to every element.
    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddScalar { a }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Scale { a, c }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul { a, b }))
    }

    /// Elementwise `max(0, x)`.
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Relu { a }))
    }

    /// Elementwise logistic sigmoid, computed in the numerically stable
    /// branch form so large |x| neither overflows nor loses the tail.
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Sigmoid { a }))
    }

    /// Elementwise absolute value.
    pub fn abs(&mut self, a: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.abs()).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Abs { a }))
    }

    /// Row-wise softmax of a 2-D tensor, shifted by the row max for
    /// stability; each output row sums to 1 and is strictly positive.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if n == 0 {
            return Err(Error::Argument("softmax_rows on zero-width tensor".into()));
        }
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        Ok(self.push(out, vec![m, n], Op::SoftmaxRows { a }))
    }

    /// Concatenates 2-D tensors along `axis` (0 = stack rows, 1 = widen).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        if axis > 1 {
            return Err(Error::Argument(format!("concat axis {axis} out of range")));
        }
        let (m0, n0) = dims2(self.shape(parts[0]));
        for &p in &parts[1..] {
            let (m, n) = dims2(self.shape(p));
            let compatible = if axis == 0 { n == n0 } else { m == m0 };
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (rows, cols, out) = if axis == 0 {
            let rows: usize = parts.iter().map(|&p| dims2(self.shape(p)).0).sum();
            let mut out = Vec::with_capacity(rows * n0);
            for &p in parts {
                out.extend_from_slice(self.value(p));
            }
            (rows, n0, out)
        } else {
            let cols: usize = parts.iter().map(|&p| dims2(self.shape(p)).1).sum();
            let mut out = vec![0.0; m0 * cols];
            let mut col_off = 0;
            for &p in parts {
                let (_, n) = dims2(self.shape(p));
                let pv = self.value(p);
                for i in 0..m0 {
                    out[i * cols + col_off..i * cols + col_off + n]
                        .copy_from_slice(&pv[i * n..(i + 1) * n]);
                }
                col_off += n;
            }
            (m0, cols, out)
        };
        Ok(self.push(
            out,
            vec![rows, cols],
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Copies the column range `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if start >= end || end > n {
            return Err(Error::Argument(format!(
                "slice_cols [{start}, {end}) out of range for {n} columns"
            )));
        }
        let av = self.value(a);
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&av[i * n + start..i * n + end]);
        }
        Ok(self.push(out, vec![m, w], Op::SliceCols { a, start, end }))
    }

    /// Gathers rows of a 2-D tensor by index (duplicates allowed); the
    /// backward pass scatter-adds, so repeated rows accumulate.
    pub fn gather_rows(&mut self, a: TensorId, idx: Vec<usize>) -> Result<TensorId> {
        let (m, n) = dims2(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Argument(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let av = self.value(a);
        let mut out = vec![0.0; idx.len() * n];
        for (r, &i) in idx.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
        }
        let rows = idx.len();
        Ok(self.push(
            out,
            vec![rows, n],
            Op::GatherRows {
                a,
                idx: Rc::new(idx),
            },
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(a).iter().sum();
        Ok(self.push(vec![s], vec![1], Op::SumAll { a }))
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Argument("mean_all of empty tensor".into()));
        }
        let s: f64 = self.value(a).iter().sum();
        Ok(self.push(vec![s / n as f64], vec![1], Op::MeanAll { a }))
    }

    /// Edge-weighted neighborhood aggregation:
    ///
    /// `out[i] = sum_{j in N_i} (alpha_ij / c_i) * neighbors[j] + alpha_ii * selfm[i]`
    ///
    /// where `alpha_edge` is flattened node-major in neighbor rank order and
    /// `c_i` is the degree normalizer from the topology. Differentiable in
    /// all four tensor inputs; the topology itself is discrete.
    pub fn aggregate_weighted(
        &mut self,
        neighbors: TensorId,
        selfm: TensorId,
        alpha_edge: TensorId,
        alpha_self: TensorId,
        topo: Rc<GraphTopology>,
    ) -> Result<TensorId> {
        let (nn, d) = dims2(self.shape(neighbors));
        let (ns, ds) = dims2(self.shape(selfm));
        let n_nodes = topo.node_count();
        let n_edges = topo.edge_count();
        if nn != n_nodes || ns != n_nodes || d != ds {
            return Err(Error::Dimension {
                op: "aggregate_weighted",
                lhs: self.shape(neighbors).to_vec(),
                rhs: self.shape(selfm).to_vec(),
            });
        }
        let ae_len: usize = self.shape(alpha_edge).iter().product();
        let as_len: usize = self.shape(alpha_self).iter().product();
        if ae_len != n_edges || as_len != n_nodes {
            return Err(Error::Dimension {
                op: "aggregate_weighted(alpha)",
                lhs: vec![ae_len, as_len],
                rhs: vec![n_edges, n_nodes],
            });
        }
        let tn = self.value(neighbors);
        let t0 = self.value(selfm);
        let ae = self.value(alpha_edge);
        let asl = self.value(alpha_self);
        let mut out = vec![0.0; n_nodes * d];
        let mut e = 0;
        for i in 0..n_nodes {
            let ci = topo.degree[i];
            let orow = &mut out[i * d..(i + 1) * d];
            for &j in &topo.neighbors[i] {
                let w = ae[e] / ci;
                let jrow = &tn[j * d..(j + 1) * d];
                for k in 0..d {
                    orow[k] += w * jrow[k];
                }
                e += 1;
            }
            let w = asl[i];
            let irow = &t0[i * d..(i + 1) * d];
            for k in 0..d {
                orow[k] += w * irow[k];
            }
        }
        Ok(self.push(
            out,
            vec![n_nodes, d],
            Op::AggregateWeighted {
                neighbors,
                selfm,
                alpha_edge,
                alpha_self,
                topo,
            },
        ))
    }

    /// Unweighted neighborhood aggregation:
    ///
    /// `out[i] = sum_{j in N_i} neighbors[j] + selfm[i]`
    pub fn aggregate_sum(
        &mut self,
        neighbors: TensorId,
        selfm: TensorId,
        topo: Rc<GraphTopology>,
    ) -> Result<TensorId> {
        let (nn, d) = dims2(self.shape(neighbors));
        let (ns, ds) = dims2(self.shape(selfm));
        let n_nodes = topo.node_count();
        if nn != n_nodes || ns != n_nodes || d != ds {
            return Err(Error::Dimension {
                op: "aggregate_sum",
                lhs: self.shape(neighbors).to_vec(),
                rhs: self.shape(selfm).to_vec(),
            });
        }
        let tn = self.value(neighbors);
        let t0 = self.value(selfm);
        let mut out = vec![0.0; n_nodes * d];
        for i in 0..n_nodes {
            let orow = &mut out[i * d..(i + 1) * d];
            for &j in &topo.neighbors[i] {
                let jrow = &tn[j * d..(j + 1) * d];
                for k in 0..d {
                    orow[k] += jrow[k];
                }
            }
            let irow = &t0[i * d..(i + 1) * d];
            for k in 0..d {
                orow[k] += irow[k];
            }
        }
        Ok(self.push(
            out,
            vec![n_nodes, d],
            Op::AggregateSum {
                neighbors,
                selfm,
                topo,
            },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root: seeds `d(root)/d(root) = 1` and
    /// accumulates gradients into every node that influenced it.
    pub fn backward(&mut self, root: TensorId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::Argument(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(vec![1.0]);

        for k in (0..=root.0).rev() {
            let Some(gout) = self.grads[k].take() else {
                continue;
            };
            self.step_backward(k, &gout);
            self.grads[k] = Some(gout);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: TensorId, delta: Vec<f64>) {
        match &mut self.grads[id.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn step_backward(&mut self, k: usize, gout: &[f64]) {
        let op = self.nodes[k].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, ka) = dims2(self.shape(a));
                let (_, n) = dims2(self.shape(b));
                let mut da = vec![0.0; m * ka];
                let mut db = vec![0.0; ka * n];
                {
                    let av = &self.nodes[a.0].data;
                    let bv = &self.nodes[b.0].data;
                    // dA = dC · B^T
                    for i in 0..m {
                        for kk in 0..ka {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gout[i * n + j] * bv[kk * n + j];
                            }
                            da[i * ka + kk] = s;
                        }
                    }
                    // dB = A^T · dC
                    for i in 0..m {
                        for kk in 0..ka {
                            let aik = av[i * ka + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += aik * gout[i * n + j];
                            }
                        }
                    }
                }
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Transpose { a } => {
                let (m, n) = dims2(self.shape(a));
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = gout[j * m + i];
                    }
                }
                self.accumulate(a, da);
            }
            Op::Add { a, b } => {
                self.accumulate(a, gout.to_vec());
                self.accumulate(b, gout.to_vec());
            }
            Op::AddRowVec { a, v } => {
                let (m, n) = dims2(self.shape(a));
                self.accumulate(a, gout.to_vec());
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += gout[i * n + j];
                    }
                }
                self.accumulate(v, dv);
            }
            Op::AddScalar { a } => {
                self.accumulate(a, gout.to_vec());
            }
            Op::Scale { a, c } => {
                self.accumulate(a, gout.iter().map(|g| g * c).collect());
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Relu { a } => {
                // Subgradient at the kink is 0.
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                #[cfg(feature = "corrupt-grad")]
                let da: Vec<f64> = da.iter().map(|g| g * 1.01).collect();
                self.accumulate(a, da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[k].data)
                    .map(|(g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(a, da);
            }
            Op::Abs { a } => {
                // Subgradient at 0 is 0.
                let da: Vec<f64> = gout
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -*g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(a, da);
            }
            Op::SoftmaxRows { a } => {
                let (m, n) = dims2(self.shape(a));
                let y = &self.nodes[k].data;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let yrow = &y[i * n..(i + 1) * n];
                    let grow = &gout[i * n..(i + 1) * n];
                    let dot: f64 = yrow.iter().zip(grow).map(|(yj, gj)| yj * gj).sum();
                    for j in 0..n {
                        da[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(a, da);
            }
            Op::Concat { parts, axis } => {
                let (_, cols) = dims2(&self.nodes[k].shape);
                if axis == 0 {
                    let mut row_off = 0;
                    for p in parts {
                        let (pm, pn) = dims2(self.shape(p));
                        let start = row_off * cols;
                        self.accumulate(p, gout[start..start + pm * pn].to_vec());
                        row_off += pm;
                    }
                } else {
                    let (m, _) = dims2(&self.nodes[k].shape);
                    let mut col_off = 0;
                    for p in parts {
                        let (_, pn) = dims2(self.shape(p));
                        let mut dp = vec![0.0; m * pn];
                        for i in 0..m {
                            dp[i * pn..(i + 1) * pn].copy_from_slice(
                                &gout[i * cols + col_off..i * cols + col_off + pn],
                            );
                        }
                        self.accumulate(p, dp);
                        col_off += pn;
                    }
                }
            }
            Op::SliceCols { a, start, end } => {
                let (m, n) = dims2(self.shape(a));
                let w = end - start;
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + start..i * n + end].copy_from_slice(&gout[i * w..(i + 1) * w]);
                }
                self.accumulate(a, da);
            }
            Op::GatherRows { a, idx } => {
                let (m, n) = dims2(self.shape(a));
                let mut da = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += gout[r * n + j];
                    }
                }
                self.accumulate(a, da);
            }
            Op::SumAll { a } => {
                let n = self.nodes[a.0].data.len();
                self.accumulate(a, vec![gout[0]; n]);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                self.accumulate(a, vec![gout[0] / n as f64; n]);
            }
            Op::AggregateWeighted {
                neighbors,
                selfm,
                alpha_edge,
                alpha_self,
                topo,
            } => {
                let (_, d) = dims2(&self.nodes[k].shape);
                let n_nodes = topo.node_count();
                let mut dtn = vec![0.0; n_nodes * d];
                let mut dt0 = vec![0.0; n_nodes * d];
                let mut dae = vec![0.0; topo.edge_count()];
                let mut das = vec![0.0; n_nodes];
                {
                    let tn = &self.nodes[neighbors.0].data;
                    let t0 = &self.nodes[selfm.0].data;
                    let ae = &self.nodes[alpha_edge.0].data;
                    let asl = &self.nodes[alpha_self.0].data;
                    let mut e = 0;
                    for i in 0..n_nodes {
                        let ci = topo.degree[i];
                        let grow = &gout[i * d..(i + 1) * d];
                        for &j in &topo.neighbors[i] {
                            let jrow = &tn[j * d..(j + 1) * d];
                            let w = ae[e] / ci;
                            let mut dot = 0.0;
                            for kk in 0..d {
                                dtn[j * d + kk] += w * grow[kk];
                                dot += jrow[kk] * grow[kk];
                            }
                            dae[e] = dot / ci;
                            e += 1;
                        }
                        let irow = &t0[i * d..(i + 1) * d];
                        let mut dot = 0.0;
                        for kk in 0..d {
                            dt0[i * d + kk] += asl[i] * grow[kk];
                            dot += irow[kk] * grow[kk];
                        }
                        das[i] = dot;
                    }
                }
                self.accumulate(neighbors, dtn);
                self.accumulate(selfm, dt0);
                self.accumulate(alpha_edge, dae);
                self.accumulate(alpha_self, das);
            }
            Op::AggregateSum {
                neighbors,
                selfm,
                topo,
            } => {
                let (_, d) = dims2(&self.nodes[k].shape);
                let n_nodes = topo.node_count();
                let mut dtn = vec![0.0; n_nodes * d];
                for i in 0..n_nodes {
                    let grow = &gout[i * d..(i + 1) * d];
                    for &j in &topo.neighbors[i] {
                        for kk in 0..d {
                            dtn[j * d + kk] += grow[kk];
                        }
                    }
                }
                self.accumulate(neighbors, dtn);
                self.accumulate(selfm, gout.to_vec());
            }
        }
    }
}

/// Logistic sigmoid without overflow for large negative inputs.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
