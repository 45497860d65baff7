//! From images to graphs: patch extraction, k-nearest-neighbor topology,
//! and learnable sigmoid edge weights.
//!
//! An `H×W×C` image is cut into a `G×G` grid of equal patches. Each patch,
//! flattened and scaled to `[0, 1]`, is one graph node; node `gy*G + gx` is
//! the patch at grid row `gy`, column `gx`. Edges connect every node to its
//! k most similar peers under cosine similarity (default) or euclidean
//! distance, found by exhaustive search — no approximate index, so results
//! are exactly reproducible. Neighbor lists are rank-ordered with ties
//! broken toward the lower node index.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{stable_sigmoid, GraphTopology, Tape, Tensor, TensorId};

/// Per-node feature matrix `[N × D]`; row `i` belongs to grid cell `i`.
pub type NodeFeatures = Tensor;

/// Similarity measure for neighbor search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Cosine similarity, larger is closer; zero-norm rows compare as 0.
    Cosine,
    /// Euclidean distance, smaller is closer.
    Euclidean,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::Argument(format!(
                "unknown metric {other:?} (expected \"cosine\" or \"euclidean\")"
            ))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
        })
    }
}

/// Learnable edge-scoring parameters: `alpha_ij = sigmoid(a · [x_i ‖ x_j] + b)`.
///
/// `a` has one entry per concatenated feature (2·D of them, stored `[2D × 1]`
/// so it can sit on the right of a matmul); `b` is a single scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeightParams {
    pub a: Tensor,
    pub b: Tensor,
}

impl EdgeWeightParams {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        if a.numel() % 2 != 0 || a.numel() == 0 {
            return Err(Error::Config(format!(
                "edge weight vector a must have 2*D entries, got {}",
                a.numel()
            )));
        }
        if b.numel() != 1 {
            return Err(Error::Config(format!(
                "edge weight bias b must be scalar, got {} entries",
                b.numel()
            )));
        }
        Ok(Self { a, b })
    }

    /// Feature width D this scorer expects.
    pub fn feature_dim(&self) -> usize {
        self.a.numel() / 2
    }
}

/// Edge weights produced by [`compute_edge_weights`]: `edge[i][r]` weights
/// the edge from node `i` to its rank-`r` neighbor; `self_loop[i]` is
/// `alpha_ii`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    pub edge: Vec<Vec<f64>>,
    pub self_loop: Vec<f64>,
}

/// K-nearest-neighbor graph over patch nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGraph {
    /// Rank-ordered neighbor lists, self excluded.
    pub neighbors: Vec<Vec<usize>>,
    /// Degree normalizer `c_i = |N_i|`.
    pub degree_norm: Vec<f64>,
    /// Edge weights, unset until [`compute_edge_weights`] fills them.
    pub weights: Option<EdgeWeights>,
    /// Construction notes: k clamping, tie-broken selections.
    pub warnings: Vec<String>,
}

impl PatchGraph {
    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Neighbor structure in the form the tape's aggregation ops take.
    pub fn topology(&self) -> Rc<GraphTopology> {
        Rc::new(GraphTopology::new(self.neighbors.clone()))
    }

    /// Flattened edge list in storage order: `(source, target)` pairs,
    /// node-major, neighbors in rank order. This is the order edge-weight
    /// tensors use everywhere.
    pub fn edge_pairs(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src = Vec::with_capacity(self.edge_count());
        let mut dst = Vec::with_capacity(self.edge_count());
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for &j in nbrs {
                src.push(i);
                dst.push(j);
            }
        }
        (src, dst)
    }

    /// Renders the weighted edge list as text: one line per edge,
    /// `i<TAB>j<TAB>alpha` with six decimal places, node-major in rank
    /// order. Requires weights (see [`compute_edge_weights`]).
    pub fn dump_edges(&self) -> Result<String> {
        let Some(w) = &self.weights else {
            return Err(Error::State(
                "edge weights are unset; run compute_edge_weights first".into(),
            ));
        };
        let mut out = String::new();
        for (i, nbrs) in self.neighbors.iter().enumerate() {
            for (rank, &j) in nbrs.iter().enumerate() {
                out.push_str(&format!("{i}\t{j}\t{:.6}\n", w.edge[i][rank]));
            }
        }
        Ok(out)
    }
}

// ── patch extraction ─────────────────────────────────────────────────────

/// Cuts an image into a `grid × grid` matrix of flattened patches.
///
/// Accepts `[H, W, C]` (or `[H, W]`, treated as one channel). Pixel values
/// are scaled to `[0, 1]` by division by 255. The result is `[N × P]` with
/// `N = grid²` and `P = (H/grid)·(W/grid)·C`; within a patch, features are
/// laid out pixel-row-major with channels innermost — the same order the
/// image stores them — so reassembling the rows is a pure permutation.
pub fn patchify(image: &Tensor, grid: usize) -> Result<Tensor> {
    let (h, w, c) = image_dims(image)?;
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: vec![h, w, c],
            rhs: vec![grid, grid],
        });
    }
    let (ph, pw) = (h / grid, w / grid);
    let p = ph * pw * c;
    let n = grid * grid;
    let img = image.data();
    let mut out = vec![0.0; n * p];
    for gy in 0..grid {
        for gx in 0..grid {
            let node = gy * grid + gx;
            let mut f = 0;
            for py in 0..ph {
                let y = gy * ph + py;
                for px in 0..pw {
                    let x = gx * pw + px;
                    for ch in 0..c {
                        out[node * p + f] = img[(y * w + x) * c + ch] / 255.0;
                        f += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, p], out)
}

/// Inverse of [`patchify`] at the scaled level: rebuilds the `[H, W, C]`
/// image of `[0, 1]` values from its patch rows. Exact (a permutation).
pub fn unpatchify(patches: &Tensor, grid: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let (ph, pw) = (h / grid, w / grid);
    let p = ph * pw * c;
    if patches.shape() != [grid * grid, p] || h % grid != 0 || w % grid != 0 {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![grid * grid, p],
        });
    }
    let mut out = vec![0.0; h * w * c];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row(gy * grid + gx);
            let mut f = 0;
            for py in 0..ph {
                let y = gy * ph + py;
                for px in 0..pw {
                    let x = gx * pw + px;
                    for ch in 0..c {
                        out[(y * w + x) * c + ch] = row[f];
                        f += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub(crate) fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match image.shape() {
        [h, w] => Ok((*h, *w, 1)),
        [h, w, c] if *c == 1 || *c == 3 => Ok((*h, *w, *c)),
        other => Err(Error::Dimension {
            op: "image_dims",
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

// ── k-nearest-neighbor search ────────────────────────────────────────────

/// Builds the k-NN graph over node rows by exhaustive pairwise comparison.
///
/// Every node gets `min(k, N−1)` neighbors, rank-ordered best-first; equal
/// scores are broken toward the lower index. If `k >= N` the clamp is
/// recorded in `warnings`, as is any tie straddling the selection boundary
/// (the chosen graph is still deterministic). Weights are left unset.
pub fn knn_graph(nodes: &NodeFeatures, k: usize, metric: Metric) -> Result<PatchGraph> {
    let n = nodes.rows();
    let d = nodes.cols();
    if nodes.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "knn_graph",
            lhs: nodes.shape().to_vec(),
            rhs: vec![n, d],
        });
    }
    if k == 0 {
        return Err(Error::Argument("knn_graph requires k >= 1".into()));
    }
    if n < 2 {
        return Err(Error::Argument(format!(
            "knn_graph requires at least 2 nodes, got {n}"
        )));
    }
    let mut warnings = Vec::new();
    let k_eff = if k >= n {
        warnings.push(format!("k={k} >= node count {n}; clamped to {}", n - 1));
        n - 1
    } else {
        k
    };

    // Precompute norms once for cosine.
    let norms: Vec<f64> = match metric {
        Metric::Cosine => (0..n)
            .map(|i| nodes.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect(),
        Metric::Euclidean => Vec::new(),
    };

    let mut neighbors = Vec::with_capacity(n);
    let mut boundary_ties = 0usize;
    for i in 0..n {
        // Score every other node; higher score = closer for both metrics
        // (euclidean uses negated distance), so one ordering rule serves.
        // NaN scores (possible when features have overflowed during a
        // diverging run) rank last, so construction never panics and the
        // caller's loss checks surface the real problem.
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let s = pair_score(nodes, &norms, metric, i, j);
                (if s.is_nan() { f64::NEG_INFINITY } else { s }, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        if scored.len() > k_eff && scored[k_eff - 1].0 == scored[k_eff].0 {
            boundary_ties += 1;
        }
        neighbors.push(scored[..k_eff].iter().map(|&(_, j)| j).collect());
    }
    if boundary_ties > 0 {
        warnings.push(format!(
            "tied similarities at the selection boundary for {boundary_ties} node(s); \
             broken toward lower indices"
        ));
    }
    let degree_norm = neighbors.iter().map(|l: &Vec<usize>| l.len() as f64).collect();
    Ok(PatchGraph {
        neighbors,
        degree_norm,
        weights: None,
        warnings,
    })
}

fn pair_score(nodes: &Tensor, norms: &[f64], metric: Metric, i: usize, j: usize) -> f64 {
    let (a, b) = (nodes.row(i), nodes.row(j));
    match metric {
        Metric::Cosine => {
            if norms[i] == 0.0 || norms[j] == 0.0 {
                return 0.0;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (norms[i] * norms[j])
        }
        Metric::Euclidean => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            -d2.sqrt()
        }
    }
}

// ── edge weights ─────────────────────────────────────────────────────────

/// Scores every stored edge and self-loop with the learnable sigmoid gate,
/// returning a copy of the graph with weights set and `c_i` refreshed.
///
/// `alpha_ij = sigmoid(a · [x_i ‖ x_j] + b)`, always strictly inside (0, 1).
pub fn compute_edge_weights(
    nodes: &NodeFeatures,
    graph: &PatchGraph,
    params: &EdgeWeightParams,
) -> Result<PatchGraph> {
    let n = nodes.rows();
    let d = nodes.cols();
    if params.feature_dim() != d {
        return Err(Error::Dimension {
            op: "compute_edge_weights",
            lhs: params.a.shape().to_vec(),
            rhs: vec![2 * d],
        });
    }
    if graph.node_count() != n {
        return Err(Error::Dimension {
            op: "compute_edge_weights",
            lhs: vec![graph.node_count()],
            rhs: vec![n],
        });
    }
    let a = params.a.data();
    let b = params.b.data()[0];
    let score = |i: usize, j: usize| -> f64 {
        let (xi, xj) = (nodes.row(i), nodes.row(j));
        let mut s = b;
        for (k, v) in xi.iter().enumerate() {
            s += a[k] * v;
        }
        for (k, v) in xj.iter().enumerate() {
            s += a[d + k] * v;
        }
        stable_sigmoid(s)
    };
    let edge = graph
        .neighbors
        .iter()
        .enumerate()
        .map(|(i, nbrs)| nbrs.iter().map(|&j| score(i, j)).collect())
        .collect();
    let self_loop = (0..n).map(|i| score(i, i)).collect();
    let mut out = graph.clone();
    out.weights = Some(EdgeWeights { edge, self_loop });
    out.degree_norm = out.neighbors.iter().map(|l| l.len() as f64).collect();
    Ok(out)
}

/// Tape version of [`compute_edge_weights`]: builds `(alpha_edge [E×1],
/// alpha_self [N×1])` on the tape so gradients flow into `a`, `b`, *and*
/// the node features. Edge order matches [`PatchGraph::edge_pairs`].
pub fn edge_weight_ids(
    tape: &mut Tape,
    nodes: TensorId,
    graph: &PatchGraph,
    a: TensorId,
    b: TensorId,
) -> Result<(TensorId, TensorId)> {
    let (src, dst) = graph.edge_pairs();
    let xi = tape.gather_rows(nodes, src)?;
    let xj = tape.gather_rows(nodes, dst)?;
    let pairs = tape.concat(&[xi, xj], 1)?;
    let scores = tape.matmul(pairs, a)?;
    let scores = tape.add_row_vec(scores, b)?;
    let alpha_edge = tape.sigmoid(scores)?;

    let selfpairs = tape.concat(&[nodes, nodes], 1)?;
    let sscores = tape.matmul(selfpairs, a)?;
    let sscores = tape.add_row_vec(sscores, b)?;
    let alpha_self = tape.sigmoid(sscores)?;
    Ok((alpha_edge, alpha_self))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_nodes(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    // ── patchify ─────────────────────────────────────────────────────────

    #[test]
    fn patchify_4x4_into_2x2_grid() {
        // Pixels 0..16 laid out row-major; node 0 is the top-left 2x2 patch.
        let img = Tensor::new(vec![4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        let want0: Vec<f64> = [0.0, 1.0, 4.0, 5.0].iter().map(|v| v / 255.0).collect();
        assert_eq!(p.row(0), &want0[..]);
        let want3: Vec<f64> = [10.0, 11.0, 14.0, 15.0].iter().map(|v| v / 255.0).collect();
        assert_eq!(p.row(3), &want3[..]);
    }

    #[test]
    fn patchify_rejects_indivisible_grid() {
        let img = Tensor::zeros(vec![5, 4, 1]);
        assert!(patchify(&img, 2).is_err());
    }

    #[test]
    fn patchify_scales_to_unit_interval() {
        let img = Tensor::new(vec![2, 2, 1], vec![0.0, 255.0, 128.0, 64.0]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(p.data()[1], 1.0);
    }

    #[test]
    fn patchify_roundtrips_losslessly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..6 * 9 * 3).map(|_| f64::from(rng.gen_range(0u8..=255))).collect();
        let img = Tensor::new(vec![6, 9, 3], data).unwrap();
        let p = patchify(&img, 3).unwrap();
        let back = unpatchify(&p, 3, 6, 9, 3).unwrap();
        let scaled: Vec<f64> = img.data().iter().map(|v| v / 255.0).collect();
        assert_eq!(back.data(), &scaled[..], "reassembly must be a permutation");
    }

    // ── knn ──────────────────────────────────────────────────────────────

    #[test]
    fn unit_basis_cosine_ties_break_low() {
        // All pairwise similarities are 0; ties resolve to the lowest index.
        let nodes = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let g = knn_graph(&nodes, 1, Metric::Cosine).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![0]]);
    }

    #[test]
    fn collinear_points_euclidean() {
        let nodes = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0]]).unwrap();
        let g = knn_graph(&nodes, 1, Metric::Euclidean).unwrap();
        assert_eq!(g.neighbors[1], vec![0], "middle point connects to 0");
        assert_eq!(g.neighbors[0], vec![1]);
        assert_eq!(g.neighbors[2], vec![1]);
    }

    #[test]
    fn clamps_k_and_records_warning() {
        let nodes = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let g = knn_graph(&nodes, 5, Metric::Euclidean).unwrap();
        assert!(g.neighbors.iter().all(|l| l.len() == 2));
        assert!(g.warnings.iter().any(|w| w.contains("clamped to 2")), "{:?}", g.warnings);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let nodes = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        assert!(knn_graph(&nodes, 0, Metric::Cosine).is_err());
        let single = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(knn_graph(&single, 1, Metric::Cosine).is_err());
    }

    #[test]
    fn zero_norm_rows_compare_as_zero_similarity() {
        // Node 2 is all-zero: its similarity to everyone is 0, which is
        // *below* the positive similarities among the others, and ties
        // between the others' view of node 2 resolve by index.
        let nodes = Tensor::from_rows(&[
            vec![1.0, 0.2],
            vec![0.9, 0.3],
            vec![0.0, 0.0],
        ])
        .unwrap();
        let g = knn_graph(&nodes, 1, Metric::Cosine).unwrap();
        assert_eq!(g.neighbors[0], vec![1]);
        assert_eq!(g.neighbors[1], vec![0]);
        // The zero node sees similarity 0 to both; tie-break picks node 0.
        assert_eq!(g.neighbors[2], vec![0]);
    }

    #[test]
    fn constant_rows_record_boundary_tie_warning() {
        let nodes = Tensor::from_rows(&vec![vec![0.5, 0.5]; 4]).unwrap();
        let g = knn_graph(&nodes, 2, Metric::Cosine).unwrap();
        assert!(g.warnings.iter().any(|w| w.contains("tied")), "{:?}", g.warnings);
        // Deterministic tie-broken lists: lowest indices first.
        assert_eq!(g.neighbors[3], vec![0, 1]);
    }

    #[test]
    fn neighbor_lists_are_permutation_consistent() {
        // Relabeling nodes relabels neighbor lists, rank order preserved,
        // whenever all similarities are distinct.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = rng.gen_range(4..10);
            let d = rng.gen_range(2..6);
            let nodes = random_nodes(&mut rng, n, d);
            let k = rng.gen_range(1..n - 1);
            let metric = if trial % 2 == 0 { Metric::Cosine } else { Metric::Euclidean };
            let g = knn_graph(&nodes, k, metric).unwrap();
            if !g.warnings.is_empty() {
                continue; // tie: permutation consistency not required
            }
            // permutation: rotate indices by 1
            let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            let mut permuted_rows = vec![vec![]; n];
            for i in 0..n {
                permuted_rows[perm[i]] = nodes.row(i).to_vec();
            }
            let pnodes = Tensor::from_rows(&permuted_rows).unwrap();
            let pg = knn_graph(&pnodes, k, metric).unwrap();
            for i in 0..n {
                let want: Vec<usize> = g.neighbors[i].iter().map(|&j| perm[j]).collect();
                assert_eq!(pg.neighbors[perm[i]], want, "trial {trial} node {i}");
            }
        }
    }

    #[test]
    fn cosine_is_invariant_to_positive_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let n = rng.gen_range(4..9);
            let nodes = random_nodes(&mut rng, n, 4);
            let g = knn_graph(&nodes, 2, Metric::Cosine).unwrap();
            let scaled_rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let s = rng.gen_range(0.1..10.0);
                    nodes.row(i).iter().map(|v| v * s).collect()
                })
                .collect();
            let scaled = Tensor::from_rows(&scaled_rows).unwrap();
            let gs = knn_graph(&scaled, 2, Metric::Cosine).unwrap();
            assert_eq!(g.neighbors, gs.neighbors);
        }
    }

    // ── edge weights ─────────────────────────────────────────────────────

    fn zero_params(d: usize) -> EdgeWeightParams {
        EdgeWeightParams::new(Tensor::zeros(vec![2 * d, 1]), Tensor::zeros(vec![1])).unwrap()
    }

    #[test]
    fn zero_parameters_give_half_weights() {
        let nodes = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = knn_graph(&nodes, 1, Metric::Euclidean).unwrap();
        let gw = compute_edge_weights(&nodes, &g, &zero_params(2)).unwrap();
        let w = gw.weights.unwrap();
        assert!(w.edge.iter().flatten().all(|&a| a == 0.5));
        assert!(w.self_loop.iter().all(|&a| a == 0.5));
    }

    #[test]
    fn dump_requires_weights() {
        let nodes = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let g = knn_graph(&nodes, 1, Metric::Euclidean).unwrap();
        assert!(matches!(g.dump_edges(), Err(Error::State(_))));
    }

    #[test]
    fn dump_lists_every_edge_in_storage_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let nodes = random_nodes(&mut rng, 4, 3);
        // k = n - 1 makes the graph complete: n * (n - 1) lines.
        let g = knn_graph(&nodes, 3, Metric::Cosine).unwrap();
        let a = Tensor::new(vec![6, 1], (0..6).map(|i| 0.1 * f64::from(i)).collect()).unwrap();
        let b = Tensor::new(vec![1], vec![-0.2]).unwrap();
        let gw =
            compute_edge_weights(&nodes, &g, &EdgeWeightParams::new(a, b).unwrap()).unwrap();

        let dump = gw.dump_edges().unwrap();
        let lines: Vec<&str> = dump.lines().collect();
        assert_eq!(lines.len(), 4 * 3);

        let (src, dst) = gw.edge_pairs();
        let w = gw.weights.as_ref().unwrap();
        for (e, line) in lines.iter().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 3, "line {e}: {line:?}");
            assert_eq!(fields[0], src[e].to_string());
            assert_eq!(fields[1], dst[e].to_string());
            let rank = gw.neighbors[src[e]].iter().position(|&j| j == dst[e]).unwrap();
            assert_eq!(fields[2], format!("{:.6}", w.edge[src[e]][rank]));
        }
    }

    #[test]
    fn large_bias_saturates_toward_one() {
        let nodes = Tensor::from_rows(&[vec![0.1], vec![0.2]]).unwrap();
        let g = knn_graph(&nodes, 1, Metric::Euclidean).unwrap();
        let params =
            EdgeWeightParams::new(Tensor::zeros(vec![2, 1]), Tensor::new(vec![1], vec![30.0]).unwrap())
                .unwrap();
        let gw = compute_edge_weights(&nodes, &g, &params).unwrap();
        let w = gw.weights.unwrap();
        assert!(w.edge.iter().flatten().all(|&a| a > 1.0 - 1e-9 && a < 1.0));
    }

    #[test]
    fn weights_stay_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nodes = random_nodes(&mut rng, 6, 3);
        let g = knn_graph(&nodes, 3, Metric::Cosine).unwrap();
        let a = Tensor::new(vec![6, 1], (0..6).map(|i| f64::from(i) - 2.5).collect()).unwrap();
        let b = Tensor::new(vec![1], vec![0.4]).unwrap();
        let gw = compute_edge_weights(&nodes, &g, &EdgeWeightParams::new(a, b).unwrap()).unwrap();
        let w = gw.weights.unwrap();
        for &alpha in w.edge.iter().flatten().chain(w.self_loop.iter()) {
            assert!(alpha > 0.0 && alpha < 1.0);
        }
        assert_eq!(gw.degree_norm, vec![3.0; 6]);
    }

    #[test]
    fn mismatched_scorer_width_is_rejected() {
        let nodes = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let g = knn_graph(&nodes, 1, Metric::Euclidean).unwrap();
        assert!(compute_edge_weights(&nodes, &g, &zero_params(3)).is_err());
    }

    #[test]
    fn tape_route_matches_direct_computation() {
        // The network computes alpha through tape ops; the direct per-edge
        // formula above is the oracle. The two routes must agree.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nodes = random_nodes(&mut rng, 7, 4);
        let g = knn_graph(&nodes, 3, Metric::Cosine).unwrap();
        let a = Tensor::new(vec![8, 1], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![1], vec![rng.gen_range(-0.5..0.5)]).unwrap();
        let params = EdgeWeightParams::new(a.clone(), b.clone()).unwrap();
        let gw = compute_edge_weights(&nodes, &g, &params).unwrap();
        let w = gw.weights.unwrap();

        let mut tape = Tape::new();
        let nid = tape.input(&nodes);
        let aid = tape.input(&a);
        let bid = tape.input(&b);
        let (ae, asl) = edge_weight_ids(&mut tape, nid, &g, aid, bid).unwrap();
        let flat_direct: Vec<f64> = w.edge.iter().flatten().copied().collect();
        for (t, d) in tape.value(ae).iter().zip(&flat_direct) {
            assert!((t - d).abs() <= 1e-12);
        }
        for (t, d) in tape.value(asl).iter().zip(&w.self_loop) {
            assert!((t - d).abs() <= 1e-12);
        }
    }

    #[test]
    fn edge_weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let nodes = random_nodes(&mut rng, 5, 3);
        let g = knn_graph(&nodes, 2, Metric::Cosine).unwrap();
        let a0 = Tensor::new(vec![6, 1], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let b0 = Tensor::new(vec![1], vec![0.2]).unwrap();

        let loss = |nodes: &Tensor, a: &Tensor, b: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let nid = tape.input(nodes);
            let aid = tape.input(a);
            let bid = tape.input(b);
            let (ae, asl) = edge_weight_ids(&mut tape, nid, &g, aid, bid).unwrap();
            let se = tape.sum_all(ae).unwrap();
            let ss = tape.sum_all(asl).unwrap();
            let total = tape.add(se, ss).unwrap();
            tape.value(total)[0]
        };

        let mut tape = Tape::new();
        let nid = tape.input(&nodes);
        let aid = tape.input(&a0);
        let bid = tape.input(&b0);
        let (ae, asl) = edge_weight_ids(&mut tape, nid, &g, aid, bid).unwrap();
        let se = tape.sum_all(ae).unwrap();
        let ss = tape.sum_all(asl).unwrap();
        let total = tape.add(se, ss).unwrap();
        tape.backward(total).unwrap();

        let h = 1e-5;
        let check = |analytic: &[f64], base: &Tensor, which: usize| {
            for e in 0..base.numel() {
                let mut plus = base.clone();
                plus.nudge(e, h);
                let mut minus = base.clone();
                minus.nudge(e, -h);
                let (fp, fm) = match which {
                    0 => (loss(&plus, &a0, &b0), loss(&minus, &a0, &b0)),
                    1 => (loss(&nodes, &plus, &b0), loss(&nodes, &minus, &b0)),
                    _ => (loss(&nodes, &a0, &plus), loss(&nodes, &a0, &minus)),
                };
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic[e];
                let rel = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
                assert!(rel < 1e-4, "input {which} elem {e}: {a} vs {numeric}");
            }
        };
        check(tape.grad(nid).unwrap(), &nodes, 0);
        check(tape.grad(aid).unwrap(), &a0, 1);
        check(tape.grad(bid).unwrap(), &b0, 2);
    }
}
