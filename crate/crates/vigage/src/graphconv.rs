//! Two-step relational graph convolution with a multi-head linear update.
//!
//! Step 1 aggregates transformed neighbor features gated by the learned
//! edge weights and normalized by the neighborhood size:
//!
//! `h1_i = relu( sum_{j in N_i} (alpha_ij / c_i) · g_j W_r1  +  alpha_ii · g_i W_01 )`
//!
//! Step 2 aggregates again over the same topology but — deliberately —
//! without edge weights or degree normalization (the source formulation
//! omits both; `normalize_step2` restores them for comparison):
//!
//! `h2_i = relu( sum_{j in N_i} h1_j W_r2  +  h1_i W_02 )`
//!
//! The multi-head update then splits each row into `t` contiguous chunks,
//! transforms each with its own `(D/t)×(D/t)` matrix, and re-concatenates —
//! a block-diagonal linear map. A full [`gc_layer`] is step 1, step 2, the
//! update, and optionally multi-head self-attention over the result.

use std::rc::Rc;

use crate::attention::{attention_ids, AttentionParams, HeadIds};
use crate::error::{Error, Result};
use crate::numerics::{GraphTopology, Tape, Tensor, TensorId};
use crate::patchgraph::PatchGraph;

/// Graph-convolution parameters: four `D×D` transforms and `t` update heads
/// of shape `(D/t)×(D/t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcParams {
    pub w_r1: Tensor,
    pub w_01: Tensor,
    pub w_r2: Tensor,
    pub w_02: Tensor,
    pub update: Vec<Tensor>,
}

impl GcParams {
    /// Validates shapes: all four transforms square `D×D`, `D` divisible by
    /// the number of update heads, every head `(D/t)×(D/t)`.
    pub fn new(
        w_r1: Tensor,
        w_01: Tensor,
        w_r2: Tensor,
        w_02: Tensor,
        update: Vec<Tensor>,
    ) -> Result<Self> {
        let d = w_r1.rows();
        for (name, w) in [("w_r1", &w_r1), ("w_01", &w_01), ("w_r2", &w_r2), ("w_02", &w_02)] {
            if w.shape() != [d, d] {
                return Err(Error::Config(format!(
                    "{name} must be [{d}, {d}], got {:?}",
                    w.shape()
                )));
            }
        }
        let t = update.len();
        if t == 0 || d % t != 0 {
            return Err(Error::Config(format!(
                "feature dim {d} is not divisible by {t} update heads"
            )));
        }
        let dm = d / t;
        for (i, w) in update.iter().enumerate() {
            if w.shape() != [dm, dm] {
                return Err(Error::Config(format!(
                    "update head {i} must be [{dm}, {dm}], got {:?}",
                    w.shape()
                )));
            }
        }
        Ok(Self { w_r1, w_01, w_r2, w_02, update })
    }

    pub fn feature_dim(&self) -> usize {
        self.w_r1.rows()
    }

    pub fn head_count(&self) -> usize {
        self.update.len()
    }
}

/// Registered tape leaves for one [`GcParams`].
#[derive(Debug, Clone)]
pub struct GcIds {
    pub w_r1: TensorId,
    pub w_01: TensorId,
    pub w_r2: TensorId,
    pub w_02: TensorId,
    pub update: Vec<TensorId>,
}

impl GcIds {
    pub fn register(tape: &mut Tape, params: &GcParams) -> Self {
        Self {
            w_r1: tape.input(&params.w_r1),
            w_01: tape.input(&params.w_01),
            w_r2: tape.input(&params.w_r2),
            w_02: tape.input(&params.w_02),
            update: params.update.iter().map(|w| tape.input(w)).collect(),
        }
    }
}

// ── tape builders ────────────────────────────────────────────────────────

/// Step 1 on the tape: edge-weighted, degree-normalized aggregation.
pub fn gc_step1_ids(
    tape: &mut Tape,
    nodes: TensorId,
    topo: &Rc<GraphTopology>,
    alpha_edge: TensorId,
    alpha_self: TensorId,
    w_r1: TensorId,
    w_01: TensorId,
) -> Result<TensorId> {
    let tn = tape.matmul(nodes, w_r1)?;
    let t0 = tape.matmul(nodes, w_01)?;
    let agg = tape.aggregate_weighted(tn, t0, alpha_edge, alpha_self, Rc::clone(topo))?;
    tape.relu(agg)
}

/// Step 2 on the tape: plain-sum aggregation by default; pass the alpha
/// pair to restore step-1-style weighting (`normalize_step2`).
pub fn gc_step2_ids(
    tape: &mut Tape,
    h1: TensorId,
    topo: &Rc<GraphTopology>,
    w_r2: TensorId,
    w_02: TensorId,
    alphas: Option<(TensorId, TensorId)>,
) -> Result<TensorId> {
    let tn = tape.matmul(h1, w_r2)?;
    let t0 = tape.matmul(h1, w_02)?;
    let agg = match alphas {
        Some((ae, asl)) => tape.aggregate_weighted(tn, t0, ae, asl, Rc::clone(topo))?,
        None => tape.aggregate_sum(tn, t0, Rc::clone(topo))?,
    };
    tape.relu(agg)
}

/// Multi-head update on the tape: block-diagonal transform of row chunks.
pub fn multihead_update_ids(
    tape: &mut Tape,
    h: TensorId,
    update: &[TensorId],
) -> Result<TensorId> {
    let d = tape.shape(h)[1];
    let t = update.len();
    if t == 0 || d % t != 0 {
        return Err(Error::Config(format!(
            "feature dim {d} is not divisible by {t} update heads"
        )));
    }
    let dm = d / t;
    let mut parts = Vec::with_capacity(t);
    for (c, &w) in update.iter().enumerate() {
        let chunk = tape.slice_cols(h, c * dm, (c + 1) * dm)?;
        parts.push(tape.matmul(chunk, w)?);
    }
    tape.concat(&parts, 1)
}

/// Full graph-convolution layer on the tape: step 1 → step 2 → multi-head
/// update → (optionally) multi-head self-attention.
#[allow(clippy::too_many_arguments)]
pub fn gc_layer_ids(
    tape: &mut Tape,
    nodes: TensorId,
    topo: &Rc<GraphTopology>,
    alpha_edge: TensorId,
    alpha_self: TensorId,
    gc: &GcIds,
    attention: Option<&[HeadIds]>,
    normalize_step2: bool,
    scaled_attention: bool,
) -> Result<TensorId> {
    let h1 = gc_step1_ids(tape, nodes, topo, alpha_edge, alpha_self, gc.w_r1, gc.w_01)?;
    let step2_alphas = normalize_step2.then_some((alpha_edge, alpha_self));
    let h2 = gc_step2_ids(tape, h1, topo, gc.w_r2, gc.w_02, step2_alphas)?;
    let updated = multihead_update_ids(tape, h2, &gc.update)?;
    match attention {
        Some(heads) => attention_ids(tape, updated, updated, updated, heads, scaled_attention),
        None => Ok(updated),
    }
}

// ── plain wrappers ───────────────────────────────────────────────────────

/// Registers a weighted graph's alpha values as tape leaves
/// (`[E×1]` edge weights in storage order, `[N×1]` self-loops).
pub fn weight_leaves(tape: &mut Tape, graph: &PatchGraph) -> Result<(TensorId, TensorId)> {
    let Some(w) = &graph.weights else {
        return Err(Error::State(
            "graph edge weights are unset; run compute_edge_weights first".into(),
        ));
    };
    let flat: Vec<f64> = w.edge.iter().flatten().copied().collect();
    let e = flat.len();
    let ae = tape.leaf(flat, vec![e, 1])?;
    let n = w.self_loop.len();
    let asl = tape.leaf(w.self_loop.clone(), vec![n, 1])?;
    Ok((ae, asl))
}

/// Step 1 as a plain tensor function; the graph must carry edge weights.
pub fn gc_step1(nodes: &Tensor, graph: &PatchGraph, params: &GcParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nid = tape.input(nodes);
    let (ae, asl) = weight_leaves(&mut tape, graph)?;
    let ids = GcIds::register(&mut tape, params);
    let topo = graph.topology();
    let out = gc_step1_ids(&mut tape, nid, &topo, ae, asl, ids.w_r1, ids.w_01)?;
    Ok(tape.tensor(out))
}

/// Step 2 as a plain tensor function. With `normalize` the graph's weights
/// are applied exactly as in step 1; without it they are ignored entirely.
pub fn gc_step2(
    h1: &Tensor,
    graph: &PatchGraph,
    params: &GcParams,
    normalize: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hid = tape.input(h1);
    let ids = GcIds::register(&mut tape, params);
    let topo = graph.topology();
    let alphas = if normalize {
        Some(weight_leaves(&mut tape, graph)?)
    } else {
        None
    };
    let out = gc_step2_ids(&mut tape, hid, &topo, ids.w_r2, ids.w_02, alphas)?;
    Ok(tape.tensor(out))
}

/// Multi-head update as a plain tensor function.
pub fn multihead_update(h: &Tensor, params: &GcParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let hid = tape.input(h);
    let ids: Vec<TensorId> = params.update.iter().map(|w| tape.input(w)).collect();
    let out = multihead_update_ids(&mut tape, hid, &ids)?;
    Ok(tape.tensor(out))
}

/// Full layer as a plain tensor function.
pub fn gc_layer(
    nodes: &Tensor,
    graph: &PatchGraph,
    params: &GcParams,
    attention: Option<&AttentionParams>,
    normalize_step2: bool,
    scaled_attention: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let nid = tape.input(nodes);
    let (ae, asl) = weight_leaves(&mut tape, graph)?;
    let ids = GcIds::register(&mut tape, params);
    let head_ids: Option<Vec<HeadIds>> = attention.map(|p| {
        p.heads
            .iter()
            .map(|h| (tape.input(&h.wq), tape.input(&h.wk), tape.input(&h.wv)))
            .collect()
    });
    let topo = graph.topology();
    let out = gc_layer_ids(
        &mut tape,
        nid,
        &topo,
        ae,
        asl,
        &ids,
        head_ids.as_deref(),
        normalize_step2,
        scaled_attention,
    )?;
    Ok(tape.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionHead;
    use crate::patchgraph::{compute_edge_weights, knn_graph, EdgeWeightParams, EdgeWeights, Metric};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Tensor::new(vec![n, n], d).unwrap()
    }

    fn random_tensor(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn identity_gc(d: usize, t: usize) -> GcParams {
        GcParams::new(eye(d), eye(d), eye(d), eye(d), vec![eye(d / t); t]).unwrap()
    }

    fn random_gc(rng: &mut ChaCha8Rng, d: usize, t: usize) -> GcParams {
        GcParams::new(
            random_tensor(rng, d, d),
            random_tensor(rng, d, d),
            random_tensor(rng, d, d),
            random_tensor(rng, d, d),
            (0..t).map(|_| random_tensor(rng, d / t, d / t)).collect(),
        )
        .unwrap()
    }

    /// Graph with explicit weights, built by hand for constructed cases.
    fn manual_graph(neighbors: Vec<Vec<usize>>, edge: Vec<Vec<f64>>, self_loop: Vec<f64>) -> PatchGraph {
        let degree_norm = neighbors.iter().map(|l| l.len() as f64).collect();
        PatchGraph {
            neighbors,
            degree_norm,
            weights: Some(EdgeWeights { edge, self_loop }),
            warnings: vec![],
        }
    }

    /// Random weighted graph over n nodes (every alpha in (0,1)).
    fn random_graph(rng: &mut ChaCha8Rng, nodes: &Tensor, k: usize) -> PatchGraph {
        let d = nodes.cols();
        let g = knn_graph(nodes, k, Metric::Cosine).unwrap();
        let a = random_tensor(rng, 2 * d, 1);
        let b = Tensor::new(vec![1], vec![rng.gen_range(-0.3..0.3)]).unwrap();
        compute_edge_weights(nodes, &g, &EdgeWeightParams::new(a, b).unwrap()).unwrap()
    }

    // ── explicit-loop oracles ────────────────────────────────────────────

    fn matvec_row(g: &Tensor, i: usize, w: &Tensor) -> Vec<f64> {
        let d = w.cols();
        (0..d)
            .map(|e| (0..g.cols()).map(|k| g.at(i, k) * w.at(k, e)).sum())
            .collect()
    }

    fn step1_oracle(nodes: &Tensor, graph: &PatchGraph, p: &GcParams) -> Vec<Vec<f64>> {
        let w = graph.weights.as_ref().unwrap();
        let d = p.feature_dim();
        (0..nodes.rows())
            .map(|i| {
                let mut acc = vec![0.0; d];
                let ci = graph.degree_norm[i];
                for (r, &j) in graph.neighbors[i].iter().enumerate() {
                    let tj = matvec_row(nodes, j, &p.w_r1);
                    for e in 0..d {
                        acc[e] += w.edge[i][r] / ci * tj[e];
                    }
                }
                let ti = matvec_row(nodes, i, &p.w_01);
                for e in 0..d {
                    acc[e] += w.self_loop[i] * ti[e];
                    acc[e] = acc[e].max(0.0);
                }
                acc
            })
            .collect()
    }

    fn step2_oracle(h1: &Tensor, graph: &PatchGraph, p: &GcParams, normalize: bool) -> Vec<Vec<f64>> {
        let d = p.feature_dim();
        (0..h1.rows())
            .map(|i| {
                let mut acc = vec![0.0; d];
                for (r, &j) in graph.neighbors[i].iter().enumerate() {
                    let tj = matvec_row(h1, j, &p.w_r2);
                    let scale = if normalize {
                        graph.weights.as_ref().unwrap().edge[i][r] / graph.degree_norm[i]
                    } else {
                        1.0
                    };
                    for e in 0..d {
                        acc[e] += scale * tj[e];
                    }
                }
                let ti = matvec_row(h1, i, &p.w_02);
                let sscale = if normalize {
                    graph.weights.as_ref().unwrap().self_loop[i]
                } else {
                    1.0
                };
                for e in 0..d {
                    acc[e] += sscale * ti[e];
                    acc[e] = acc[e].max(0.0);
                }
                acc
            })
            .collect()
    }

    // ── constructed cases ────────────────────────────────────────────────

    #[test]
    fn isolated_node_with_unit_self_loop_is_identity() {
        // One node, empty neighborhood, alpha_ii = 1, W_01 = I: step 1
        // reduces to relu(g) = g for non-negative g.
        let g = manual_graph(vec![vec![]], vec![vec![]], vec![1.0]);
        let nodes = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let out = gc_step1(&nodes, &g, &identity_gc(2, 1)).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn step1_applies_relu() {
        let g = manual_graph(vec![vec![]], vec![vec![]], vec![1.0]);
        let nodes = Tensor::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        let out = gc_step1(&nodes, &g, &identity_gc(2, 1)).unwrap();
        assert_eq!(out.data(), &[0.0, 2.0]);
    }

    #[test]
    fn step1_requires_weights() {
        let nodes = Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let g = knn_graph(&nodes, 1, Metric::Euclidean).unwrap();
        let err = gc_step1(&nodes, &g, &identity_gc(1, 1)).unwrap_err();
        assert!(err.to_string().contains("unset"), "{err}");
    }

    #[test]
    fn step1_matches_per_node_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..10 {
            let n = rng.gen_range(3..8);
            let d = 4;
            let nodes = random_tensor(&mut rng, n, d);
            let graph = random_graph(&mut rng, &nodes, 2);
            let p = random_gc(&mut rng, d, 2);
            let got = gc_step1(&nodes, &graph, &p).unwrap();
            let want = step1_oracle(&nodes, &graph, &p);
            for i in 0..n {
                for e in 0..d {
                    assert!((got.at(i, e) - want[i][e]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn step2_matches_per_node_oracle_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        for normalize in [false, true] {
            let n = 6;
            let d = 4;
            let nodes = random_tensor(&mut rng, n, d);
            let graph = random_graph(&mut rng, &nodes, 3);
            let p = random_gc(&mut rng, d, 2);
            let h1 = gc_step1(&nodes, &graph, &p).unwrap();
            let got = gc_step2(&h1, &graph, &p, normalize).unwrap();
            let want = step2_oracle(&h1, &graph, &p, normalize);
            for i in 0..n {
                for e in 0..d {
                    assert!(
                        (got.at(i, e) - want[i][e]).abs() <= 1e-10,
                        "normalize={normalize} ({i},{e})"
                    );
                }
            }
        }
    }

    #[test]
    fn step2_ignores_edge_weights_by_default() {
        // Same graph, wildly different weights: step 2 output is unchanged
        // because the source formulation omits alpha and 1/c there.
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let nodes = random_tensor(&mut rng, 5, 4);
        let mut graph = random_graph(&mut rng, &nodes, 2);
        let p = random_gc(&mut rng, 4, 2);
        let h1 = random_tensor(&mut rng, 5, 4);
        let a = gc_step2(&h1, &graph, &p, false).unwrap();
        if let Some(w) = &mut graph.weights {
            for row in &mut w.edge {
                for v in row.iter_mut() {
                    *v = 0.123;
                }
            }
            for v in &mut w.self_loop {
                *v = 0.987;
            }
        }
        let b = gc_step2(&h1, &graph, &p, false).unwrap();
        assert_eq!(a.data(), b.data());
        // ...but step 1 *does* depend on them.
        let s1a = gc_step1(&nodes, &graph, &p).unwrap();
        let fresh = random_graph(&mut rng, &nodes, 2);
        let s1b = gc_step1(&nodes, &fresh, &p).unwrap();
        assert_ne!(s1a.data(), s1b.data());
    }

    #[test]
    fn single_update_head_is_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let h = random_tensor(&mut rng, 3, 4);
        let p = GcParams::new(eye(4), eye(4), eye(4), eye(4), vec![random_tensor(&mut rng, 4, 4)])
            .unwrap();
        let got = multihead_update(&h, &p).unwrap();
        let mut tape = Tape::new();
        let a = tape.input(&h);
        let b = tape.input(&p.update[0]);
        let want = tape.matmul(a, b).unwrap();
        assert_eq!(got.data(), tape.value(want));
    }

    #[test]
    fn update_heads_act_block_diagonally() {
        // Two heads on chunks == one matmul with the block-diagonal matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let d = 6;
        let t = 2;
        let h = random_tensor(&mut rng, 4, d);
        let p = random_gc(&mut rng, d, t);
        let got = multihead_update(&h, &p).unwrap();

        let dm = d / t;
        let mut block = vec![0.0; d * d];
        for (c, w) in p.update.iter().enumerate() {
            for i in 0..dm {
                for j in 0..dm {
                    block[(c * dm + i) * d + (c * dm + j)] = w.at(i, j);
                }
            }
        }
        let block = Tensor::new(vec![d, d], block).unwrap();
        let mut tape = Tape::new();
        let a = tape.input(&h);
        let b = tape.input(&block);
        let want = tape.matmul(a, b).unwrap();
        for (x, y) in got.data().iter().zip(tape.value(want)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn indivisible_head_split_fails_at_construction() {
        let err = GcParams::new(eye(5), eye(5), eye(5), eye(5), vec![eye(2), eye(2)]).unwrap_err();
        assert!(err.to_string().contains("not divisible"), "{err}");
    }

    #[test]
    fn step1_is_local() {
        // Perturbing node j only moves outputs of nodes with j in their
        // closed neighborhood.
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let n = 7;
        let nodes = random_tensor(&mut rng, n, 3);
        let graph = random_graph(&mut rng, &nodes, 2);
        let p = random_gc(&mut rng, 3, 1);
        let base = gc_step1(&nodes, &graph, &p).unwrap();

        let j = 4;
        let mut bumped_rows: Vec<Vec<f64>> = (0..n).map(|i| nodes.row(i).to_vec()).collect();
        bumped_rows[j][0] += 0.5;
        let bumped_nodes = Tensor::from_rows(&bumped_rows).unwrap();
        // Keep the same alpha values: only the feature rows move.
        let bumped = gc_step1(&bumped_nodes, &graph, &p).unwrap();
        for i in 0..n {
            let touched = i == j || graph.neighbors[i].contains(&j);
            let moved = base.row(i) != bumped.row(i);
            if !touched {
                assert!(!moved, "node {i} has no edge to {j} but moved");
            }
            if i == j {
                assert!(moved, "perturbed node must move (self term)");
            }
        }
    }

    #[test]
    fn gc_layer_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let n = 6;
        let d = 4;
        let nodes = random_tensor(&mut rng, n, d);
        let ew = EdgeWeightParams::new(random_tensor(&mut rng, 2 * d, 1), Tensor::new(vec![1], vec![0.1]).unwrap()).unwrap();
        let p = random_gc(&mut rng, d, 2);
        let attn = AttentionParams::new(
            (0..2)
                .map(|_| AttentionHead {
                    wq: random_tensor(&mut rng, d, d / 2),
                    wk: random_tensor(&mut rng, d, d / 2),
                    wv: random_tensor(&mut rng, d, d / 2),
                })
                .collect(),
        )
        .unwrap();

        let g = knn_graph(&nodes, 2, Metric::Cosine).unwrap();
        assert!(g.warnings.is_empty(), "need distinct similarities");
        let gw = compute_edge_weights(&nodes, &g, &ew).unwrap();
        let out = gc_layer(&nodes, &gw, &p, Some(&attn), false, false).unwrap();

        let perm: Vec<usize> = vec![3, 5, 0, 2, 4, 1];
        let mut prows = vec![vec![]; n];
        for i in 0..n {
            prows[perm[i]] = nodes.row(i).to_vec();
        }
        let pnodes = Tensor::from_rows(&prows).unwrap();
        let pg = knn_graph(&pnodes, 2, Metric::Cosine).unwrap();
        let pgw = compute_edge_weights(&pnodes, &pg, &ew).unwrap();
        let pout = gc_layer(&pnodes, &pgw, &p, Some(&attn), false, false).unwrap();

        for i in 0..n {
            for e in 0..d {
                assert!(
                    (pout.at(perm[i], e) - out.at(i, e)).abs() <= 1e-10,
                    "node {i} feature {e}"
                );
            }
        }
    }

    #[test]
    fn gc_layer_gradients_match_finite_differences() {
        // Whole layer (attention on) over a 6-node graph, D=4, t=2, probing
        // node features and a sample of each parameter family.
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let n = 6;
        let d = 4;
        let nodes0 = random_tensor(&mut rng, n, d);
        let graph = random_graph(&mut rng, &nodes0, 2);
        let p0 = random_gc(&mut rng, d, 2);
        let attn0 = AttentionParams::new(
            (0..2)
                .map(|_| AttentionHead {
                    wq: random_tensor(&mut rng, d, d / 2),
                    wk: random_tensor(&mut rng, d, d / 2),
                    wv: random_tensor(&mut rng, d, d / 2),
                })
                .collect(),
        )
        .unwrap();

        let weigh = |out: &Tensor| -> f64 {
            out.data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * (((i * 29 + 3) % 11) as f64 * 0.4 - 2.0))
                .sum()
        };
        let loss = |nodes: &Tensor, p: &GcParams, attn: &AttentionParams| -> f64 {
            weigh(&gc_layer(nodes, &graph, p, Some(attn), false, false).unwrap())
        };

        // Analytic pass.
        let mut tape = Tape::new();
        let nid = tape.input(&nodes0);
        let (ae, asl) = weight_leaves(&mut tape, &graph).unwrap();
        let ids = GcIds::register(&mut tape, &p0);
        let head_ids: Vec<HeadIds> = attn0
            .heads
            .iter()
            .map(|h| (tape.input(&h.wq), tape.input(&h.wk), tape.input(&h.wv)))
            .collect();
        let topo = graph.topology();
        let out = gc_layer_ids(&mut tape, nid, &topo, ae, asl, &ids, Some(&head_ids), false, false)
            .unwrap();
        let len = tape.value(out).len();
        let w: Vec<f64> = (0..len).map(|i| ((i * 29 + 3) % 11) as f64 * 0.4 - 2.0).collect();
        let shape = tape.shape(out).to_vec();
        let wid = tape.leaf(w, shape).unwrap();
        let m = tape.mul(out, wid).unwrap();
        let s = tape.sum_all(m).unwrap();
        tape.backward(s).unwrap();

        let h = 1e-5;
        let rel = |a: f64, b: f64| (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs());

        let gn = tape.grad(nid).unwrap().to_vec();
        for e in 0..nodes0.numel() {
            let mut plus = nodes0.clone();
            plus.nudge(e, h);
            let mut minus = nodes0.clone();
            minus.nudge(e, -h);
            let numeric = (loss(&plus, &p0, &attn0) - loss(&minus, &p0, &attn0)) / (2.0 * h);
            assert!(rel(gn[e], numeric) < 1e-4, "nodes[{e}]: {} vs {numeric}", gn[e]);
        }
        let gw1 = tape.grad(ids.w_r1).unwrap().to_vec();
        for e in 0..d * d {
            let mut pp = p0.clone();
            pp.w_r1.nudge(e, h);
            let mut pm = p0.clone();
            pm.w_r1.nudge(e, -h);
            let numeric = (loss(&nodes0, &pp, &attn0) - loss(&nodes0, &pm, &attn0)) / (2.0 * h);
            assert!(rel(gw1[e], numeric) < 1e-4, "w_r1[{e}]: {} vs {numeric}", gw1[e]);
        }
        let gu = tape.grad(ids.update[1]).unwrap().to_vec();
        for e in 0..(d / 2) * (d / 2) {
            let mut pp = p0.clone();
            pp.update[1].nudge(e, h);
            let mut pm = p0.clone();
            pm.update[1].nudge(e, -h);
            let numeric = (loss(&nodes0, &pp, &attn0) - loss(&nodes0, &pm, &attn0)) / (2.0 * h);
            assert!(rel(gu[e], numeric) < 1e-4, "update1[{e}]: {} vs {numeric}", gu[e]);
        }
        let gq = tape.grad(head_ids[0].0).unwrap().to_vec();
        for e in 0..d * (d / 2) {
            let mut pp = attn0.clone();
            pp.heads[0].wq.nudge(e, h);
            let mut pm = attn0.clone();
            pm.heads[0].wq.nudge(e, -h);
            let numeric = (loss(&nodes0, &p0, &pp) - loss(&nodes0, &p0, &pm)) / (2.0 * h);
            assert!(rel(gq[e], numeric) < 1e-4, "wq0[{e}]: {} vs {numeric}", gq[e]);
        }
    }
}
