//! From image to graph: patchify, k-nearest-neighbor topology, and
//! learnable sigmoid edge weights.
//!
//!     cargo run --example patch_graph

use vigage::dataio::synth_dataset;
use vigage::numerics::Tensor;
use vigage::patchgraph::{compute_edge_weights, knn_graph, patchify, EdgeWeightParams, Metric};

fn main() -> vigage::Result<()> {
    // One synthetic 32x32 face stand-in, cut into a 4x4 grid of patches:
    // every 8x8 pixel block becomes one graph node with 64 features.
    let ds = synth_dataset(1, 7, (32, 32))?;
    let image = &ds.samples[0].image;
    let nodes = patchify(image, 4)?;
    println!("image {:?} -> {} nodes x {} features", image.shape(), nodes.rows(), nodes.cols());

    // Connect each node to its 3 most similar peers. Cosine similarity is the
    // default: patch brightness patterns matter, not their magnitude.
    let graph = knn_graph(&nodes, 3, Metric::Cosine)?;
    println!("\nk-NN topology (k = 3, cosine):");
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        println!("  node {i:2} -> {nbrs:?}");
    }

    // Edge weights alpha_ij = sigmoid(a . [x_i || x_j] + b) gate each edge
    // in (0, 1). With zero parameters every gate is exactly 1/2.
    let d = nodes.cols();
    let zero = EdgeWeightParams::new(Tensor::zeros(vec![2 * d, 1]), Tensor::zeros(vec![1]))?;
    let weighted = compute_edge_weights(&nodes, &graph, &zero)?;
    let w = weighted.weights.as_ref().expect("just computed");
    println!("\nzero-parameter gates: edge alpha = {}, self-loop alpha = {}", w.edge[0][0], w.self_loop[0]);

    // A non-zero scorer separates edges by content; the dump format below
    // is exactly what `vigage inspect-graph` writes.
    let a = Tensor::new(vec![2 * d, 1], (0..2 * d).map(|i| (i as f64 - d as f64) * 0.01).collect())?;
    let scorer = EdgeWeightParams::new(a, Tensor::new(vec![1], vec![0.1])?)?;
    let weighted = compute_edge_weights(&nodes, &graph, &scorer)?;
    println!("\nfirst lines of the edge dump (i<TAB>j<TAB>alpha):");
    for line in weighted.dump_edges()?.lines().take(6) {
        println!("  {line}");
    }

    for warning in &weighted.warnings {
        println!("warning: {warning}");
    }
    Ok(())
}
