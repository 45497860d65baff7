//! Multi-head self-attention from the ground up: per-head projections,
//! row-stochastic attention weights, and head concatenation.
//!
//!     cargo run --example attention_basics

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use vigage::attention::{multi_head_attention, AttentionHead, AttentionParams};
use vigage::numerics::{stable_sigmoid, Tape, Tensor};

fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-0.5..0.5)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn main() -> vigage::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d, heads, dm) = (5, 6, 2, 3);
    let x = rand_matrix(&mut rng, n, d);

    // Each head projects the same inputs to its own query/key/value spaces;
    // self-attention uses x for all three.
    let params = AttentionParams::new(
        (0..heads)
            .map(|_| AttentionHead {
                wq: rand_matrix(&mut rng, d, dm),
                wk: rand_matrix(&mut rng, d, dm),
                wv: rand_matrix(&mut rng, d, dm),
            })
            .collect(),
    )?;
    let out = multi_head_attention(&x, &x, &x, &params, true)?;
    println!("{n} nodes x {d} features, {heads} heads of width {dm}");
    println!("concatenated output shape {:?} (heads side by side)", out.shape());

    // The attention matrix itself: softmax over scaled q.k scores. Each row
    // is a probability distribution over the value rows.
    let h = &params.heads[0];
    let mut tape = Tape::new();
    let xid = tape.input(&x);
    let (wq, wk) = (tape.input(&h.wq), tape.input(&h.wk));
    let q = tape.matmul(xid, wq)?;
    let kt = {
        let k = tape.matmul(xid, wk)?;
        tape.transpose(k)?
    };
    let scores = {
        let s = tape.matmul(q, kt)?;
        tape.scale(s, 1.0 / (dm as f64).sqrt())?
    };
    let attn = tape.softmax_rows(scores)?;
    println!("\nhead 0 attention rows (each sums to 1):");
    for i in 0..n {
        let row = &tape.value(attn)[i * n..(i + 1) * n];
        let sum: f64 = row.iter().sum();
        println!("  {:?}  sum {:.12}", row.iter().map(|v| (v * 1000.0).round() / 1000.0).collect::<Vec<_>>(), sum);
    }

    // Everything here is tape-recorded, so gradients flow through the
    // softmax; the same machinery also powers the sigmoid edge gates.
    println!("\nstable_sigmoid(+40) = {}, stable_sigmoid(-40) = {:.3e}", stable_sigmoid(40.0), stable_sigmoid(-40.0));
    Ok(())
}
