//! Anatomy of the model: stem, grapher/FFN blocks, pyramid downsampling,
//! and why the residual connections matter for deep stacks.
//!
//!     cargo run --example model_pyramid

use vigage::dataio::synth_dataset;
use vigage::network::{forward, init_params, node_features, ModelConfig};

fn node_std(features: &vigage::numerics::Tensor) -> f64 {
    let data = features.data();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64).sqrt()
}

fn main() -> vigage::Result<()> {
    // The default model: 64x64 image -> 8x8 patch grid -> two stages with a
    // 2x2 node merge between them.
    let cfg = ModelConfig { seed: 2, ..ModelConfig::default() };
    println!("default pyramid over a {}x{} image:", cfg.image_h, cfg.image_w);
    println!("  patchify   -> {} nodes x {} raw features", cfg.grid_side * cfg.grid_side, cfg.patch_dim());
    for s in 0..cfg.stages {
        let side = cfg.side_at(s);
        println!(
            "  stage {s}    -> {:2} nodes x {} features ({} grapher+ffn pairs)",
            side * side,
            cfg.feature_dim,
            cfg.blocks_per_stage()
        );
    }
    println!("  head       -> 1 age estimate");

    let ds = synth_dataset(1, 9, (cfg.image_h, cfg.image_w))?;
    let image = &ds.samples[0].image;
    let params = init_params(&cfg)?;
    let age = forward(image, &params, &cfg)?;
    println!("\nuntrained prediction for a {:.1}-year sample: {age:.2}", ds.samples[0].age);

    // Over-smoothing: without residuals, repeated neighborhood averaging
    // pulls every node toward the same vector. The final-block feature
    // spread tells the story.
    let deep = ModelConfig { blocks: 8, stages: 1, downsample_between: vec![], ..cfg.clone() };
    let ablated = ModelConfig { residuals: false, ..deep.clone() };
    let with_res = node_std(&node_features(image, &init_params(&deep)?, &deep)?);
    let without = node_std(&node_features(image, &init_params(&ablated)?, &ablated)?);
    println!("\nnode-feature std after 8 blocks:");
    println!("  residuals on   {with_res:.6}");
    println!("  residuals off  {without:.6}");
    println!("residuals keep node features from collapsing together");
    Ok(())
}
