//! End to end: generate a synthetic corpus, train the patch-graph model,
//! evaluate, and round-trip the result through a checkpoint.
//!
//!     cargo run --release --example train_synthetic

use vigage::checkpoint::{load_checkpoint, save_checkpoint};
use vigage::dataio::synth_dataset;
use vigage::network::{forward, ModelConfig};
use vigage::training::{evaluate, train, TrainConfig};

fn main() -> vigage::Result<()> {
    // A small single-stage model over 32x32 images; big enough to learn
    // the arc-count signal, small enough to train in seconds.
    let mconfig = ModelConfig {
        grid_side: 4,
        knn: 3,
        feature_dim: 16,
        gc_heads: 2,
        attn_heads: 2,
        blocks: 2,
        stages: 1,
        downsample_between: vec![],
        image_h: 32,
        image_w: 32,
        seed: 1,
        ..ModelConfig::default()
    };
    let tconfig = TrainConfig { batch_size: 8, epochs: 12, seed: 1, ..TrainConfig::default() };

    let dataset = synth_dataset(96, 5, (32, 32))?;
    let ages: Vec<f64> = dataset.samples.iter().map(|s| s.age).collect();
    let mean_age = ages.iter().sum::<f64>() / ages.len() as f64;
    let baseline = ages.iter().map(|a| (a - mean_age).abs()).sum::<f64>() / ages.len() as f64;
    println!("{} samples, mean age {mean_age:.1}, predict-the-mean MAE {baseline:.2}", dataset.len());

    println!("\nepoch  train_mae  val_mae");
    let (params, state) = train(&dataset, &mconfig, &tconfig)?;
    for e in &state.history {
        println!("{:5}  {:9.3}  {:7.3}", e.epoch, e.train_mae, e.val_mae);
    }

    let mae = evaluate(&dataset, &params, &mconfig)?;
    println!("\nwhole-corpus MAE after training: {mae:.3} (baseline {baseline:.2})");

    // Checkpoints embed the config, so a loaded model is self-describing
    // and reproduces predictions bit-exactly.
    let path = std::env::temp_dir().join("vigage_train_synthetic.ckpt");
    save_checkpoint(&path, &params, &mconfig)?;
    let (reloaded, recfg) = load_checkpoint(&path)?;
    let sample = &dataset.samples[0];
    let before = forward(&sample.image, &params, &mconfig)?;
    let after = forward(&sample.image, &reloaded, &recfg)?;
    println!("\ncheckpoint round trip: {} -> prediction {before:.4} == {after:.4}", path.display());
    assert_eq!(before.to_bits(), after.to_bits());
    println!("sample 0 true age {:.1}, predicted {:.1}", sample.age, after);
    Ok(())
}
