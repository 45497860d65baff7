//! Images and datasets: PGM round trips, the labels.csv layout, and the
//! synthetic age corpus.
//!
//!     cargo run --example dataset_io

use vigage::dataio::{arc_count, read_pnm, synth_dataset, write_dataset, write_pnm};
use vigage::numerics::Tensor;

fn main() -> vigage::Result<()> {
    let dir = std::env::temp_dir().join("vigage_dataset_io");
    std::fs::create_dir_all(&dir)?;

    // A 2x3 grayscale image round-trips through the canonical PGM writer.
    let image = Tensor::new(vec![2, 3], vec![0.0, 64.0, 128.0, 192.0, 255.0, 17.0])?;
    let path = dir.join("tiny.pgm");
    write_pnm(&path, &image)?;
    let back = read_pnm(&path)?;
    println!("PGM round trip: wrote {:?}, read back {:?}", image.shape(), back.shape());
    assert_eq!(image.data(), back.data());
    println!("  pixel data identical: {:?}", back.data());

    // The synthetic corpus stands in for a real face dataset: uniform ages
    // in [16, 77], smooth backgrounds, and age-proportional dark arcs
    // ("wrinkle proxies") the model can count.
    let ds = synth_dataset(4, 42, (32, 32))?;
    println!("\nsynthetic dataset ({} samples, 32x32):", ds.len());
    for s in &ds.samples {
        let dark = s.image.data().iter().filter(|&&p| p < 60.0).count();
        println!(
            "  {}  age {:5.1}  -> {:2} arcs, {:3} dark pixels",
            s.name,
            s.age,
            arc_count(s.age),
            dark
        );
    }

    // The on-disk layout is one PNM per sample plus labels.csv; the same
    // directory loads straight back with `load_dataset`.
    let out = dir.join("corpus");
    write_dataset(&out, &ds)?;
    let reloaded = vigage::dataio::load_dataset(&out, out.join("labels.csv"))?;
    println!("\nwrote + reloaded {} samples from {}", reloaded.len(), out.display());
    assert_eq!(reloaded.samples[0].image.data(), ds.samples[0].image.data());

    // Determinism: the same (n, seed, size) always yields the same bytes.
    let again = synth_dataset(4, 42, (32, 32))?;
    assert_eq!(again.samples[2].image.data(), ds.samples[2].image.data());
    println!("regenerating with the same seed reproduces the corpus bit-exactly");
    Ok(())
}
