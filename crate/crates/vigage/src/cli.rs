//! Command implementations behind the `vigage` binary.
//!
//! Each `cmd_*` function validates its inputs before any side effects and
//! returns the library [`Result`]; the binary maps errors onto a stable
//! exit-code contract via [`exit_code`]: 0 success, 2 usage/validation,
//! 3 training divergence, 4 failed gradient verification.
//!
//! Standard output carries only machine-readable results (epoch log lines,
//! `mae=`, `age=`, `max_rel_err=`, `mean_final_val_mae=`); progress notes
//! and warnings go to standard error.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::dataio::{load_dataset, read_pnm, synth_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::network::{
    accumulate_param_grads, forward, forward_pass, init_params, ModelConfig, ModelParams,
};
use crate::numerics::{grad_check, Tensor, DEFAULT_STEP, DEFAULT_TOL};
use crate::patchgraph::{compute_edge_weights, image_dims, knn_graph, patchify, EdgeWeightParams};
use crate::training::{evaluate, train, TrainConfig};

// ── configuration resolution ─────────────────────────────────────────────

/// Optional JSON config file: a flat object whose keys mirror the
/// [`ModelConfig`]/[`TrainConfig`] field names. Every key may be omitted
/// (defaults apply); unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    grid_side: Option<usize>,
    knn: Option<usize>,
    metric: Option<String>,
    feature_dim: Option<usize>,
    gc_heads: Option<usize>,
    attn_heads: Option<usize>,
    blocks: Option<usize>,
    stages: Option<usize>,
    downsample_between: Option<Vec<bool>>,
    use_attention: Option<bool>,
    scaled_attention: Option<bool>,
    normalize_step2: Option<bool>,
    static_graph: Option<bool>,
    residuals: Option<bool>,
    image_h: Option<usize>,
    image_w: Option<usize>,
    channels: Option<usize>,
    learning_rate: Option<f64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    val_fraction: Option<f64>,
}

/// Fully resolved model + training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Default, Clone, Copy)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
}

/// Builds the effective configuration: defaults, then the JSON file (if
/// any), then flag overrides — and validates the result. The single `seed`
/// key/flag drives both parameter initialization and training randomness.
pub fn resolve_config(file: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut model = ModelConfig::default();
    let mut tc = TrainConfig::default();
    if let Some(path) = file {
        let cf: ConfigFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        macro_rules! take {
            ($($dst:expr, $src:expr;)*) => {
                $(if let Some(v) = $src { $dst = v; })*
            };
        }
        if let Some(s) = cf.stages {
            model.stages = s;
            // A bare stage count implies merging between every pair of
            // consecutive stages unless the file says otherwise.
            if cf.downsample_between.is_none() {
                model.downsample_between = vec![true; s.saturating_sub(1)];
            }
        }
        take! {
            model.grid_side, cf.grid_side;
            model.knn, cf.knn;
            model.feature_dim, cf.feature_dim;
            model.gc_heads, cf.gc_heads;
            model.attn_heads, cf.attn_heads;
            model.blocks, cf.blocks;
            model.downsample_between, cf.downsample_between;
            model.use_attention, cf.use_attention;
            model.scaled_attention, cf.scaled_attention;
            model.normalize_step2, cf.normalize_step2;
            model.static_graph, cf.static_graph;
            model.residuals, cf.residuals;
            model.image_h, cf.image_h;
            model.image_w, cf.image_w;
            model.channels, cf.channels;
            tc.learning_rate, cf.learning_rate;
            tc.beta1, cf.beta1;
            tc.beta2, cf.beta2;
            tc.epsilon, cf.epsilon;
            tc.batch_size, cf.batch_size;
            tc.epochs, cf.epochs;
            tc.val_fraction, cf.val_fraction;
        }
        if let Some(m) = cf.metric {
            model.metric = m.parse()?;
        }
        if let Some(s) = cf.seed {
            model.seed = s;
            tc.seed = s;
        }
    }
    if let Some(e) = overrides.epochs {
        tc.epochs = e;
    }
    if let Some(s) = overrides.seed {
        model.seed = s;
        tc.seed = s;
    }
    model.validate()?;
    tc.validate()?;
    Ok(RunConfig { model, train: tc })
}

/// Parses an `HxW` size argument, e.g. `64x64`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Argument(format!("size {s:?} must look like HxW, e.g. 64x64"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    match (h.parse(), w.parse()) {
        (Ok(h), Ok(w)) => Ok((h, w)),
        _ => Err(bad()),
    }
}

fn check_image_dims(img: &Tensor, mconfig: &ModelConfig) -> Result<()> {
    let (h, w, c) = image_dims(img)?;
    if (h, w, c) != (mconfig.image_h, mconfig.image_w, mconfig.channels) {
        return Err(Error::Argument(format!(
            "image is {h}x{w}x{c} but the model expects {}x{}x{}",
            mconfig.image_h, mconfig.image_w, mconfig.channels
        )));
    }
    Ok(())
}

// ── commands ─────────────────────────────────────────────────────────────

/// `synth`: generate a deterministic labeled dataset under `out`.
pub fn cmd_synth(out: &Path, n: usize, seed: u64, size: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Argument("n must be ≥ 1".into()));
    }
    let size = parse_size(size)?;
    let ds = synth_dataset(n, seed, size)?;
    write_dataset(out, &ds)?;
    eprintln!("wrote {} samples + labels.csv to {}", ds.len(), out.display());
    Ok(())
}

/// Everything `train` needs; a struct so call sites stay readable.
#[derive(Debug, Clone, Copy)]
pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub config: Option<&'a Path>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub repeats: usize,
    pub checkpoint: Option<&'a Path>,
    pub log: Option<&'a Path>,
}

/// `train`: run training `repeats` times with consecutive seeds, print one
/// `epoch<TAB>train_mae<TAB>val_mae` line per epoch (6 decimals) plus the
/// final `mean_final_val_mae=`, append the same rows as CSV when `log` is
/// given, and write the run with the best final validation MAE to
/// `checkpoint` (ties keep the earliest run; all-NaN keeps the first).
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    if args.repeats == 0 {
        return Err(Error::Argument("repeats must be ≥ 1".into()));
    }
    let overrides = Overrides { epochs: args.epochs, seed: args.seed };
    let cfg = resolve_config(args.config, &overrides)?;
    let dataset = load_dataset(args.data, args.data.join("labels.csv"))?;

    let base_seed = cfg.train.seed;
    let mut csv_rows = String::new();
    let mut final_vals = Vec::with_capacity(args.repeats);
    let mut best: Option<(f64, ModelParams, u64)> = None;

    for r in 0..args.repeats {
        let seed = base_seed + r as u64;
        let mconfig = ModelConfig { seed, ..cfg.model.clone() };
        let tconfig = TrainConfig { seed, ..cfg.train.clone() };
        eprintln!("run {}/{} (seed {seed})", r + 1, args.repeats);
        let (params, state) = train(&dataset, &mconfig, &tconfig)?;
        for e in &state.history {
            println!("{}\t{:.6}\t{:.6}", e.epoch, e.train_mae, e.val_mae);
            csv_rows.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.train_mae, e.val_mae));
        }
        let final_val = state.history.last().map_or(f64::NAN, |e| e.val_mae);
        final_vals.push(final_val);
        let key = if final_val.is_nan() { f64::INFINITY } else { final_val };
        if best.as_ref().map_or(true, |(k, _, _)| key < *k) {
            best = Some((key, params, seed));
        }
    }

    let mean_final = final_vals.iter().sum::<f64>() / final_vals.len() as f64;
    println!("mean_final_val_mae={mean_final:.6}");

    if let Some(path) = args.log {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(csv_rows.as_bytes())?;
    }
    if let Some(path) = args.checkpoint {
        let (_, params, seed) = best.expect("repeats >= 1 guarantees a best run");
        let mconfig = ModelConfig { seed, ..cfg.model.clone() };
        save_checkpoint(path, &params, &mconfig)?;
        eprintln!("wrote checkpoint (seed {seed}) to {}", path.display());
    }
    Ok(())
}

/// `eval`: print the checkpoint's MAE over a dataset as `mae=<value>`.
pub fn cmd_eval(data: &Path, checkpoint: &Path) -> Result<()> {
    let (params, mconfig) = load_checkpoint(checkpoint)?;
    let dataset = load_dataset(data, data.join("labels.csv"))?;
    if let Some(s) = dataset.samples.first() {
        check_image_dims(&s.image, &mconfig)?;
    }
    let mae = evaluate(&dataset, &params, &mconfig)?;
    println!("mae={mae:.4}");
    Ok(())
}

/// `infer`: print one image's predicted age as `age=<value>`.
pub fn cmd_infer(image: &Path, checkpoint: &Path) -> Result<()> {
    let (params, mconfig) = load_checkpoint(checkpoint)?;
    let img = read_pnm(image)?;
    check_image_dims(&img, &mconfig)?;
    let age = forward(&img, &params, &mconfig)?;
    println!("age={age:.2}");
    Ok(())
}

/// `gradcheck`: finite-difference the whole parameter vector of the tiny
/// model on one synthetic sample's absolute-error loss. Prints the max
/// relative error; exceeding [`DEFAULT_TOL`] is the exit-4 failure path.
pub fn cmd_gradcheck(seed: u64) -> Result<()> {
    let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
    let ds = synth_dataset(1, seed, (cfg.image_h, cfg.image_w))?;
    let sample = &ds.samples[0];
    let mut params = init_params(&cfg)?;
    let report = grad_check(
        &mut params,
        |p, with_grad| {
            let mut pass = forward_pass(&sample.image, p, &cfg)?;
            let shifted = pass.tape.add_scalar(pass.prediction, -sample.age)?;
            let loss = pass.tape.abs(shifted)?;
            let y = pass.tape.value(loss)[0];
            if with_grad {
                pass.tape.backward(loss)?;
                accumulate_param_grads(&pass, p, 1.0)?;
            }
            Ok(y)
        },
        DEFAULT_STEP,
    )?;
    println!("max_rel_err={:.3e}", report.max_rel_err);
    eprintln!(
        "checked {} parameters; worst {} (analytic {:.6e}, numeric {:.6e})",
        report.checked, report.worst_parameter, report.worst_analytic, report.worst_numeric
    );
    report.into_result(DEFAULT_TOL)?;
    Ok(())
}

/// `inspect-graph`: write one image's entry-stage weighted k-NN graph in
/// the dump format (`i<TAB>j<TAB>alpha`, 6 decimals, (node, rank) order).
/// The topology comes from the raw patch features, so it shows the data's
/// own similarity structure; the edge scores use fresh seed-initialized
/// parameters. Graph warnings (ties, clamped k) go to standard error.
pub fn cmd_inspect_graph(image: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = resolve_config(config, &Overrides::default())?;
    let img = read_pnm(image)?;
    check_image_dims(&img, &cfg.model)?;
    let nodes = patchify(&img, cfg.model.grid_side)?;
    let graph = knn_graph(&nodes, cfg.model.knn, cfg.model.metric)?;

    let dim = cfg.model.patch_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let bound = (6.0 / (2 * dim + 1) as f64).sqrt();
    let a = (0..2 * dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let scorer = EdgeWeightParams::new(Tensor::new(vec![2 * dim, 1], a)?, Tensor::zeros(vec![1]))?;

    let weighted = compute_edge_weights(&nodes, &graph, &scorer)?;
    for warning in &weighted.warnings {
        eprintln!("warning: {warning}");
    }
    fs::write(out, weighted.dump_edges()?)?;
    eprintln!("wrote {} edges to {}", weighted.edge_count(), out.display());
    Ok(())
}

/// Maps library errors onto the exit-code contract. Non-finite aborts are
/// divergence-class (the numerics blew up, not the usage), so they share
/// exit 3; everything else that is not a failed gradient check is a
/// usage/validation failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        Error::GradCheck { .. } => 4,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_resolve_without_a_file() {
        let cfg = resolve_config(None, &Overrides::default()).unwrap();
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn file_keys_override_defaults() {
        let f = write_tmp(
            r#"{"grid_side": 4, "knn": 3, "metric": "euclidean", "feature_dim": 16,
                "learning_rate": 0.01, "epochs": 5, "image_h": 16, "image_w": 16,
                "stages": 1, "blocks": 2, "gc_heads": 2, "attn_heads": 2}"#,
        );
        let cfg = resolve_config(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.grid_side, 4);
        assert_eq!(cfg.model.metric, crate::patchgraph::Metric::Euclidean);
        assert_eq!(cfg.model.stages, 1);
        assert_eq!(cfg.model.downsample_between, Vec::<bool>::new());
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.epochs, 5);
    }

    #[test]
    fn flags_override_the_file() {
        let f = write_tmp(r#"{"epochs": 5, "seed": 9}"#);
        let ov = Overrides { epochs: Some(2), seed: Some(41) };
        let cfg = resolve_config(Some(f.path()), &ov).unwrap();
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.seed, 41);
        assert_eq!(cfg.model.seed, 41);
    }

    #[test]
    fn one_seed_key_drives_model_and_training() {
        let f = write_tmp(r#"{"seed": 7}"#);
        let cfg = resolve_config(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.seed, 7);
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = write_tmp(r#"{"grid_side": 4, "grids_ide": 4}"#);
        assert!(matches!(resolve_config(Some(f.path()), &Overrides::default()), Err(Error::Json(_))));
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        // feature_dim 10 is not divisible by the default 4 heads.
        let f = write_tmp(r#"{"feature_dim": 10}"#);
        assert!(matches!(resolve_config(Some(f.path()), &Overrides::default()), Err(Error::Config(_))));
    }

    #[test]
    fn stage_count_fills_in_merge_flags() {
        let f = write_tmp(
            r#"{"stages": 3, "grid_side": 16, "image_h": 128, "image_w": 128, "blocks": 6}"#,
        );
        let cfg = resolve_config(Some(f.path()), &Overrides::default()).unwrap();
        assert_eq!(cfg.model.downsample_between, vec![true, true]);
    }

    #[test]
    fn size_argument_parses_height_by_width() {
        assert_eq!(parse_size("64x64").unwrap(), (64, 64));
        assert_eq!(parse_size("32X48").unwrap(), (32, 48));
        assert!(parse_size("64").is_err());
        assert!(parse_size("ax4").is_err());
        assert!(parse_size("4x-4").is_err());
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        assert_eq!(exit_code(&Error::Argument("x".into())), 2);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Parse { offset: 0, message: "x".into() }), 2);
        assert_eq!(exit_code(&Error::Divergence { epoch: 1, step: 1 }), 3);
        assert_eq!(exit_code(&Error::NonFinite("gradient of x".into())), 3);
        assert_eq!(
            exit_code(&Error::GradCheck { parameter: "p".into(), rel_err: 1.0, tol: 1e-4 }),
            4
        );
    }

    #[test]
    fn synth_rejects_zero_samples_before_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let err = cmd_synth(&out, 0, 0, "16x16").unwrap_err();
        assert!(err.to_string().contains("n must be ≥ 1"));
        assert!(!out.exists());
    }

    #[test]
    fn synth_rejects_bad_size_before_touching_disk() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        assert!(cmd_synth(&out, 2, 0, "16by16").is_err());
        assert!(!out.exists());
    }
}
