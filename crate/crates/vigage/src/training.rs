//! Training: MAE objective, adaptive-moment optimizer, seeded epoch loop,
//! and pure evaluation.
//!
//! Everything is deterministic. The seed fixes the train/validation split
//! and every epoch's shuffle; parameter initialization is fixed by the
//! model config's own seed; batches accumulate per-sample gradients in a
//! fixed order. Two runs with the same inputs produce bit-identical
//! histories and parameters.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::network::{accumulate_param_grads, forward_pass, ModelConfig, ModelParams};
use crate::numerics::Parameters;

// ── objective ────────────────────────────────────────────────────────────

/// Mean absolute error between two equal-length scalar lists.
pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Argument(format!(
            "mae needs equal nonzero lengths, got {} and {}",
            preds.len(),
            labels.len()
        )));
    }
    let sum: f64 = preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum();
    Ok(sum / preds.len() as f64)
}

// ── configuration and state ──────────────────────────────────────────────

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fixes the split and the per-epoch shuffles.
    pub seed: u64,
    /// Fraction of samples held out for validation (0 disables validation;
    /// the history then records NaN).
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return fail(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0 < v && v < 1.0) {
                return fail(format!("{name} {v} must lie strictly inside (0, 1)"));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return fail(format!("epsilon {} must be finite and positive", self.epsilon));
        }
        if self.batch_size == 0 {
            return fail("batch size must be >= 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("validation fraction {} must lie in [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mae: f64,
    /// NaN when no validation split exists.
    pub val_mae: f64,
}

/// Mutable training state: optimizer step counter and moments (aligned
/// with the parameter visitor order), the RNG, and the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub first_moments: Vec<Vec<f64>>,
    pub second_moments: Vec<Vec<f64>>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochStats>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            first_moments: Vec::new(),
            second_moments: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            history: Vec::new(),
        }
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

/// One adaptive-moment update from the gradients currently stored in the
/// parameters' gradient slots:
///
/// ```text
/// m ← β₁·m + (1−β₁)·g        m̂ = m / (1 − β₁ᵗ)
/// v ← β₂·v + (1−β₂)·g²       v̂ = v / (1 − β₂ᵗ)
/// θ ← θ − lr · m̂ / (√v̂ + ε)
/// ```
///
/// Moments are allocated lazily on the first call and must shape-match the
/// parameters ever after. A missing or non-finite gradient aborts with the
/// parameter's name.
pub fn optimizer_step<P: Parameters>(
    params: &mut P,
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<()> {
    let mut named = params.named_tensors_mut();
    if state.first_moments.is_empty() {
        state.first_moments = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        state.second_moments = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    }
    if state.first_moments.len() != named.len() {
        return Err(Error::State(format!(
            "optimizer holds {} moment buffers for {} parameters",
            state.first_moments.len(),
            named.len()
        )));
    }
    let t = state.step + 1;
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    for (i, (name, tensor)) in named.iter_mut().enumerate() {
        let n = tensor.numel();
        if state.first_moments[i].len() != n {
            return Err(Error::State(format!(
                "moment buffer for {name} holds {} values, parameter has {n}",
                state.first_moments[i].len()
            )));
        }
        let Some(grad) = tensor.grad() else {
            return Err(Error::State(format!("missing gradient for {name}")));
        };
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name} ({bad})")));
        }
        let grad = grad.to_vec();
        let m = &mut state.first_moments[i];
        let v = &mut state.second_moments[i];
        for j in 0..n {
            let g = grad[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g * g;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            let cur = tensor.data()[j];
            tensor.set_flat(j, cur - config.learning_rate * mhat / (vhat.sqrt() + config.epsilon));
        }
    }
    state.step = t;
    Ok(())
}

// ── evaluation ───────────────────────────────────────────────────────────

fn mae_over(dataset: &Dataset, idx: &[usize], params: &ModelParams, mconfig: &ModelConfig) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for &i in idx {
        let s = &dataset.samples[i];
        let pass = forward_pass(&s.image, params, mconfig)?;
        sum += (pass.tape.value(pass.prediction)[0] - s.age).abs();
    }
    Ok(sum / idx.len() as f64)
}

/// Mean absolute error of the model over a dataset. Pure: no parameter
/// mutation, bit-identical on repeated calls.
pub fn evaluate(dataset: &Dataset, params: &ModelParams, mconfig: &ModelConfig) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    let idx: Vec<usize> = (0..dataset.len()).collect();
    mae_over(dataset, &idx, params, mconfig)
}

// ── training loop ────────────────────────────────────────────────────────

/// Deterministic split of `0..n` into (train, validation) index lists.
/// The order is a seeded shuffle; the last `floor(n·val_fraction)` indices
/// become the validation set.
pub fn split_indices(n: usize, val_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains a freshly initialized model on the dataset. Per batch: forward
/// every sample, average the absolute-error loss, backpropagate, and apply
/// one optimizer step. After every epoch the full train and validation
/// splits are re-evaluated and appended to the history.
pub fn train(
    dataset: &Dataset,
    mconfig: &ModelConfig,
    tconfig: &TrainConfig,
) -> Result<(ModelParams, TrainState)> {
    mconfig.validate()?;
    tconfig.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let mut params = crate::network::init_params(mconfig)?;
    let mut state = TrainState::new(tconfig.seed);
    let (train_idx, val_idx) = split_indices(dataset.len(), tconfig.val_fraction, &mut state.rng);
    if train_idx.is_empty() {
        return Err(Error::Config(format!(
            "validation fraction {} leaves no training samples",
            tconfig.val_fraction
        )));
    }

    let mut order = train_idx.clone();
    for epoch in 1..=tconfig.epochs {
        order.shuffle(&mut state.rng);
        for batch in order.chunks(tconfig.batch_size) {
            params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &dataset.samples[i];
                let mut pass = forward_pass(&s.image, &params, mconfig)?;
                let shifted = pass.tape.add_scalar(pass.prediction, -s.age)?;
                let loss = pass.tape.abs(shifted)?;
                batch_loss += pass.tape.value(loss)[0] * scale;
                pass.tape.backward(loss)?;
                accumulate_param_grads(&pass, &mut params, scale)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, step: state.step + 1 });
            }
            optimizer_step(&mut params, &mut state, tconfig)?;
        }
        let train_mae = mae_over(dataset, &train_idx, &params, mconfig)?;
        let val_mae = mae_over(dataset, &val_idx, &params, mconfig)?;
        state.history.push(EpochStats { epoch, train_mae, val_mae });
    }
    Ok((params, state))
}

/// Fresh parameters for a config, drawn with an explicit seed (overrides
/// the seed stored in the config).
pub fn init_params(mconfig: &ModelConfig, seed: u64) -> Result<ModelParams> {
    crate::network::init_params(&ModelConfig { seed, ..mconfig.clone() })
}
