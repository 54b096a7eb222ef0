//! Adam with bias correction, the Noam learning-rate schedule, global-norm
//! gradient clipping, the joint training loop and checkpoints.

mod checkpoint;
mod train;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, manifest_len, manifest_text, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC,
};
pub use train::{train, train_with, ClipScope, TrainLog, TrainOptions, TrainOutcome, TrainRecord};

use crate::error::{config, contract, Error, Result};
use crate::kv::{fmt_float, KvMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning rate reached at the end of warmup.
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.9,
            epsilon: 1e-6,
            lr_peak: 0.0005,
            warmup_steps: 500,
            clip_norm: 0.1,
        }
    }
}

impl AdamConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(config("epsilon must be > 0"));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(config("lr must be > 0"));
        }
        if self.warmup_steps == 0 {
            return Err(config("warmup must be >= 1"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(config("clip_norm must be > 0"));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 6] = ["beta1", "beta2", "epsilon", "lr", "warmup", "clip_norm"];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("beta1", fmt_float(self.beta1)),
            ("beta2", fmt_float(self.beta2)),
            ("epsilon", fmt_float(self.epsilon)),
            ("lr", fmt_float(self.lr_peak)),
            ("warmup", self.warmup_steps.to_string()),
            ("clip_norm", fmt_float(self.clip_norm)),
        ]
    }

    /// Overrides fields present in `map`.
    pub fn apply(&mut self, map: &KvMap) -> Result<()> {
        if let Some(v) = map.get("beta1")? {
            self.beta1 = v;
        }
        if let Some(v) = map.get("beta2")? {
            self.beta2 = v;
        }
        if let Some(v) = map.get("epsilon")? {
            self.epsilon = v;
        }
        if let Some(v) = map.get("lr")? {
            self.lr_peak = v;
        }
        if let Some(v) = map.get("warmup")? {
            self.warmup_steps = v;
        }
        if let Some(v) = map.get("clip_norm")? {
            self.clip_norm = v;
        }
        Ok(())
    }
}

/// `lr_peak · min(step/warmup, sqrt(warmup/step))` for `step ≥ 1`.
pub fn noam_lr(step: usize, cfg: &AdamConfig) -> Result<f64> {
    if step == 0 {
        return Err(contract("learning-rate schedule starts at step 1"));
    }
    let (s, w) = (step as f64, cfg.warmup_steps as f64);
    Ok(cfg.lr_peak * (s / w).min((w / s).sqrt()))
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], clip_norm: f64) -> Result<f64> {
    if grads.iter().any(|g| g.is_nan()) {
        return Err(Error::Numeric("NaN in gradients".into()));
    }
    let norm = global_norm(grads);
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > clip_norm {
        let k = clip_norm / norm;
        grads.iter_mut().for_each(|g| *g *= k);
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: usize,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
        }
    }
}

/// One Adam update with an explicit learning rate. Increments `state.step`.
pub fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig, lr: f64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(contract(format!(
            "adam: {n} params, {} grads, moments {}/{}",
            grads.len(),
            state.first_moment.len(),
            state.second_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let (m, v) = (&mut state.first_moment, &mut state.second_moment);
    for i in 0..n {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// Adam update at the scheduled rate for the next step. Returns that rate.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<f64> {
    let lr = noam_lr(state.step + 1, cfg)?;
    adam_update(params, grads, state, cfg, lr)?;
    Ok(lr)
}
