use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::model::{decays, ParamKey, ParamStore};
use crate::numerics::Tensor;

/// AdamW moment hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// First and second moments per trainable tensor, plus the update count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: BTreeMap<ParamKey, Tensor>,
    pub v: BTreeMap<ParamKey, Tensor>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected AdamW step over the tensors named in `grads`.
///
/// Weight decay is decoupled (`p -= lr·wd·p`) and skipped for parameters
/// [`decays`] excludes. Tensors without a gradient entry are left untouched.
pub fn adamw_update(
    store: &mut ParamStore,
    grads: &BTreeMap<ParamKey, Tensor>,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
    hp: &AdamW,
) -> Result<()> {
    for (key, g) in grads {
        match store.get(key) {
            Some(p) if p.shape() == g.shape() => {}
            Some(p) => bail!(Dimension, "gradient for {:?} has shape {:?}, parameter {:?}", key, g.shape(), p.shape()),
            None => bail!(Contract, "gradient for unknown parameter {:?}", key),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (key, g) in grads {
        let m = state.m.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(key.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        if m.shape() != g.shape() || v.shape() != g.shape() {
            bail!(Dimension, "optimizer state for {:?} does not match its gradient", key);
        }
        let wd = if decays(key.name()) { weight_decay } else { 0.0 };
        let p = store.get_mut(key).expect("checked above");
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = hp.beta1 * md[i] + (1.0 - hp.beta1) * gi;
            vd[i] = hp.beta2 * vd[i] + (1.0 - hp.beta2) * gi * gi;
            let update = (md[i] / c1) / ((vd[i] / c2).sqrt() + hp.eps) + wd * pd[i];
            pd[i] -= lr * update;
        }
    }
    Ok(())
}

/// Linear warmup from zero followed by cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.base_lr;
    }
    let progress = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// `ema ← m·ema + (1 − m)·current` over every tensor, buffers included.
pub fn ema_update(ema: &mut ParamStore, store: &ParamStore, momentum: f64) -> Result<()> {
    *ema = ema.zip_map(store, |e, c| e.lincomb(momentum, c, 1.0 - momentum).expect("same layout"))?;
    Ok(())
}
