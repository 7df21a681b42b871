//! Co-training with dual adapters: AdamW, warmup-cosine schedule, EMA and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{
    decode, encode, load_checkpoint, quantize, save_checkpoint, Checkpoint, CheckpointMeta, MAGIC, VERSION,
};
pub use optim::{adamw_update, ema_update, lr_at, AdamW, AdamWState, LrSchedule};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{run_attack, AttackConfig, ModelView};
use crate::data::{augment, batches, Batch, Dataset};
use crate::error::{bail, Result};
use crate::eval::{accuracy, robust_accuracy};
use crate::model::{Branch, BnUpdate, Mode, Model, ParamKey, ParamStore, Phase};
use crate::numerics::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the clean term; the adversarial term gets `1 − alpha`.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub ema_momentum: Option<f64>,
    pub seed: u64,
    /// Attack used to build the adversarial term, run against the robust branch.
    pub attack: AttackConfig,
    /// Random flips and crops on training batches.
    pub augment: bool,
    /// Training examples used for the per-epoch accuracy columns; 0 disables them.
    pub monitor_samples: usize,
    /// Fixed-step PGD length for the per-epoch robust column.
    pub monitor_pgd_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epochs: 20,
            batch_size: 128,
            base_lr: 1e-3,
            warmup_epochs: 1,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            ema_momentum: None,
            seed: 0,
            attack: AttackConfig::pgd2(4.0 / 255.0),
            augment: false,
            monitor_samples: 256,
            monitor_pgd_steps: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!(Config, "alpha must lie in [0, 1], got {}", self.alpha);
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            bail!(Config, "warmup_epochs ({}) must be below epochs ({})", self.warmup_epochs, self.epochs);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bail!(Config, "base_lr must be positive, got {}", self.base_lr);
        }
        if !(self.weight_decay >= 0.0) {
            bail!(Config, "weight_decay must be non-negative, got {}", self.weight_decay);
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            bail!(Config, "label_smoothing must lie in [0, 1), got {}", self.label_smoothing);
        }
        if let Some(m) = self.ema_momentum {
            if !(0.0..=1.0).contains(&m) {
                bail!(Config, "ema_momentum must lie in [0, 1], got {}", m);
            }
        }
        if self.monitor_samples > 0 && self.monitor_pgd_steps == 0 {
            bail!(Config, "monitor_pgd_steps must be positive");
        }
        self.attack.validate()
    }

    /// Whole batches per epoch; a trailing partial batch is dropped.
    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        (dataset_len / self.batch_size) as u64
    }

    pub fn schedule(&self, steps_per_epoch: u64) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_epochs as u64 * steps_per_epoch,
            total_steps: self.epochs as u64 * steps_per_epoch,
        }
    }

    /// Attack behind the per-epoch robust column.
    pub fn monitor_attack(&self) -> AttackConfig {
        let k = self.monitor_pgd_steps.max(1);
        AttackConfig::pgd(self.attack.epsilon, k, 2.5 * self.attack.epsilon / k as f64).with_seed(self.seed)
    }
}

/// Euclidean gradient norms by parameter group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub shared: f64,
    pub clean: f64,
    pub adv: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// `None` when the term had zero weight and was skipped.
    pub loss_clean: Option<f64>,
    pub loss_adv: Option<f64>,
    pub grad_norms: GradNorms,
}

/// One loss term: its value, the gradient of every trainable tensor, and
/// the BatchNorm statistics its forward pass produced.
pub struct TermGradients {
    pub loss: f64,
    pub grads: BTreeMap<ParamKey, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Gradient of the smoothed cross-entropy of one branch with every
/// parameter bound as a leaf, so the other branch's adapters receive
/// explicit (zero) gradients.
pub fn term_gradients(
    model: &Model,
    store: &ParamStore,
    x: &Tensor,
    y: &[usize],
    branch: Branch,
    label_smoothing: f64,
) -> Result<TermGradients> {
    let mut tape = Tape::new();
    let binding = model.bind_training(&mut tape, store);
    let xv = tape.constant(x.clone());
    let params = match branch {
        Branch::Clean => &binding.clean,
        Branch::Robust => &binding.robust,
    };
    let ctx = model.ctx(store, branch.mode(), Phase::Train);
    let out = model.forward(&mut tape, xv, params, &ctx)?;
    let loss_var = tape.cross_entropy(out.logits, y, label_smoothing)?;
    let loss = tape.value(loss_var).item();
    if !loss.is_finite() {
        bail!(Numeric, "non-finite {:?} loss", branch);
    }
    let mut g = tape.backward(loss_var)?;
    let grads = binding
        .leaves
        .iter()
        .map(|(k, v)| (k.clone(), g.take(*v).expect("training leaves require gradients")))
        .collect();
    Ok(TermGradients { loss, grads, bn_updates: out.bn_updates })
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn group_norms(grads: &BTreeMap<ParamKey, Tensor>) -> GradNorms {
    let mut sq = [0.0; 3];
    for (k, g) in grads {
        let slot = match k {
            ParamKey::Shared(_) => 0,
            ParamKey::Dual(_, b) if Branch::from(*b) == Branch::Clean => 1,
            ParamKey::Dual(..) => 2,
        };
        sq[slot] += g.dot(g);
    }
    GradNorms { shared: sq[0].sqrt(), clean: sq[1].sqrt(), adv: sq[2].sqrt() }
}

/// One step of `α·L(x; ψ∪φ_clean) + (1−α)·max_δ L(x+δ; ψ∪φ_adv)`.
///
/// The adversarial batch is built against the current robust branch before
/// any update. A term with zero weight is skipped entirely, and the
/// adapters it alone would train are not touched by the optimizer.
#[allow(clippy::too_many_arguments)]
pub fn co_training_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamWState,
    batch: &Batch,
    cfg: &TrainConfig,
    lr: f64,
    attack_seed: u64,
) -> Result<StepStats> {
    let alpha = cfg.alpha;
    let mut grads: BTreeMap<ParamKey, Tensor> = BTreeMap::new();
    let mut accumulate = |term: &TermGradients, w: f64| {
        for (k, g) in &term.grads {
            match grads.get_mut(k) {
                Some(acc) => *acc = acc.lincomb(1.0, g, w).expect("same shape"),
                None => {
                    grads.insert(k.clone(), g.map(|v| w * v));
                }
            }
        }
    };

    let x_adv = if alpha < 1.0 {
        let view = ModelView::new(model, store, Mode::Robust).with_phase(Phase::Train);
        Some(run_attack(&view, &batch.x, &batch.y, &cfg.attack.clone().with_seed(attack_seed))?)
    } else {
        None
    };

    let mut loss_clean = None;
    if alpha > 0.0 {
        let term = term_gradients(model, store, &batch.x, &batch.y, Branch::Clean, cfg.label_smoothing)?;
        accumulate(&term, alpha);
        store.apply_bn_updates(&term.bn_updates)?;
        loss_clean = Some(term.loss);
    }
    let mut loss_adv = None;
    if let Some(x_adv) = &x_adv {
        let term = term_gradients(model, store, x_adv, &batch.y, Branch::Robust, cfg.label_smoothing)?;
        accumulate(&term, 1.0 - alpha);
        store.apply_bn_updates(&term.bn_updates)?;
        loss_adv = Some(term.loss);
    }

    // Only the adapters of active terms move.
    let active = |k: &ParamKey| match k {
        ParamKey::Shared(_) => true,
        ParamKey::Dual(_, b) => match Branch::from(*b) {
            Branch::Clean => alpha > 0.0,
            Branch::Robust => alpha < 1.0,
        },
    };
    grads.retain(|k, _| active(k));
    let grad_norms = group_norms(&grads);
    adamw_update(store, &grads, opt, lr, cfg.weight_decay, &AdamW::default())?;
    if !store.all_finite() {
        bail!(Numeric, "parameters became non-finite at optimizer step {}", opt.step);
    }
    Ok(StepStats { loss_clean, loss_adv, grad_norms })
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_clean: Option<f64>,
    pub loss_adv: Option<f64>,
    pub acc_clean_mode: Option<f64>,
    pub acc_robust_mode_pgd: Option<f64>,
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub optimizer: AdamWState,
    pub ema: Option<ParamStore>,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(store: ParamStore, cfg: &TrainConfig) -> Self {
        let ema = cfg.ema_momentum.map(|_| store.clone());
        Self { store, optimizer: AdamWState::new(), ema, epoch: 0, step: 0, history: Vec::new() }
    }

    /// Weights used for evaluation: the EMA copy when one is kept.
    pub fn eval_store(&self) -> &ParamStore {
        self.ema.as_ref().unwrap_or(&self.store)
    }

    pub fn to_checkpoint(&self, model: &Model, cfg: &TrainConfig) -> Checkpoint {
        let mut meta = CheckpointMeta::new(model.config().clone());
        meta.train = Some(cfg.clone());
        meta.step = self.step;
        meta.epoch = self.epoch;
        meta.metrics = self.history.clone();
        Checkpoint { meta, store: self.store.clone(), ema: self.ema.clone(), optimizer: Some(self.optimizer.clone()) }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            store: ckpt.store,
            optimizer: ckpt.optimizer.unwrap_or_default(),
            ema: ckpt.ema,
            epoch: ckpt.meta.epoch,
            step: ckpt.meta.step,
            history: ckpt.meta.metrics,
        }
    }
}

/// Trains from scratch and returns the final store and the per-epoch log.
pub fn train(model: &Model, store: ParamStore, data: &Dataset, cfg: &TrainConfig) -> Result<(ParamStore, Vec<EpochMetrics>)> {
    let state = train_from(model, TrainState::new(store, cfg), data, None, cfg, |_, _| Ok(()))?;
    Ok((state.store, state.history))
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each one.
///
/// Per-epoch accuracies use `monitor` when given, else the first
/// `cfg.monitor_samples` training examples.
pub fn train_from<F>(
    model: &Model,
    mut state: TrainState,
    data: &Dataset,
    monitor: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainState>
where
    F: FnMut(&TrainState, &EpochMetrics) -> Result<()>,
{
    cfg.validate()?;
    state.store.validate()?;
    let steps_per_epoch = cfg.steps_per_epoch(data.len());
    if cfg.epochs > state.epoch && steps_per_epoch == 0 {
        bail!(Config, "batch_size {} exceeds the {} training examples", cfg.batch_size, data.len());
    }
    let schedule = cfg.schedule(steps_per_epoch);
    let own_monitor;
    let monitor = match monitor {
        Some(m) => Some(m),
        None if cfg.monitor_samples > 0 => {
            own_monitor = data.take(cfg.monitor_samples.min(data.len()))?;
            Some(&own_monitor)
        }
        None => None,
    };

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut sums = [0.0; 2];
        let mut counted = [0usize; 2];
        let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1 << 40 | epoch as u64));
        for batch in batches(data, cfg.batch_size, Some(mix_seed(cfg.seed, epoch as u64)))? {
            if batch.y.len() < cfg.batch_size {
                continue;
            }
            let batch = if cfg.augment { Batch { x: augment(&batch.x, &mut aug_rng), ..batch } } else { batch };
            let lr = lr_at(state.step, &schedule);
            let attack_seed = mix_seed(cfg.seed, 1 << 41 | state.step);
            let stats = co_training_step(model, &mut state.store, &mut state.optimizer, &batch, cfg, lr, attack_seed)?;
            for (i, l) in [stats.loss_clean, stats.loss_adv].into_iter().enumerate() {
                if let Some(l) = l {
                    sums[i] += l;
                    counted[i] += 1;
                }
            }
            if let (Some(ema), Some(m)) = (state.ema.as_mut(), cfg.ema_momentum) {
                ema_update(ema, &state.store, m)?;
            }
            state.step += 1;
        }
        let mean = |i: usize| (counted[i] > 0).then(|| sums[i] / counted[i] as f64);
        let (acc_clean_mode, acc_robust_mode_pgd) = match monitor {
            Some(m) => {
                let s = state.eval_store();
                (
                    Some(accuracy(model, s, m, Mode::Clean)?),
                    Some(robust_accuracy(model, s, m, Mode::Robust, &cfg.monitor_attack())?),
                )
            }
            None => (None, None),
        };
        let row = EpochMetrics { epoch, loss_clean: mean(0), loss_adv: mean(1), acc_clean_mode, acc_robust_mode_pgd };
        log::info!(
            "epoch {epoch}: loss clean {:?} adv {:?}, acc clean {:?} robust {:?}",
            row.loss_clean,
            row.loss_adv,
            row.acc_clean_mode,
            row.acc_robust_mode_pgd
        );
        state.history.push(row);
        state.epoch += 1;
        on_epoch(&state, &row)?;
    }
    Ok(state)
}
