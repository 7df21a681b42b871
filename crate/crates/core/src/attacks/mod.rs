//! Norm-bounded adversarial perturbations.
//!
//! Every attack maximizes (or, when targeted, minimizes) summed, unsmoothed
//! cross-entropy with respect to the input only; parameters are read-only.

mod config;

pub use config::{AttackConfig, AttackInit, AttackOptimizer, NormBall, TargetRule};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::model::{Mode, Model, ParamStore, Phase};
use crate::numerics::{Tape, Tensor};

/// Something whose input gradient an attack can follow.
pub trait Differentiable {
    fn num_classes(&self) -> usize;

    /// Summed cross-entropy of `x` against `labels` and its gradient w.r.t. `x`.
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

/// A model evaluated in one mode and phase, seen as a function of its input.
pub struct ModelView<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore,
    pub mode: Mode,
    /// In the train phase BatchNorm layers use batch statistics where the
    /// model's variant says so; any statistics update is discarded.
    pub phase: Phase,
}

impl<'a> ModelView<'a> {
    pub fn new(model: &'a Model, store: &'a ParamStore, mode: Mode) -> Self {
        Self { model, store, mode, phase: Phase::Eval }
    }

    pub fn with_phase(mut self, phase: Phase) -> Self {
        self.phase = phase;
        self
    }
}

impl Differentiable for ModelView<'_> {
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = self.model.bind_constants(&mut tape, self.store, self.mode);
        let xv = tape.leaf(x.clone(), true);
        let ctx = self.model.ctx(self.store, self.mode, self.phase);
        let out = self.model.forward(&mut tape, xv, &params, &ctx)?;
        let loss = tape.cross_entropy_sum(out.logits, labels)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, grads.take(xv).expect("input is a leaf")))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects `delta` onto the norm ball (skipped for unprojected configs)
/// and then onto the set where `x + delta` lies in `[0, 1]`.
pub fn project(delta: &Tensor, x: &Tensor, cfg: &AttackConfig) -> Tensor {
    let mut d = delta.data().to_vec();
    if cfg.project {
        match cfg.norm {
            NormBall::Linf => d.iter_mut().for_each(|v| *v = v.clamp(-cfg.epsilon, cfg.epsilon)),
            NormBall::L2 => {
                let per = d.len() / x.shape()[0];
                for chunk in d.chunks_exact_mut(per) {
                    let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > cfg.epsilon {
                        let f = cfg.epsilon / norm;
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
        }
    }
    for (v, &xi) in d.iter_mut().zip(x.data()) {
        let y = xi + *v;
        if y > 1.0 {
            *v = 1.0 - xi;
        } else if y < 0.0 {
            *v = -xi;
        }
    }
    Tensor::new(delta.shape().to_vec(), d).expect("same shape")
}

/// Per-example target classes drawn uniformly from the classes other than the label.
pub fn sample_targets<R: Rng + ?Sized>(labels: &[usize], num_classes: usize, rng: &mut R) -> Vec<usize> {
    labels
        .iter()
        .map(|&y| {
            let t = rng.random_range(0..num_classes - 1);
            if t >= y {
                t + 1
            } else {
                t
            }
        })
        .collect()
}

fn init_delta<R: Rng + ?Sized>(x: &Tensor, cfg: &AttackConfig, rng: &mut R) -> Tensor {
    match cfg.init {
        AttackInit::Zero => Tensor::zeros(x.shape()),
        AttackInit::UniformRadius(r) => Tensor::uniform(x.shape(), -r, r, rng),
        AttackInit::UniformInBall => match cfg.norm {
            NormBall::Linf => Tensor::uniform(x.shape(), -cfg.epsilon, cfg.epsilon, rng),
            NormBall::L2 => {
                let n = x.shape()[0];
                let per = x.numel() / n;
                let mut d = Vec::with_capacity(x.numel());
                for _ in 0..n {
                    let dir: Vec<f64> = (0..per).map(|_| StandardNormal.sample(rng)).collect();
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    let radius = cfg.epsilon * rng.random::<f64>().powf(1.0 / per as f64);
                    d.extend(dir.iter().map(|v| v / norm * radius));
                }
                Tensor::new(x.shape().to_vec(), d).expect("same shape")
            }
        },
    }
}

/// Runs the attack described by `cfg` and returns `x_adv`.
pub fn run_attack(f: &impl Differentiable, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if x.shape()[0] != y.len() {
        bail!(Dimension, "{} inputs but {} labels", x.shape()[0], y.len());
    }
    if cfg.epsilon == 0.0 && cfg.project {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = if cfg.targeted {
        match cfg.target_rule {
            TargetRule::UniformRandomClass => sample_targets(y, f.num_classes(), &mut rng),
            TargetRule::None => bail!(Contract, "targeted attack without a target rule"),
        }
    } else {
        y.to_vec()
    };
    let direction = if cfg.targeted { -1.0 } else { 1.0 };
    let mut delta = project(&init_delta(x, cfg, &mut rng), x, cfg);
    let n = x.shape()[0];
    let per = x.numel() / n;
    let (mut m, mut v) = (vec![0.0; x.numel()], vec![0.0; x.numel()]);

    for step in 0..cfg.steps {
        let xa = x.lincomb(1.0, &delta, 1.0)?;
        let (_, grad) = f.loss_and_input_grad(&xa, &labels)?;
        if !grad.all_finite() {
            bail!(Numeric, "non-finite input gradient at attack step {}", step);
        }
        let g: Vec<f64> = grad.data().iter().map(|v| v * direction).collect();
        let d = delta.data_mut();
        match &cfg.optimizer {
            AttackOptimizer::FixedStep => match cfg.norm {
                NormBall::Linf => {
                    for (di, gi) in d.iter_mut().zip(&g) {
                        *di += cfg.step_size * sign(*gi);
                    }
                }
                NormBall::L2 => {
                    for (dc, gc) in d.chunks_exact_mut(per).zip(g.chunks_exact(per)) {
                        let norm = gc.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm > 0.0 {
                            for (di, gi) in dc.iter_mut().zip(gc) {
                                *di += cfg.step_size * gi / norm;
                            }
                        }
                    }
                }
            },
            AttackOptimizer::Adam { lr, decay_steps, decay_factor, beta1, beta2 } => {
                let passed = decay_steps.iter().filter(|&&s| step >= s).count() as i32;
                let (lr, decay_factor, beta1, beta2) = (*lr, *decay_factor, *beta1, *beta2);
                let lr_t = lr / decay_factor.powi(passed);
                let t = (step + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..d.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    d[i] += lr_t * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                }
            }
        }
        delta = project(&delta, x, cfg);
    }
    let out = x.data().iter().zip(delta.data()).map(|(a, b)| (a + b).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape().to_vec(), out)
}

/// Fixed-step projected gradient ascent.
pub fn pgd(model: &Model, store: &ParamStore, mode: Mode, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.optimizer != AttackOptimizer::FixedStep {
        bail!(Contract, "pgd needs a fixed-step optimizer; use pgd_eval for the adaptive schedule");
    }
    run_attack(&ModelView::new(model, store, mode), x, y, cfg)
}

/// 40-step adaptive-moment evaluation attack.
pub fn pgd_eval(model: &Model, store: &ParamStore, mode: Mode, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    run_attack(&ModelView::new(model, store, mode), x, y, &AttackConfig::pgd40(epsilon))
}

/// Uniform start in the ε-cube, one signed step, projected.
pub fn fast_at(model: &Model, store: &ParamStore, mode: Mode, x: &Tensor, y: &[usize], epsilon: f64, seed: u64) -> Result<Tensor> {
    run_attack(&ModelView::new(model, store, mode), x, y, &AttackConfig::fast_at(epsilon).with_seed(seed))
}

/// Uniform start in a 2ε cube, one signed step of 1.5ε, no ε projection.
pub fn n_fgsm(model: &Model, store: &ParamStore, mode: Mode, x: &Tensor, y: &[usize], epsilon: f64, seed: u64) -> Result<Tensor> {
    run_attack(&ModelView::new(model, store, mode), x, y, &AttackConfig::n_fgsm(epsilon).with_seed(seed))
}
