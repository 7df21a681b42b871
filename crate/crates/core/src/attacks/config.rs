use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormBall {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    None,
    /// Independent per-example draw among the classes other than the label.
    UniformRandomClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackOptimizer {
    /// Signed (ℓ∞) or unit-ℓ2 (ℓ2) gradient steps of `step_size`.
    FixedStep,
    /// Adam on δ; the rate is divided by `decay_factor` at each listed step.
    Adam { lr: f64, decay_steps: Vec<usize>, decay_factor: f64, beta1: f64, beta2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    Zero,
    /// Uniform in the ε-ball of the attack norm.
    UniformInBall,
    /// Uniform per pixel in `[-r, r]`.
    UniformRadius(f64),
}

/// Threat model and optimizer of an attack. `epsilon` is on the `[0, 1]`
/// pixel scale for ℓ∞ and the raw Euclidean radius on that scale for ℓ2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: NormBall,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub targeted: bool,
    pub target_rule: TargetRule,
    pub optimizer: AttackOptimizer,
    pub init: AttackInit,
    /// Project onto the ε-ball after every step; the `[0, 1]` clip always applies.
    pub project: bool,
    pub seed: u64,
}

/// Radius the step-size presets are expressed against.
const REFERENCE_EPS: f64 = 4.0 / 255.0;

impl AttackConfig {
    /// ℓ∞ PGD with zero init.
    pub fn pgd(epsilon: f64, steps: usize, step_size: f64) -> Self {
        Self {
            norm: NormBall::Linf,
            epsilon,
            steps,
            step_size,
            targeted: false,
            target_rule: TargetRule::None,
            optimizer: AttackOptimizer::FixedStep,
            init: AttackInit::Zero,
            project: true,
            seed: 0,
        }
    }

    /// Single signed step of size ε from zero.
    pub fn fgsm(epsilon: f64) -> Self {
        Self::pgd(epsilon, 1, epsilon)
    }

    /// Two steps of 2.5/255 at ε = 4/255, scaled proportionally with ε.
    pub fn pgd2(epsilon: f64) -> Self {
        Self::pgd(epsilon, 2, epsilon * (2.5 / 255.0) / REFERENCE_EPS)
    }

    /// Five steps of 1/255 at ε = 4/255, scaled proportionally with ε.
    pub fn pgd5(epsilon: f64) -> Self {
        Self::pgd(epsilon, 5, epsilon * (1.0 / 255.0) / REFERENCE_EPS)
    }

    /// 40 Adam steps at rate 0.1, divided by 10 at steps 20 and 30.
    pub fn pgd40(epsilon: f64) -> Self {
        Self {
            optimizer: AttackOptimizer::Adam {
                lr: 0.1,
                decay_steps: vec![20, 30],
                decay_factor: 10.0,
                beta1: 0.9,
                beta2: 0.999,
            },
            ..Self::pgd(epsilon, 40, 0.1)
        }
    }

    /// Uniform start in the ε-cube and one projected step of 5/255 at ε = 4/255.
    pub fn fast_at(epsilon: f64) -> Self {
        Self { init: AttackInit::UniformInBall, ..Self::pgd(epsilon, 1, epsilon * (5.0 / 255.0) / REFERENCE_EPS) }
    }

    /// Start uniform in `[-8/255, 8/255]`, one unprojected step of 6/255,
    /// both at ε = 4/255 and scaled proportionally with ε.
    pub fn n_fgsm(epsilon: f64) -> Self {
        Self {
            init: AttackInit::UniformRadius(epsilon * (8.0 / 255.0) / REFERENCE_EPS),
            project: false,
            ..Self::pgd(epsilon, 1, epsilon * (6.0 / 255.0) / REFERENCE_EPS)
        }
    }

    /// ℓ2 PGD with step `2.5 · ε / steps`.
    pub fn pgd_l2(epsilon: f64, steps: usize) -> Self {
        Self { norm: NormBall::L2, ..Self::pgd(epsilon, steps, 2.5 * epsilon / steps as f64) }
    }

    pub fn targeted(mut self) -> Self {
        self.targeted = true;
        self.target_rule = TargetRule::UniformRandomClass;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Largest ℓ∞ distance an output can have from its input.
    pub fn linf_reach(&self) -> f64 {
        if self.project {
            return self.epsilon;
        }
        let init = match self.init {
            AttackInit::Zero => 0.0,
            AttackInit::UniformInBall => self.epsilon,
            AttackInit::UniformRadius(r) => r,
        };
        init + self.steps as f64 * self.step_size
    }

    /// Builds a preset by name: `fgsm`, `pgd2`, `pgd5`, `pgd40`, `fast_at`,
    /// `n_fgsm`, `pgd<k>` (k fixed steps of 2.5ε/k), `l2_pgd<k>`, with an
    /// optional `targeted_` prefix.
    pub fn preset(name: &str, epsilon: f64) -> Result<Self> {
        if let Some(rest) = name.strip_prefix("targeted_") {
            return Ok(Self::preset(rest, epsilon)?.targeted());
        }
        Ok(match name {
            "fgsm" => Self::fgsm(epsilon),
            "pgd2" => Self::pgd2(epsilon),
            "pgd5" => Self::pgd5(epsilon),
            "pgd40" => Self::pgd40(epsilon),
            "fast_at" => Self::fast_at(epsilon),
            "n_fgsm" => Self::n_fgsm(epsilon),
            _ => {
                if let Some(k) = name.strip_prefix("l2_pgd").and_then(|k| k.parse::<usize>().ok()) {
                    Self::pgd_l2(epsilon, k.max(1))
                } else if let Some(k) = name.strip_prefix("pgd").and_then(|k| k.parse::<usize>().ok()) {
                    Self::pgd(epsilon, k.max(1), 2.5 * epsilon / k.max(1) as f64)
                } else {
                    bail!(Config, "unknown attack `{}`", name)
                }
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            bail!(Config, "epsilon must be finite and non-negative, got {}", self.epsilon);
        }
        if self.steps == 0 {
            bail!(Config, "an attack needs at least one step");
        }
        if !(self.step_size > 0.0) {
            bail!(Config, "step size must be positive, got {}", self.step_size);
        }
        if self.targeted && self.target_rule == TargetRule::None {
            bail!(Config, "targeted attack without a target rule");
        }
        Ok(())
    }
}

impl FromStr for NormBall {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linf" => Ok(NormBall::Linf),
            "l2" => Ok(NormBall::L2),
            _ => bail!(Config, "unknown norm `{}` (linf or l2)", s),
        }
    }
}
