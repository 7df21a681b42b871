use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::accuracy;
use crate::attacks::AttackConfig;
use crate::data::{corrupt, CorruptionKind, CorruptionSpec, Dataset};
use crate::error::{bail, Result};
use crate::model::{Mode, Model, ParamStore};
use crate::train::{train, TrainConfig};

/// One line of a variant-accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub setting: String,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub shift_accs: BTreeMap<String, f64>,
    /// Arithmetic mean of `shift_accs`.
    pub mean_acc: f64,
}

/// Gaussian noise, blur and contrast at severities 1, 3 and 5.
pub fn default_shift_specs(seed: u64) -> Vec<CorruptionSpec> {
    let mut out = Vec::new();
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::GaussianBlur, CorruptionKind::Contrast] {
        for severity in [1, 3, 5] {
            out.push(CorruptionSpec::new(kind, severity, seed));
        }
    }
    out
}

/// Accuracy under each corruption and their mean.
pub fn shift_suite(model: &Model, store: &ParamStore, ds: &Dataset, specs: &[CorruptionSpec], mode: Mode) -> Result<MetricsRow> {
    if specs.is_empty() {
        bail!(Contract, "shift suite needs at least one corruption");
    }
    let clean_acc = accuracy(model, store, ds, mode)?;
    let mut shift_accs = BTreeMap::new();
    for spec in specs {
        let shifted = corrupt(ds, spec)?;
        shift_accs.insert(spec.label(), accuracy(model, store, &shifted, mode)?);
    }
    let mean_acc = shift_accs.values().sum::<f64>() / shift_accs.len() as f64;
    Ok(MetricsRow { setting: format!("{mode:?}"), clean_acc, robust_acc: None, shift_accs, mean_acc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub alpha: f64,
    /// Clean accuracy of the clean branch.
    pub clean_acc: f64,
    /// Robust accuracy of the robust branch.
    pub robust_acc: f64,
}

/// Trains one model per α from the same seed and evaluates both branches.
pub fn alpha_pareto<B>(
    build: B,
    train_set: &Dataset,
    eval_set: &Dataset,
    alphas: &[f64],
    cfg: &TrainConfig,
    attack: &AttackConfig,
) -> Result<Vec<ParetoRow>>
where
    B: Fn(u64) -> Result<(Model, ParamStore)>,
{
    if alphas.is_empty() {
        bail!(Contract, "empty alpha list");
    }
    alphas
        .iter()
        .map(|&alpha| {
            let (model, store) = build(cfg.seed)?;
            let tc = TrainConfig { alpha, ..cfg.clone() };
            let (store, _) = train(&model, store, train_set, &tc)?;
            Ok(ParetoRow {
                alpha,
                clean_acc: accuracy(&model, &store, eval_set, Mode::Clean)?,
                robust_acc: super::robust_accuracy(&model, &store, eval_set, Mode::Robust, attack)?,
            })
        })
        .collect()
}

/// Marks rows no other row beats on both accuracies.
pub fn pareto_front(rows: &[ParetoRow]) -> Vec<bool> {
    rows.iter()
        .map(|r| {
            !rows.iter().any(|o| {
                o.clean_acc >= r.clean_acc
                    && o.robust_acc >= r.robust_acc
                    && (o.clean_acc > r.clean_acc || o.robust_acc > r.robust_acc)
            })
        })
        .collect()
}
