//! Accuracy metrics and robustness reporting.

mod pca;
mod shift;

pub use pca::{embedder_filters, filter_pca, netpbm, rescale_u8, write_filter_images, FilterPca};
pub use shift::{alpha_pareto, default_shift_specs, pareto_front, shift_suite, MetricsRow, ParetoRow};

use rayon::prelude::*;

use crate::attacks::{run_attack, AttackConfig, ModelView};
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::model::{Mode, Model, ParamStore};
use crate::numerics::Tensor;

/// Rows per forward pass during evaluation.
pub const EVAL_BATCH: usize = 250;

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank ≥ 1");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn chunks(ds: &Dataset) -> Vec<(usize, usize)> {
    (0..ds.len()).step_by(EVAL_BATCH).map(|s| (s, (s + EVAL_BATCH).min(ds.len()))).collect()
}

/// Number of rows predicted correctly by `predict`, summed over shards.
fn count_correct<F>(ds: &Dataset, predict: F) -> Result<usize>
where
    F: Fn(usize, &Tensor, &[usize]) -> Result<Vec<usize>> + Sync,
{
    if ds.is_empty() {
        bail!(Contract, "accuracy of an empty dataset");
    }
    let counts = chunks(ds)
        .into_par_iter()
        .enumerate()
        .map(|(shard, (s, e))| {
            let x = ds.images.slice_rows(s, e)?;
            let y = &ds.labels[s..e];
            let pred = predict(shard, &x, y)?;
            Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count())
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(counts.into_iter().sum())
}

/// Fraction of argmax-correct predictions in `mode`.
pub fn accuracy(model: &Model, store: &ParamStore, ds: &Dataset, mode: Mode) -> Result<f64> {
    let n = count_correct(ds, |_, x, _| Ok(argmax_rows(&model.logits(store, x, mode)?)))?;
    Ok(n as f64 / ds.len() as f64)
}

/// Fraction of examples classified correctly both before and after an
/// attack generated against the evaluated mode itself.
///
/// Each evaluation shard reseeds the attack with `attack.seed + shard` so
/// results do not depend on scheduling.
pub fn robust_accuracy(model: &Model, store: &ParamStore, ds: &Dataset, mode: Mode, attack: &AttackConfig) -> Result<f64> {
    attack.validate()?;
    let view = ModelView::new(model, store, mode);
    let n = count_correct(ds, |shard, x, y| {
        let clean = argmax_rows(&model.logits(store, x, mode)?);
        let cfg = attack.clone().with_seed(attack.seed.wrapping_add(shard as u64));
        let adv = run_attack(&view, x, y, &cfg)?;
        let attacked = argmax_rows(&model.logits(store, &adv, mode)?);
        // A wrong clean prediction is reported as the impossible class `usize::MAX`.
        Ok(clean.iter().zip(attacked).zip(y).map(|((&c, a), &t)| if c == t { a } else { usize::MAX }).collect())
    })?;
    Ok(n as f64 / ds.len() as f64)
}
