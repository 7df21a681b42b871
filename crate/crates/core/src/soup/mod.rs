//! Weight-space merging of the two adapter branches and of whole models.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::eval::{accuracy, robust_accuracy};
use crate::model::{AdapterSpec, Mode, Model, ParamStore};
use crate::numerics::Tensor;
use crate::train::{save_checkpoint, Checkpoint, CheckpointMeta};

fn require_dual(store: &ParamStore) -> Result<()> {
    if store.dual.is_empty() {
        bail!(Contract, "store has no dual adapters (adapter {})", store.adapter);
    }
    Ok(())
}

/// Logits with adapters `β·φ_clean + (1 − β)·φ_adv`; any real β is accepted.
pub fn soup_forward(model: &Model, store: &ParamStore, x: &Tensor, beta: f64) -> Result<Tensor> {
    require_dual(store)?;
    model.logits(store, x, Mode::Soup(beta))
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = *logits.shape().last().expect("rank ≥ 1");
    let mut out = logits.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// `β·softmax(clean logits) + (1 − β)·softmax(robust logits)`.
pub fn ensemble_predict(model: &Model, store: &ParamStore, x: &Tensor, beta: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&beta) {
        bail!(Contract, "ensemble weight must lie in [0, 1], got {}", beta);
    }
    let p = softmax_rows(&model.logits(store, x, Mode::Clean)?);
    let q = softmax_rows(&model.logits(store, x, Mode::Robust)?);
    p.lincomb(beta, &q, 1.0 - beta)
}

/// Every tensor (buffers included) becomes `β·a + (1 − β)·b`.
pub fn naive_weight_soup(a: &ParamStore, b: &ParamStore, beta: f64) -> Result<ParamStore> {
    if !a.same_layout(b) {
        bail!(Contract, "stores have different keys or shapes");
    }
    if beta == 1.0 {
        return Ok(a.clone());
    }
    if beta == 0.0 {
        return Ok(b.clone());
    }
    a.zip_map(b, |x, y| x.lincomb(beta, y, 1.0 - beta).expect("same layout"))
}

/// Cosine similarity between the concatenated clean and adversarial adapters.
pub fn token_cosine(store: &ParamStore) -> Result<f64> {
    require_dual(store)?;
    let (mut dot, mut nc, mut na) = (0.0, 0.0, 0.0);
    for p in store.dual.values() {
        dot += p.clean.dot(&p.adv);
        nc += p.clean.dot(&p.clean);
        na += p.adv.dot(&p.adv);
    }
    if nc == 0.0 || na == 0.0 {
        bail!(Numeric, "cosine is undefined for a zero adapter vector");
    }
    Ok(dot / (nc.sqrt() * na.sqrt()))
}

/// One line of a sweep or grid table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    pub clean_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub robust_acc: Option<f64>,
}

fn evaluate(model: &Model, store: &ParamStore, ds: &Dataset, mode: Mode, attack: Option<&AttackConfig>) -> Result<(f64, Option<f64>)> {
    let clean = accuracy(model, store, ds, mode)?;
    let robust = attack.map(|a| robust_accuracy(model, store, ds, mode, a)).transpose()?;
    Ok((clean, robust))
}

/// Clean and (optionally) robust accuracy of `Soup(β)` for each β.
pub fn soup_sweep(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    betas: &[f64],
    attack: Option<&AttackConfig>,
) -> Result<Vec<SweepRow>> {
    require_dual(store)?;
    if betas.is_empty() {
        bail!(Contract, "empty beta list");
    }
    betas
        .iter()
        .map(|&beta| {
            let (clean_acc, robust_acc) = evaluate(model, store, ds, Mode::Soup(beta), attack)?;
            Ok(SweepRow { beta, beta2: None, clean_acc, robust_acc })
        })
        .collect()
}

/// Accuracies over the `(β1, β2)` plane, row-major in `beta1s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboGrid {
    pub beta1s: Vec<f64>,
    pub beta2s: Vec<f64>,
    pub clean: Vec<Vec<f64>>,
    pub robust: Option<Vec<Vec<f64>>>,
}

impl ComboGrid {
    pub fn rows(&self) -> Vec<SweepRow> {
        let mut out = Vec::new();
        for (i, &b1) in self.beta1s.iter().enumerate() {
            for (j, &b2) in self.beta2s.iter().enumerate() {
                out.push(SweepRow {
                    beta: b1,
                    beta2: Some(b2),
                    clean_acc: self.clean[i][j],
                    robust_acc: self.robust.as_ref().map(|r| r[i][j]),
                });
            }
        }
        out
    }
}

/// Mode for a grid cell. Cells within rounding of the anti-diagonal are
/// evaluated as the matching soup so the two tables agree exactly.
pub fn combo_mode(beta1: f64, beta2: f64) -> Mode {
    if (beta1 + beta2 - 1.0).abs() < 1e-9 {
        Mode::Soup(beta1)
    } else {
        Mode::Combo(beta1, beta2)
    }
}

pub fn combo_grid(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    beta1s: &[f64],
    beta2s: &[f64],
    attack: Option<&AttackConfig>,
) -> Result<ComboGrid> {
    require_dual(store)?;
    if beta1s.is_empty() || beta2s.is_empty() {
        bail!(Contract, "empty combo grid");
    }
    let mut clean = Vec::with_capacity(beta1s.len());
    let mut robust = Vec::with_capacity(beta1s.len());
    for &b1 in beta1s {
        let mut c_row = Vec::with_capacity(beta2s.len());
        let mut r_row = Vec::with_capacity(beta2s.len());
        for &b2 in beta2s {
            let (c, r) = evaluate(model, store, ds, combo_mode(b1, b2), attack)?;
            c_row.push(c);
            r_row.extend(r);
        }
        clean.push(c_row);
        robust.push(r_row);
    }
    Ok(ComboGrid {
        beta1s: beta1s.to_vec(),
        beta2s: beta2s.to_vec(),
        clean,
        robust: attack.map(|_| robust),
    })
}

/// CSV with header `beta[,beta2],clean_acc,robust_acc`; a missing robust
/// value is left empty.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let two = rows.iter().any(|r| r.beta2.is_some());
    let mut out = String::from(if two { "beta,beta2,clean_acc,robust_acc\n" } else { "beta,clean_acc,robust_acc\n" });
    for r in rows {
        let _ = write!(out, "{}", r.beta);
        if two {
            let _ = write!(out, ",{}", r.beta2.map(|b| b.to_string()).unwrap_or_default());
        }
        let _ = writeln!(out, ",{},{}", r.clean_acc, r.robust_acc.map(|v| v.to_string()).unwrap_or_default());
    }
    out
}

pub fn write_rows(csv_path: &Path, json_path: Option<&Path>, rows: &[SweepRow]) -> Result<()> {
    crate::io::write_atomic(csv_path, rows_to_csv(rows).as_bytes())?;
    if let Some(p) = json_path {
        crate::io::write_atomic(p, &serde_json::to_vec_pretty(rows)?)?;
    }
    Ok(())
}

/// Writes the soup at `mode` as a fully shared checkpoint.
pub fn export_merged(model: &Model, store: &ParamStore, mode: Mode, path: &Path) -> Result<()> {
    let mut cfg = model.config().clone();
    cfg.adapter = AdapterSpec::None;
    let ckpt = Checkpoint { meta: CheckpointMeta::new(cfg), store: store.merged(mode), ema: None, optimizer: None };
    save_checkpoint(path, &ckpt)
}
