use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::data_spec::DataSpec;
use crate::attacks::AttackConfig;
use crate::error::{bail, Error, Result};
use crate::model::{Arch, ModelConfig};
use crate::train::TrainConfig;

/// Everything one experiment needs, read from a flat `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_data: DataSpec,
    pub test_data: Option<DataSpec>,
    pub output_dir: PathBuf,
    /// Preset name of the evaluation attack.
    pub eval_attack: String,
}

/// Parses `a/b` fractions as well as plain floats.
pub fn parse_float(s: &str) -> Result<f64> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad(s))?, b.trim().parse().map_err(|_| bad(s))?);
            a / b
        }
        None => s.parse().map_err(|_| bad(s))?,
    };
    if !v.is_finite() {
        return Err(bad(s));
    }
    Ok(v)
}

fn bad(s: &str) -> Error {
    Error::Config(format!("`{s}` is not a number"))
}

/// Splits the file into key/value pairs; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            bail!(Config, "line {}: key `{}` set twice", i + 1, k);
        }
    }
    Ok(out)
}

struct Pairs(BTreeMap<String, String>);

impl Pairs {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.0.remove(key) {
            Some(v) => v.parse().map(Some).map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
            None => Ok(None),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()> {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn set_float(&mut self, key: &str, slot: &mut f64) -> Result<()> {
        if let Some(v) = self.0.remove(key) {
            *slot = parse_float(&v).map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))?;
        }
        Ok(())
    }

    fn take_parsed<T>(&mut self, key: &str, f: impl Fn(&str) -> Result<T>) -> Result<Option<T>> {
        self.0.remove(key).map(|v| f(&v)).transpose()
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut p = Pairs(parse_pairs(text)?);

        let arch: Arch = p.take("arch")?.unwrap_or(Arch::VitMicro);
        let mut m = match arch {
            Arch::VitMicro => ModelConfig::vit_micro(),
            Arch::CnnMicro => ModelConfig::cnn_micro(),
        };
        p.set("width", &mut m.width)?;
        p.set("depth", &mut m.depth)?;
        p.set("heads", &mut m.heads)?;
        p.set("patch_size", &mut m.patch_size)?;
        p.set("patch_stride", &mut m.patch_stride)?;
        p.set("mlp_ratio", &mut m.mlp_ratio)?;
        p.set("num_classes", &mut m.num_classes)?;
        p.set("image_size", &mut m.image_size)?;
        p.set("channels", &mut m.channels)?;
        p.set("norm", &mut m.norm)?;
        p.set("adapter", &mut m.adapter)?;
        p.set_float("bn_momentum", &mut m.bn_momentum)?;
        m.validate()?;

        let mut t = TrainConfig::default();
        p.set_float("alpha", &mut t.alpha)?;
        p.set("epochs", &mut t.epochs)?;
        p.set("batch_size", &mut t.batch_size)?;
        p.set_float("base_lr", &mut t.base_lr)?;
        p.set("warmup_epochs", &mut t.warmup_epochs)?;
        p.set_float("weight_decay", &mut t.weight_decay)?;
        p.set_float("label_smoothing", &mut t.label_smoothing)?;
        if let Some(m) = p.take_parsed("ema_momentum", parse_float)? {
            t.ema_momentum = Some(m);
        }
        p.set("seed", &mut t.seed)?;
        p.set("augment", &mut t.augment)?;
        p.set("monitor_samples", &mut t.monitor_samples)?;
        p.set("monitor_pgd_steps", &mut t.monitor_pgd_steps)?;

        let epsilon = p.take_parsed("epsilon", parse_float)?.unwrap_or(4.0 / 255.0);
        let attack_name: String = p.take("attack")?.unwrap_or_else(|| "pgd2".into());
        let mut attack = AttackConfig::preset(&attack_name, epsilon)?;
        p.set("attack_steps", &mut attack.steps)?;
        p.set_float("attack_step_size", &mut attack.step_size)?;
        t.attack = attack;
        t.validate()?;

        let train_data: DataSpec = match p.take_parsed("train_data", DataSpec::from_str)? {
            Some(d) => d.rebase(base),
            None => bail!(Config, "missing required key `train_data`"),
        };
        let test_data = p.take_parsed("test_data", DataSpec::from_str)?.map(|d| d.rebase(base));
        let output_dir = base.join(p.take::<String>("output_dir")?.unwrap_or_else(|| "out".into()));
        let eval_attack: String = p.take("eval_attack")?.unwrap_or_else(|| "pgd40".into());
        if eval_attack != "none" {
            AttackConfig::preset(&eval_attack, epsilon)?;
        }

        if let Some(k) = p.0.keys().next() {
            bail!(Config, "unknown key `{}`", k);
        }
        Ok(Self { model: m, train: t, train_data, test_data, output_dir, eval_attack })
    }
}
