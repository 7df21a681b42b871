use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{load_cifar_binary, load_idx, synth_shapes, CifarKind, CifarSplit, Dataset};
use crate::error::{bail, Error, Result};

/// Where a dataset comes from.
///
/// Grammar: `synth:N[:SEED]`, `idx:IMAGES:LABELS[:START:END]`,
/// `cifar10:DIR[:train|test]`, `cifar100:DIR[:…]`, `cifar100_coarse:DIR[:…]`.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synth { n: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf, range: Option<(usize, usize)> },
    Cifar { kind: CifarKind, dir: PathBuf, split: CifarSplit },
}

fn num<T: FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("bad {what} `{s}`")))
}

impl FromStr for DataSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        Ok(match parts.as_slice() {
            ["synth", n] => DataSpec::Synth { n: num(n, "sample count")?, seed: 0 },
            ["synth", n, seed] => DataSpec::Synth { n: num(n, "sample count")?, seed: num(seed, "seed")? },
            ["idx", img, lab] => DataSpec::Idx { images: img.into(), labels: lab.into(), range: None },
            ["idx", img, lab, a, b] => {
                let range = (num(a, "range start")?, num(b, "range end")?);
                DataSpec::Idx { images: img.into(), labels: lab.into(), range: Some(range) }
            }
            [kind, dir, rest @ ..] if rest.len() <= 1 => {
                let kind = match *kind {
                    "cifar10" => CifarKind::Cifar10,
                    "cifar100" => CifarKind::Cifar100,
                    "cifar100_coarse" => CifarKind::Cifar100Coarse,
                    _ => bail!(Config, "unknown dataset `{}`", s),
                };
                let split = match rest.first().copied().unwrap_or("train") {
                    "train" => CifarSplit::Train,
                    "test" => CifarSplit::Test,
                    other => bail!(Config, "unknown split `{}`", other),
                };
                DataSpec::Cifar { kind, dir: dir.into(), split }
            }
            _ => bail!(Config, "unknown dataset `{}`", s),
        })
    }
}

impl DataSpec {
    /// Resolves relative paths against `base`.
    pub fn rebase(self, base: &Path) -> Self {
        let join = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        match self {
            DataSpec::Idx { images, labels, range } => DataSpec::Idx { images: join(images), labels: join(labels), range },
            DataSpec::Cifar { kind, dir, split } => DataSpec::Cifar { kind, dir: join(dir), split },
            s => s,
        }
    }

    /// Loads the data; synthetic sets take image size and class count from the model.
    pub fn load(&self, image_size: usize, num_classes: usize) -> Result<Dataset> {
        match self {
            DataSpec::Synth { n, seed } => synth_shapes(*n, image_size, num_classes, *seed),
            DataSpec::Idx { images, labels, range } => {
                let ds = load_idx(images, labels)?;
                match range {
                    Some((a, b)) => ds.range(*a, (*b).min(ds.len())),
                    None => Ok(ds),
                }
            }
            DataSpec::Cifar { kind, dir, split } => load_cifar_binary(dir, *kind, *split),
        }
    }
}
