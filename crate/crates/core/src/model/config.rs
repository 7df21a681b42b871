use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Which parameters get a separate copy per domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSpec {
    /// Everything shared.
    None,
    ClsToken,
    /// Every normalization scale and offset.
    NormParams,
    /// Patch embedding (ViT) or first convolution (CNN).
    Embedder,
    PosEmbedding,
    /// BatchNorm with separate statistics and affine parameters per branch.
    BnDualStats,
    /// BatchNorm with shared running statistics and per-branch affine parameters;
    /// the robust branch always normalizes with the running statistics.
    BnDualParams,
}

impl AdapterSpec {
    pub const ALL: [AdapterSpec; 7] = [
        AdapterSpec::None,
        AdapterSpec::ClsToken,
        AdapterSpec::NormParams,
        AdapterSpec::Embedder,
        AdapterSpec::PosEmbedding,
        AdapterSpec::BnDualStats,
        AdapterSpec::BnDualParams,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdapterSpec::None => "none",
            AdapterSpec::ClsToken => "cls_token",
            AdapterSpec::NormParams => "norm_params",
            AdapterSpec::Embedder => "embedder",
            AdapterSpec::PosEmbedding => "pos_embedding",
            AdapterSpec::BnDualStats => "bn_dual_stats",
            AdapterSpec::BnDualParams => "bn_dual_params",
        }
    }

    /// Whether the named parameter belongs to the dual set.
    pub fn is_dual(self, name: &str) -> bool {
        match self {
            AdapterSpec::None => false,
            AdapterSpec::ClsToken => name == "cls_token",
            AdapterSpec::PosEmbedding => name == "pos_embed",
            AdapterSpec::Embedder => name.starts_with("embed.") || name.starts_with("conv0."),
            AdapterSpec::NormParams | AdapterSpec::BnDualStats | AdapterSpec::BnDualParams => {
                name.ends_with(".scale") || name.ends_with(".offset")
            }
        }
    }
}

impl fmt::Display for AdapterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    VitMicro,
    CnnMicro,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit_micro" => Ok(Arch::VitMicro),
            "cnn_micro" => Ok(Arch::CnnMicro),
            _ => bail!(Config, "unknown arch `{}`", s),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    BatchNorm,
    GroupNorm(usize),
}

impl FromStr for NormKind {
    type Err = Error;

    /// `layernorm`, `batchnorm` or `groupnorm:<groups>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layernorm" => Ok(NormKind::LayerNorm),
            "batchnorm" => Ok(NormKind::BatchNorm),
            _ => match s.strip_prefix("groupnorm:").map(str::parse) {
                Some(Ok(g)) if g > 0 => Ok(NormKind::GroupNorm(g)),
                _ => bail!(Config, "unknown norm `{}` (expected layernorm, batchnorm or groupnorm:<g>)", s),
            },
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormKind::LayerNorm => f.write_str("layernorm"),
            NormKind::BatchNorm => f.write_str("batchnorm"),
            NormKind::GroupNorm(g) => write!(f, "groupnorm:{g}"),
        }
    }
}

/// Architecture hyperparameters.
///
/// For the CNN, `width` is the channel count of the first block, later
/// blocks use `2 * width`, and `depth` counts convolution blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub norm: NormKind,
    pub adapter: AdapterSpec,
    pub bn_momentum: f64,
}

pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

impl ModelConfig {
    pub fn vit_micro() -> Self {
        Self {
            arch: Arch::VitMicro,
            width: 64,
            depth: 4,
            heads: 4,
            patch_size: 4,
            patch_stride: 2,
            mlp_ratio: 4,
            num_classes: 10,
            image_size: 28,
            channels: 1,
            norm: NormKind::LayerNorm,
            adapter: AdapterSpec::None,
            bn_momentum: 0.9,
        }
    }

    pub fn cnn_micro() -> Self {
        Self {
            arch: Arch::CnnMicro,
            width: 16,
            depth: 3,
            heads: 1,
            patch_size: 3,
            patch_stride: 1,
            mlp_ratio: 1,
            num_classes: 10,
            image_size: 28,
            channels: 1,
            norm: NormKind::BatchNorm,
            adapter: AdapterSpec::None,
            bn_momentum: 0.9,
        }
    }

    /// ViT-B/16 on 224-pixel RGB images with a 1000-way head.
    pub fn vit_b16() -> Self {
        Self {
            width: 768,
            depth: 12,
            heads: 12,
            patch_size: 16,
            patch_stride: 16,
            num_classes: 1000,
            image_size: 224,
            channels: 3,
            ..Self::vit_micro()
        }
    }

    pub fn with_adapter(mut self, adapter: AdapterSpec) -> Self {
        self.adapter = adapter;
        self
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norm = norm;
        self
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        (self.image_size - self.patch_size) / self.patch_stride + 1
    }

    /// Patch tokens plus the classification token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn cnn_widths(&self) -> Vec<usize> {
        (0..self.depth).map(|i| if i == 0 { self.width } else { 2 * self.width }).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.num_classes == 0 || self.image_size == 0 || self.channels == 0 {
            bail!(Config, "model sizes must be positive");
        }
        let bn_adapter = matches!(self.adapter, AdapterSpec::BnDualStats | AdapterSpec::BnDualParams);
        match self.arch {
            Arch::VitMicro => {
                if self.heads == 0 || self.width % self.heads != 0 {
                    bail!(Config, "width {} is not divisible by {} heads", self.width, self.heads);
                }
                if self.patch_size == 0 || self.patch_stride == 0 || self.patch_size > self.image_size {
                    bail!(Config, "patch {} / stride {} does not fit {} px", self.patch_size, self.patch_stride, self.image_size);
                }
                if self.norm != NormKind::LayerNorm {
                    bail!(Config, "the ViT uses layernorm, got {}", self.norm);
                }
                if bn_adapter {
                    bail!(Config, "adapter {} needs a CNN with batchnorm", self.adapter);
                }
            }
            Arch::CnnMicro => {
                if matches!(self.adapter, AdapterSpec::ClsToken | AdapterSpec::PosEmbedding) {
                    bail!(Config, "adapter {} only exists for the ViT", self.adapter);
                }
                if bn_adapter && self.norm != NormKind::BatchNorm {
                    bail!(Config, "adapter {} needs norm = batchnorm, got {}", self.adapter, self.norm);
                }
                if self.norm == NormKind::BatchNorm && self.adapter == AdapterSpec::NormParams {
                    bail!(Config, "dual batchnorm parameters are the bn_dual_params adapter");
                }
                if let NormKind::GroupNorm(g) = self.norm {
                    if let Some(w) = self.cnn_widths().into_iter().find(|w| w % g != 0) {
                        bail!(Config, "{} channels are not divisible into {} groups", w, g);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn slot(name: impl Into<String>, shape: &[usize], init: Init) -> Slot {
    Slot { name: name.into(), shape: shape.to_vec(), init }
}

fn norm_slots(out: &mut Vec<Slot>, prefix: &str, d: usize) {
    out.push(slot(format!("{prefix}.scale"), &[d], Init::Ones));
    out.push(slot(format!("{prefix}.offset"), &[d], Init::Zeros));
}

fn linear_slots(out: &mut Vec<Slot>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(slot(format!("{prefix}.weight"), &[fan_in, fan_out], Init::Normal));
    out.push(slot(format!("{prefix}.bias"), &[fan_out], Init::Zeros));
}

/// Every learnable parameter in initialization order.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<Slot> {
    let mut out = Vec::new();
    let d = cfg.width;
    match cfg.arch {
        Arch::VitMicro => {
            let patch = cfg.patch_size * cfg.patch_size * cfg.channels;
            linear_slots(&mut out, "embed", patch, d);
            out.push(slot("cls_token", &[d], Init::Zeros));
            out.push(slot("pos_embed", &[cfg.tokens(), d], Init::Normal));
            for i in 0..cfg.depth {
                norm_slots(&mut out, &format!("block{i}.ln1"), d);
                linear_slots(&mut out, &format!("block{i}.attn.qkv"), d, 3 * d);
                linear_slots(&mut out, &format!("block{i}.attn.proj"), d, d);
                norm_slots(&mut out, &format!("block{i}.ln2"), d);
                linear_slots(&mut out, &format!("block{i}.mlp.fc1"), d, cfg.mlp_ratio * d);
                linear_slots(&mut out, &format!("block{i}.mlp.fc2"), cfg.mlp_ratio * d, d);
            }
            norm_slots(&mut out, "final_ln", d);
            linear_slots(&mut out, "head", d, cfg.num_classes);
        }
        Arch::CnnMicro => {
            let mut cin = cfg.channels;
            for (i, w) in cfg.cnn_widths().into_iter().enumerate() {
                linear_slots(&mut out, &format!("conv{i}"), 9 * cin, w);
                norm_slots(&mut out, &format!("norm{i}"), w);
                cin = w;
            }
            linear_slots(&mut out, "head", cin, cfg.num_classes);
        }
    }
    out
}

/// BatchNorm running statistics, as `(name, length)`.
pub(crate) fn buffer_layout(cfg: &ModelConfig) -> Vec<(String, usize)> {
    if cfg.arch != Arch::CnnMicro || cfg.norm != NormKind::BatchNorm {
        return Vec::new();
    }
    cfg.cnn_widths()
        .into_iter()
        .enumerate()
        .flat_map(|(i, w)| [(format!("norm{i}.running_mean"), w), (format!("norm{i}.running_var"), w)])
        .collect()
}

/// `(shared, dual per branch)` parameter counts implied by a configuration,
/// computed from shapes alone.
pub fn layout_param_counts(cfg: &ModelConfig) -> (usize, usize) {
    let mut shared = 0;
    let mut dual = 0;
    for s in param_layout(cfg) {
        let n: usize = s.shape.iter().product();
        if cfg.adapter.is_dual(&s.name) {
            dual += n;
        } else {
            shared += n;
        }
    }
    (shared, dual)
}

/// Whether AdamW weight decay applies to the named parameter.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".scale") || name.ends_with(".offset") || name == "cls_token" || name == "pos_embed")
}
