//! Micro ViT and CNN classifiers with shared and dual parameter sets.

mod config;
mod net;
mod store;

pub use config::{decays, layout_param_counts, AdapterSpec, Arch, ModelConfig, NormKind, INIT_STD, NORM_EPS};
pub use net::{BnUpdate, BnVariant, Forward, ForwardCtx, Model, ParamVars, Phase, TrainBinding};
pub use store::{Branch, BranchKey, DualPair, Mode, ParamKey, ParamStore, Resolved};
