use std::borrow::Cow;
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{buffer_layout, param_layout, AdapterSpec, Arch, Init, ModelConfig, NormKind, INIT_STD, NORM_EPS};
use super::store::{Branch, BranchKey, DualPair, Mode, ParamKey, ParamStore};
use crate::error::{bail, Error, Result};
use crate::numerics::{BatchStats, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// BatchNorm flavour, as implied by the adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnVariant {
    Shared,
    Dual,
    DualParams,
}

impl BnVariant {
    pub fn of(adapter: AdapterSpec) -> Self {
        match adapter {
            AdapterSpec::BnDualStats => BnVariant::Dual,
            AdapterSpec::BnDualParams => BnVariant::DualParams,
            _ => BnVariant::Shared,
        }
    }
}

/// Running-statistics update produced by a batch-statistics BatchNorm layer.
/// `branch` is set when the statistics are per branch.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub layer: String,
    pub branch: Option<Branch>,
    pub stats: BatchStats,
}

/// Tape variables for every parameter name of one branch.
pub type ParamVars = BTreeMap<String, Var>;

/// Everything a forward pass needs besides parameters.
pub struct ForwardCtx<'a> {
    pub phase: Phase,
    /// `None` for interpolated modes, which always run in eval phase.
    pub branch: Option<Branch>,
    pub buffers: BTreeMap<String, Cow<'a, Tensor>>,
}

pub struct Forward {
    pub logits: Var,
    pub bn_updates: Vec<BnUpdate>,
}

/// Leaves recorded for training: views per branch plus a key for each leaf.
pub struct TrainBinding {
    pub clean: ParamVars,
    pub robust: ParamVars,
    pub leaves: Vec<(ParamKey, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
}

impl Model {
    /// Builds a model and its deterministic initial parameters.
    ///
    /// Weights are truncated normal with std 0.02, scales one, offsets,
    /// biases and the classification token zero. Dual copies start equal.
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(config.adapter);
        for slot in param_layout(&config) {
            let t = match slot.init {
                Init::Normal => Tensor::trunc_normal(&slot.shape, INIT_STD, &mut rng),
                Init::Zeros => Tensor::zeros(&slot.shape),
                Init::Ones => Tensor::ones(&slot.shape),
            };
            if config.adapter.is_dual(&slot.name) {
                store.dual.insert(slot.name, DualPair { clean: t.clone(), adv: t });
            } else {
                store.shared.insert(slot.name, t);
            }
        }
        let dual_stats = config.adapter == AdapterSpec::BnDualStats;
        for (name, len) in buffer_layout(&config) {
            let init = if name.ends_with("running_var") { 1.0 } else { 0.0 };
            let t = Tensor::full(&[len], init);
            if dual_stats {
                store.dual_buffers.insert(name, DualPair { clean: t.clone(), adv: t });
            } else {
                store.buffers.insert(name, t);
            }
        }
        Ok((Model { config }, store))
    }

    pub fn from_config(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, self.config.image_size, self.config.image_size, self.config.channels]
    }

    /// Records resolved parameters as constants (no gradients).
    pub fn bind_constants(&self, tape: &mut Tape, store: &ParamStore, mode: Mode) -> ParamVars {
        store.resolve(mode).into_iter().map(|(k, v)| (k, tape.constant(v.into_owned()))).collect()
    }

    /// Records every parameter as a gradient leaf. Shared tensors are bound
    /// once and appear in both branch views; each dual tensor only in its own.
    pub fn bind_training(&self, tape: &mut Tape, store: &ParamStore) -> TrainBinding {
        let mut clean = ParamVars::new();
        let mut robust = ParamVars::new();
        let mut leaves = Vec::new();
        for (name, t) in &store.shared {
            let v = tape.leaf(t.clone(), true);
            clean.insert(name.clone(), v);
            robust.insert(name.clone(), v);
            leaves.push((ParamKey::Shared(name.clone()), v));
        }
        for (name, pair) in &store.dual {
            let c = tape.leaf(pair.clean.clone(), true);
            let a = tape.leaf(pair.adv.clone(), true);
            clean.insert(name.clone(), c);
            robust.insert(name.clone(), a);
            leaves.push((ParamKey::Dual(name.clone(), BranchKey::Clean), c));
            leaves.push((ParamKey::Dual(name.clone(), BranchKey::Robust), a));
        }
        TrainBinding { clean, robust, leaves }
    }

    pub fn ctx<'a>(&self, store: &'a ParamStore, mode: Mode, phase: Phase) -> ForwardCtx<'a> {
        let branch = mode.branch();
        ForwardCtx { phase: if branch.is_none() { Phase::Eval } else { phase }, branch, buffers: store.resolve_buffers(mode) }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != c.image_size || shape[2] != c.image_size || shape[3] != c.channels {
            bail!(
                Dimension,
                "model expects [b, {}, {}, {}] input, got {:?}",
                c.image_size,
                c.image_size,
                c.channels,
                shape
            );
        }
        Ok(())
    }

    /// Records the forward pass of `x` (`[b, h, w, c]`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &ParamVars, ctx: &ForwardCtx<'_>) -> Result<Forward> {
        self.check_input(tape.shape(x))?;
        let p = |name: &str| params.get(name).copied().ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")));
        match self.config.arch {
            Arch::VitMicro => Ok(Forward { logits: self.vit(tape, x, &p)?, bn_updates: Vec::new() }),
            Arch::CnnMicro => self.cnn(tape, x, &p, ctx),
        }
    }

    /// Evaluation-phase logits for a mode.
    pub fn logits(&self, store: &ParamStore, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape, store, mode);
        let xv = tape.constant(x.clone());
        let ctx = self.ctx(store, mode, Phase::Eval);
        let out = self.forward(&mut tape, xv, &params, &ctx)?;
        let logits = tape.value(out.logits).clone();
        if !logits.all_finite() {
            bail!(Numeric, "non-finite logits");
        }
        Ok(logits)
    }

    /// CNN forward with an explicit BatchNorm flavour and phase; returns the
    /// logits and any running-statistics updates (not yet applied).
    pub fn forward_cnn_bn(
        &self,
        store: &ParamStore,
        x: &Tensor,
        mode: Mode,
        phase: Phase,
        variant: BnVariant,
    ) -> Result<(Tensor, Vec<BnUpdate>)> {
        if self.config.arch != Arch::CnnMicro || self.config.norm != NormKind::BatchNorm {
            bail!(Config, "forward_cnn_bn needs a CNN with batchnorm");
        }
        if BnVariant::of(store.adapter) != variant {
            bail!(Config, "batchnorm variant {:?} does not match adapter {}", variant, store.adapter);
        }
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape, store, mode);
        let xv = tape.constant(x.clone());
        let ctx = self.ctx(store, mode, phase);
        let out = self.forward(&mut tape, xv, &params, &ctx)?;
        Ok((tape.value(out.logits).clone(), out.bn_updates))
    }

    fn linear(tape: &mut Tape, x: Var, p: &impl Fn(&str) -> Result<Var>, prefix: &str) -> Result<Var> {
        let y = tape.matmul(x, p(&format!("{prefix}.weight"))?)?;
        tape.add_broadcast(y, p(&format!("{prefix}.bias"))?)
    }

    fn vit(&self, tape: &mut Tape, x: Var, p: &impl Fn(&str) -> Result<Var>) -> Result<Var> {
        let c = &self.config;
        let b = tape.shape(x)[0];
        let (d, n, heads) = (c.width, c.tokens(), c.heads);
        let dh = d / heads;

        let patches = tape.im2col(x, c.patch_size, c.patch_stride, 0)?;
        let emb = Self::linear(tape, patches, p, "embed")?;
        let emb = tape.reshape(emb, &[b, n - 1, d])?;
        let cls = tape.expand(p("cls_token")?, b)?;
        let cls = tape.reshape(cls, &[b, 1, d])?;
        let tokens = tape.concat(cls, emb, 1)?;
        let mut h = tape.add_broadcast(tokens, p("pos_embed")?)?;

        for i in 0..c.depth {
            let pre = format!("block{i}");
            let z = tape.layer_norm(h, p(&format!("{pre}.ln1.scale"))?, p(&format!("{pre}.ln1.offset"))?, NORM_EPS)?;
            let z = tape.reshape(z, &[b * n, d])?;
            let qkv = Self::linear(tape, z, p, &format!("{pre}.attn.qkv"))?;
            let qkv = tape.reshape(qkv, &[b, n, 3, heads, dh])?;
            let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
            let qkv = tape.reshape(qkv, &[3, b * heads, n, dh])?;
            let q = tape.slice(qkv, 0, 0, 1)?;
            let q = tape.reshape(q, &[b * heads, n, dh])?;
            let k = tape.slice(qkv, 0, 1, 2)?;
            let k = tape.reshape(k, &[b * heads, n, dh])?;
            let v = tape.slice(qkv, 0, 2, 3)?;
            let v = tape.reshape(v, &[b * heads, n, dh])?;
            let scores = tape.bmm(q, k, false, true)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let att = tape.softmax(scores, 2)?;
            let ctxv = tape.bmm(att, v, false, false)?;
            let ctxv = tape.reshape(ctxv, &[b, heads, n, dh])?;
            let ctxv = tape.permute(ctxv, &[0, 2, 1, 3])?;
            let ctxv = tape.reshape(ctxv, &[b * n, d])?;
            let attn = Self::linear(tape, ctxv, p, &format!("{pre}.attn.proj"))?;
            let attn = tape.reshape(attn, &[b, n, d])?;
            h = tape.add(h, attn)?;

            let z = tape.layer_norm(h, p(&format!("{pre}.ln2.scale"))?, p(&format!("{pre}.ln2.offset"))?, NORM_EPS)?;
            let z = tape.reshape(z, &[b * n, d])?;
            let z = Self::linear(tape, z, p, &format!("{pre}.mlp.fc1"))?;
            let z = tape.gelu(z)?;
            let z = Self::linear(tape, z, p, &format!("{pre}.mlp.fc2"))?;
            let z = tape.reshape(z, &[b, n, d])?;
            h = tape.add(h, z)?;
        }

        let h = tape.layer_norm(h, p("final_ln.scale")?, p("final_ln.offset")?, NORM_EPS)?;
        let patch_tokens = tape.slice(h, 1, 1, n)?;
        let pooled = tape.mean_axis(patch_tokens, 1)?;
        Self::linear(tape, pooled, p, "head")
    }

    fn cnn(&self, tape: &mut Tape, x: Var, p: &impl Fn(&str) -> Result<Var>, ctx: &ForwardCtx<'_>) -> Result<Forward> {
        let c = &self.config;
        let b = tape.shape(x)[0];
        let variant = BnVariant::of(c.adapter);
        let mut updates = Vec::new();
        let mut h = x;
        for (i, w) in c.cnn_widths().into_iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let cols = tape.im2col(h, 3, stride, 1)?;
            let (oh, ow) = {
                let s = tape.shape(h);
                ((s[1] + 2 - 3) / stride + 1, (s[2] + 2 - 3) / stride + 1)
            };
            let y = Self::linear(tape, cols, p, &format!("conv{i}"))?;
            let y = tape.reshape(y, &[b, oh, ow, w])?;
            let (scale, offset) = (p(&format!("norm{i}.scale"))?, p(&format!("norm{i}.offset"))?);
            let y = match c.norm {
                NormKind::LayerNorm => tape.group_norm(y, scale, offset, 1, NORM_EPS)?,
                NormKind::GroupNorm(g) => tape.group_norm(y, scale, offset, g, NORM_EPS)?,
                NormKind::BatchNorm => {
                    let layer = format!("norm{i}");
                    let buf = |suffix: &str| {
                        ctx.buffers
                            .get(&format!("{layer}.{suffix}"))
                            .map(|t| t.data().to_vec())
                            .ok_or_else(|| Error::Contract(format!("missing buffer `{layer}.{suffix}`")))
                    };
                    let (rm, rv) = (buf("running_mean")?, buf("running_var")?);
                    let train = ctx.phase == Phase::Train;
                    let use_batch = match (variant, ctx.branch) {
                        (BnVariant::DualParams, Some(Branch::Robust)) => false,
                        _ => train,
                    };
                    let (y, stats) = tape.batch_norm(y, scale, offset, &rm, &rv, use_batch, c.bn_momentum, NORM_EPS)?;
                    if use_batch {
                        let branch = if variant == BnVariant::Dual { ctx.branch } else { None };
                        updates.push(BnUpdate { layer, branch, stats });
                    }
                    y
                }
            };
            h = tape.relu(y)?;
        }
        let s = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[b, s[1] * s[2], s[3]])?;
        let pooled = tape.mean_axis(flat, 1)?;
        Ok(Forward { logits: Self::linear(tape, pooled, p, "head")?, bn_updates: updates })
    }
}

impl ParamStore {
    /// Writes BatchNorm running-statistics updates into the store.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        for u in updates {
            let mean = Tensor::new(vec![u.stats.mean.len()], u.stats.mean.clone())?;
            let var = Tensor::new(vec![u.stats.var.len()], u.stats.var.clone())?;
            for (suffix, value) in [("running_mean", mean), ("running_var", var)] {
                let key = format!("{}.{suffix}", u.layer);
                let slot = match u.branch {
                    Some(b) => self.dual_buffers.get_mut(&key).map(|p| p.get_mut(b)),
                    None => self.buffers.get_mut(&key),
                };
                match slot {
                    Some(t) => *t = value,
                    None => bail!(Contract, "no buffer `{}` for this update", key),
                }
            }
        }
        Ok(())
    }
}
