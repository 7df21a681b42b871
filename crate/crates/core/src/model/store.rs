use std::borrow::Cow;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::AdapterSpec;
use crate::error::{bail, Result};
use crate::numerics::Tensor;

/// Inference-branch selector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Mode {
    Clean,
    Robust,
    /// `β·clean + (1 − β)·adv`; β may lie outside `[0, 1]`.
    Soup(f64),
    /// `β1·clean + β2·adv`.
    Combo(f64, f64),
}

impl Mode {
    pub fn coefficients(self) -> (f64, f64) {
        match self {
            Mode::Clean => (1.0, 0.0),
            Mode::Robust => (0.0, 1.0),
            Mode::Soup(b) => (b, 1.0 - b),
            Mode::Combo(b1, b2) => (b1, b2),
        }
    }

    pub fn branch(self) -> Option<Branch> {
        match self.coefficients() {
            (1.0, 0.0) => Some(Branch::Clean),
            (0.0, 1.0) => Some(Branch::Robust),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Clean,
    Robust,
}

impl Branch {
    pub fn mode(self) -> Mode {
        match self {
            Branch::Clean => Mode::Clean,
            Branch::Robust => Mode::Robust,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualPair {
    pub clean: Tensor,
    pub adv: Tensor,
}

impl DualPair {
    pub fn get(&self, branch: Branch) -> &Tensor {
        match branch {
            Branch::Clean => &self.clean,
            Branch::Robust => &self.adv,
        }
    }

    pub fn get_mut(&mut self, branch: Branch) -> &mut Tensor {
        match branch {
            Branch::Clean => &mut self.clean,
            Branch::Robust => &mut self.adv,
        }
    }

    fn resolve(&self, mode: Mode) -> Cow<'_, Tensor> {
        match mode.branch() {
            Some(b) => Cow::Borrowed(self.get(b)),
            None => {
                let (a, b) = mode.coefficients();
                Cow::Owned(self.clean.lincomb(a, &self.adv, b).expect("dual pair shapes agree"))
            }
        }
    }
}

/// Identifies one trainable tensor of a store.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    Shared(String),
    Dual(String, BranchKey),
}

/// `Branch` with an ordering, for use inside map keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BranchKey {
    Clean,
    Robust,
}

impl From<Branch> for BranchKey {
    fn from(b: Branch) -> Self {
        match b {
            Branch::Clean => BranchKey::Clean,
            Branch::Robust => BranchKey::Robust,
        }
    }
}

impl From<BranchKey> for Branch {
    fn from(b: BranchKey) -> Self {
        match b {
            BranchKey::Clean => Branch::Clean,
            BranchKey::Robust => Branch::Robust,
        }
    }
}

impl ParamKey {
    pub fn name(&self) -> &str {
        match self {
            ParamKey::Shared(n) | ParamKey::Dual(n, _) => n,
        }
    }
}

/// Model parameters split into a shared set and per-branch dual copies,
/// plus non-trainable BatchNorm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub adapter: AdapterSpec,
    pub shared: BTreeMap<String, Tensor>,
    pub dual: BTreeMap<String, DualPair>,
    pub buffers: BTreeMap<String, Tensor>,
    pub dual_buffers: BTreeMap<String, DualPair>,
}

pub type Resolved<'a> = BTreeMap<String, Cow<'a, Tensor>>;

impl ParamStore {
    pub fn new(adapter: AdapterSpec) -> Self {
        Self {
            adapter,
            shared: BTreeMap::new(),
            dual: BTreeMap::new(),
            buffers: BTreeMap::new(),
            dual_buffers: BTreeMap::new(),
        }
    }

    /// Checks disjointness, pair shapes and that the dual set follows the adapter.
    pub fn validate(&self) -> Result<()> {
        for (name, pair) in &self.dual {
            if self.shared.contains_key(name) {
                bail!(Contract, "`{}` is both shared and dual", name);
            }
            if pair.clean.shape() != pair.adv.shape() {
                bail!(Contract, "dual pair `{}` has shapes {:?} and {:?}", name, pair.clean.shape(), pair.adv.shape());
            }
            if !self.adapter.is_dual(name) {
                bail!(Contract, "`{}` is dual but adapter {} does not cover it", name, self.adapter);
            }
        }
        if let Some(name) = self.shared.keys().find(|n| self.adapter.is_dual(n)) {
            bail!(Contract, "`{}` is shared but adapter {} makes it dual", name, self.adapter);
        }
        for (name, pair) in &self.dual_buffers {
            if pair.clean.shape() != pair.adv.shape() {
                bail!(Contract, "dual buffer `{}` has mismatched shapes", name);
            }
        }
        Ok(())
    }

    /// `(shared, dual per branch)` scalar parameter counts.
    pub fn count_params(&self) -> (usize, usize) {
        (
            self.shared.values().map(Tensor::numel).sum(),
            self.dual.values().map(|p| p.clean.numel()).sum(),
        )
    }

    /// Effective parameters for a mode; shared tensors are borrowed, and so
    /// are dual tensors when the mode selects one branch exactly.
    pub fn resolve(&self, mode: Mode) -> Resolved<'_> {
        let mut out: Resolved<'_> = self.shared.iter().map(|(k, v)| (k.clone(), Cow::Borrowed(v))).collect();
        out.extend(self.dual.iter().map(|(k, p)| (k.clone(), p.resolve(mode))));
        out
    }

    /// Effective running statistics for a mode.
    pub fn resolve_buffers(&self, mode: Mode) -> Resolved<'_> {
        let mut out: Resolved<'_> = self.buffers.iter().map(|(k, v)| (k.clone(), Cow::Borrowed(v))).collect();
        out.extend(self.dual_buffers.iter().map(|(k, p)| (k.clone(), p.resolve(mode))));
        out
    }

    pub fn get(&self, key: &ParamKey) -> Option<&Tensor> {
        match key {
            ParamKey::Shared(n) => self.shared.get(n),
            ParamKey::Dual(n, b) => self.dual.get(n).map(|p| p.get((*b).into())),
        }
    }

    pub fn get_mut(&mut self, key: &ParamKey) -> Option<&mut Tensor> {
        match key {
            ParamKey::Shared(n) => self.shared.get_mut(n),
            ParamKey::Dual(n, b) => self.dual.get_mut(n).map(|p| p.get_mut((*b).into())),
        }
    }

    /// Every trainable tensor with its key, in a stable order.
    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        let shared = self.shared.iter().map(|(k, v)| (ParamKey::Shared(k.clone()), v));
        let dual = self.dual.iter().flat_map(|(k, p)| {
            [
                (ParamKey::Dual(k.clone(), BranchKey::Clean), &p.clean),
                (ParamKey::Dual(k.clone(), BranchKey::Robust), &p.adv),
            ]
        });
        shared.chain(dual)
    }

    /// Same keys and shapes, including buffers.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        fn maps_match(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
        }
        fn pairs_match(a: &BTreeMap<String, DualPair>, b: &BTreeMap<String, DualPair>) -> bool {
            a.len() == b.len()
                && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.clean.shape() == vb.clean.shape())
        }
        self.adapter == other.adapter
            && maps_match(&self.shared, &other.shared)
            && pairs_match(&self.dual, &other.dual)
            && maps_match(&self.buffers, &other.buffers)
            && pairs_match(&self.dual_buffers, &other.dual_buffers)
    }

    /// Applies `f(self_tensor, other_tensor)` to every tensor (parameters and
    /// buffers), pairing by key. Fails unless both stores share a layout.
    pub fn zip_map(&self, other: &ParamStore, f: impl Fn(&Tensor, &Tensor) -> Tensor) -> Result<ParamStore> {
        if !self.same_layout(other) {
            bail!(Contract, "stores have different keys or shapes");
        }
        let map = |a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>| {
            a.iter().map(|(k, v)| (k.clone(), f(v, &b[k]))).collect()
        };
        let pairs = |a: &BTreeMap<String, DualPair>, b: &BTreeMap<String, DualPair>| {
            a.iter()
                .map(|(k, p)| (k.clone(), DualPair { clean: f(&p.clean, &b[k].clean), adv: f(&p.adv, &b[k].adv) }))
                .collect()
        };
        Ok(ParamStore {
            adapter: self.adapter,
            shared: map(&self.shared, &other.shared),
            dual: pairs(&self.dual, &other.dual),
            buffers: map(&self.buffers, &other.buffers),
            dual_buffers: pairs(&self.dual_buffers, &other.dual_buffers),
        })
    }

    /// Collapses a mode into a fully shared store (adapter `none`).
    pub fn merged(&self, mode: Mode) -> ParamStore {
        let mut out = ParamStore::new(AdapterSpec::None);
        out.shared = self.resolve(mode).into_iter().map(|(k, v)| (k, v.into_owned())).collect();
        out.buffers = self.resolve_buffers(mode).into_iter().map(|(k, v)| (k, v.into_owned())).collect();
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params().all(|(_, t)| t.all_finite())
    }
}
