//! Named parameter storage and per-tape binding.
//!
//! Parameters are addressed by dotted hierarchical names
//! (`encoder.s1.b0.attn.wq`). Every entry carries a [`ParamGroup`] so the
//! model can report an exact census and the inference export can drop whole
//! groups. A [`Graph`] binds entries to tape leaves lazily, so a forward pass
//! only pays for the parameters it touches.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use mmseg_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    /// Per-modality image embedding layers.
    Embedding,
    /// Weights shared by every modality.
    Trunk,
    /// Per-modality encoder weights (V1 only).
    ModalityEncoder,
    /// Per-modality segmentation head (only when the head is not shared).
    ModalityHead,
    /// External attention modules and class embeddings.
    Eam,
    /// Channel calibration weights `w1`, `W2`, `W3`.
    Calibration,
    /// Constants folded from calibration for inference; not trainable.
    Folded,
}

impl ParamGroup {
    pub fn is_trainable(self) -> bool {
        self != ParamGroup::Folded
    }

    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::Embedding => "embedding",
            ParamGroup::Trunk => "trunk",
            ParamGroup::ModalityEncoder => "modality-encoder",
            ParamGroup::ModalityHead => "modality-head",
            ParamGroup::Eam => "eam",
            ParamGroup::Calibration => "calibration",
            ParamGroup::Folded => "folded",
        }
    }

    pub fn from_label(s: &str) -> Option<Self> {
        [
            ParamGroup::Embedding,
            ParamGroup::Trunk,
            ParamGroup::ModalityEncoder,
            ParamGroup::ModalityHead,
            ParamGroup::Eam,
            ParamGroup::Calibration,
            ParamGroup::Folded,
        ]
        .into_iter()
        .find(|g| g.label() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered collection of named tensors. Insertion order is preserved and
/// defines the serialization order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, group, value });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.position(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.position(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::MissingParam(name.to_string())),
        }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry] {
        &mut self.entries
    }

    /// Keeps only entries for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(&Entry) -> bool) {
        self.entries.retain(|e| keep(e));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect();
    }

    /// Scalar count of trainable values.
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group.is_trainable())
            .map(|e| e.value.numel())
            .sum()
    }

    /// Scalar count per group (folded constants included under their own key).
    pub fn census(&self) -> BTreeMap<ParamGroup, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.group).or_insert(0) += e.value.numel();
        }
        out
    }

    pub fn group_count(&self, group: ParamGroup) -> usize {
        self.census().get(&group).copied().unwrap_or(0)
    }
}

/// Deterministic per-name RNG, so a parameter's initial value depends only on
/// the seed and its own name, never on which other parameters exist.
pub fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Binds store entries to tape leaves on first use.
pub struct Graph<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Graph<'s> {
    /// A graph whose trainable parameters are differentiable leaves.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            trainable: true,
        }
    }

    /// A graph where every parameter is a constant.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            trainable: false,
            ..Graph::new(store)
        }
    }

    /// A graph continuing on `tape` where the entries `names` are already
    /// bound to `vars`; every other parameter enters as a constant. Used to
    /// differentiate with respect to a chosen subset of the store.
    pub fn with_bindings(store: &'s ParamStore, tape: Tape, names: &[String], vars: &[Var]) -> Result<Self> {
        let mut bound = vec![None; store.len()];
        for (name, &v) in names.iter().zip(vars) {
            let i = store
                .position(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            bound[i] = Some(v);
        }
        Ok(Graph {
            tape,
            store,
            bound,
            trainable: false,
        })
    }

    /// Releases the tape, ending the graph.
    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// The tape handle for parameter `name`.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let i = self
            .store
            .position(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if let Some(v) = self.bound[i] {
            return Ok(v);
        }
        let e = &self.store.entries[i];
        let value = e.value.clone();
        let v = if self.trainable && e.group.is_trainable() {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound[i] = Some(v);
        Ok(v)
    }

    /// Like [`param`](Self::param) but `None` when the entry is absent.
    pub fn maybe_param(&mut self, name: &str) -> Result<Option<Var>> {
        if self.has(name) {
            self.param(name).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Runs the reverse sweep and returns gradients aligned with the store.
    pub fn backward(mut self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        let per_entry = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v).cloned()))
            .collect();
        Ok(ParamGrads { grads: per_entry })
    }
}

/// Gradients indexed like the store they were computed against. Entries the
/// loss never touched are `None`.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    pub fn get(&self, index: usize) -> Option<&Tensor> {
        self.grads.get(index).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, store: &ParamStore, name: &str) -> Option<&Tensor> {
        store.position(name).and_then(|i| self.get(i))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
