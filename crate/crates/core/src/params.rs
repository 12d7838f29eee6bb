//! Named trainable tensors, grouped for the stage freeze schedule.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    VisionAdapters,
    Projectors,
    ClassificationHead,
    SegmentationHead,
    PromptEmbeddings,
    InjectionTokens,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        Self::VisionAdapters,
        Self::Projectors,
        Self::ClassificationHead,
        Self::SegmentationHead,
        Self::PromptEmbeddings,
        Self::InjectionTokens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::VisionAdapters => "vision_adapters",
            Self::Projectors => "projectors",
            Self::ClassificationHead => "classification_head",
            Self::SegmentationHead => "segmentation_head",
            Self::PromptEmbeddings => "prompt_embeddings",
            Self::InjectionTokens => "injection_tokens",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Arc<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            group,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(move |&id| self.entries[id.0].group == group)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn scalar_count(&self, group: ParamGroup) -> usize {
        self.ids_in(group).map(|id| self.get(id).len()).sum()
    }

    /// SHA-256 over the names and exact bit patterns of every tensor in
    /// `group`.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for id in self.ids_in(group) {
            let e = &self.entries[id.0];
            h.update(e.name.as_bytes());
            h.update((e.value.nrows() as u64).to_le_bytes());
            h.update((e.value.ncols() as u64).to_le_bytes());
            for v in e.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Enters every tensor into `g`: groups in `trainable` as parameters,
    /// the rest as constants.
    pub fn bind(&self, g: &mut Graph, trainable: &BTreeSet<ParamGroup>) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| {
                    if trainable.contains(&e.group) {
                        g.param((*e.value).clone())
                    } else {
                        g.constant(Arc::clone(&e.value))
                    }
                })
                .collect(),
        )
    }

    /// Replaces a tensor by name, checking its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        let current = self.get(id).dim();
        if value.dim() != current {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {current:?}",
                value.dim()
            )));
        }
        *self.get_mut(id) = value;
        Ok(())
    }
}

/// Graph variables for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}
