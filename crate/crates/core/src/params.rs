//! Named parameter storage with aliasing.
//!
//! Several names may resolve to the same [`ParamId`]; that is how decoder
//! branches share their first layers. Aliased names are recorded so that
//! checkpoints can list them.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
    aliases: Vec<(String, String)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics if `name` is taken.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.entries.len() as u32);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Registers `alias` as another name for the storage behind `canonical`.
    pub(crate) fn alias(&mut self, alias: &str, canonical: &str) -> ParamId {
        let id = self.by_name[canonical];
        assert!(
            !self.by_name.contains_key(alias),
            "duplicate parameter {alias}"
        );
        self.by_name.insert(alias.to_string(), id);
        self.aliases
            .push((alias.to_string(), canonical.to_string()));
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len() as u32).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Canonical name of the storage.
    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.index()].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.index()].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.index()].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces the value behind `id`, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.index()].value;
        if slot.shape() != value.shape() {
            return Err(shape_mismatch(slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// `(alias, canonical)` name pairs in registration order.
    pub fn aliases(&self) -> &[(String, String)] {
        &self.aliases
    }

    /// Every name (canonical and alias) with its id, in name order.
    pub fn names(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.by_name.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Total number of scalars across distinct storages.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| invalid(alloc::format!("unknown parameter {name}")))?;
        self.set(id, value)
    }
}
