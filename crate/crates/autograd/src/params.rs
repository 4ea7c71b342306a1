use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Scalar, Tensor};

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
    lr_scale: f64,
}

/// Ordered collection of named learnable tensors.
///
/// Insertion order is part of the checkpoint format and of every hash
/// computed over the store, so models must register parameters in a fixed
/// order.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<Entry<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            uid: next_uid(),
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    value: e.value.clone(),
                    lr_scale: e.lr_scale,
                })
                .collect(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            uid: next_uid(),
            entries: Vec::new(),
        }
    }

    /// Process-unique identity, used by graphs to memoize bindings.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.id_of(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            lr_scale: 1.0,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn lr_scale(&self, id: ParamId) -> f64 {
        self.entries[id.0].lr_scale
    }

    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        self.entries[id.0].lr_scale = scale;
    }

    /// Copies every tensor whose name starts with `src_prefix` in `src` into
    /// the tensor named `dst_prefix + rest` here. Returns the number copied.
    pub fn copy_prefixed(&mut self, src: &ParamStore<T>, src_prefix: &str, dst_prefix: &str) -> usize {
        let mut copied = 0;
        for (_, name, value) in src.iter() {
            if let Some(rest) = name.strip_prefix(src_prefix) {
                let target = format!("{dst_prefix}{rest}");
                if let Some(id) = self.id_of(&target) {
                    assert_eq!(
                        self.get(id).shape(),
                        value.shape(),
                        "shape mismatch copying {name} -> {target}"
                    );
                    *self.get_mut(id) = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
