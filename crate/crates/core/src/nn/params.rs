use std::collections::HashMap;

use super::scalar::Scalar;
use super::tape::{BufId, Gradients, Tape};

pub type ParamId = usize;

pub struct ParamTensor<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

/// Named parameter store. A model initializes its tensors here once; every
/// training iteration binds the whole set onto a fresh tape and reads the
/// gradients back out by id.
pub struct ParamSet<S> {
    entries: Vec<ParamTensor<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<S>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols);
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamTensor { name, rows, cols, data });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor<S> {
        &self.entries[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor<S> {
        &mut self.entries[id]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<S>)> {
        self.entries.iter().enumerate()
    }

    /// Copy every tensor onto the tape as a gradient-carrying leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Bound {
        let ids = self
            .entries
            .iter()
            .map(|p| tape.leaf(p.rows, p.cols, p.data.clone()))
            .collect();
        Bound { ids }
    }
}

/// Tape buffer ids for one binding of a [`ParamSet`], index-aligned with it.
pub struct Bound {
    ids: Vec<BufId>,
}

impl Bound {
    pub fn buf(&self, id: ParamId) -> BufId {
        self.ids[id]
    }

    /// Per-parameter gradient slices out of a backward pass, aligned with the
    /// param set; `None` for tensors the loss never touched.
    pub fn grads<'g, S: Scalar>(&self, grads: &'g Gradients<S>) -> Vec<Option<&'g [S]>> {
        self.ids.iter().map(|&b| grads.get(b)).collect()
    }
}
