//! Named parameter storage and the per-forward execution context.

use std::cell::RefCell;
use std::collections::HashMap;

use crate::tensor::kernels::MacCounter;
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, weight-decayed.
    Weight,
    /// Trainable, excluded from weight decay (norms, biases, embeddings).
    NoDecay,
    /// Not trainable (running statistics).
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered registry of every named tensor of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        let id = self.entries.len();
        let prev = self.index.insert(name.clone(), id);
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.entries.push(Entry { name, value, kind });
        ParamId(id)
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
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Entry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind != ParamKind::Buffer)
    }

    /// Scalar count of trainable values (buffers excluded).
    pub fn num_params(&self) -> usize {
        self.trainable().map(|id| self.get(id).numel()).sum()
    }

    /// Same names, kinds, shapes and bit patterns.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.kind == b.kind && a.value.bitwise_eq(&b.value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State shared by all layers during one forward pass: the tape, the bound
/// parameters, pending running-stat updates, and optional instrumentation.
pub struct Ctx<'g> {
    pub graph: &'g Graph,
    pub store: &'g ParamStore,
    pub mode: Mode,
    frozen: bool,
    bound: RefCell<Vec<Option<Var<'g>>>>,
    stat_updates: RefCell<Vec<(ParamId, Vec<f64>)>>,
    taps: RefCell<Vec<(String, Var<'g>)>>,
    capture: bool,
    mac_log: Option<RefCell<Vec<(String, u64)>>>,
}

impl<'g> Ctx<'g> {
    pub fn new(graph: &'g Graph, store: &'g ParamStore, mode: Mode) -> Self {
        Self {
            graph,
            store,
            mode,
            frozen: false,
            bound: RefCell::new(vec![None; store.len()]),
            stat_updates: RefCell::new(Vec::new()),
            taps: RefCell::new(Vec::new()),
            capture: false,
            mac_log: None,
        }
    }

    /// Parameters enter the tape as constants (no parameter gradients).
    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    /// Keep named intermediate feature maps (block outputs, attention).
    pub fn capturing(mut self) -> Self {
        self.capture = true;
        self
    }

    /// Record executed multiply-accumulates per layer.
    pub fn metering(mut self) -> Self {
        self.mac_log = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tape variable for a parameter, created on first use.
    pub fn param(&self, id: ParamId) -> Var<'g> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.frozen || self.store.entry(id).kind == ParamKind::Buffer {
            self.graph.constant(t)
        } else {
            self.graph.param(t)
        };
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Pre-binds a parameter to an existing variable (used by gradient checks).
    pub fn bind(&self, id: ParamId, v: Var<'g>) {
        self.bound.borrow_mut()[id.0] = Some(v);
    }

    /// Gradients for every parameter that took part in the forward pass.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if self.store.entries[i].kind == ParamKind::Buffer || !grads.is_connected(v) {
                    return None;
                }
                Some((ParamId(i), grads.wrt(v)))
            })
            .collect()
    }

    pub fn push_stat_update(&self, id: ParamId, value: Vec<f64>) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    pub fn take_stat_updates(&self) -> Vec<(ParamId, Vec<f64>)> {
        std::mem::take(&mut *self.stat_updates.borrow_mut())
    }

    pub fn tap(&self, name: &str, v: Var<'g>) {
        if self.capture {
            self.taps.borrow_mut().push((name.to_string(), v));
        }
    }

    pub fn tapped(&self, name: &str) -> Option<Var<'g>> {
        self.taps.borrow().iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.taps.borrow().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Runs `f`, attributing the MACs it executes to layer `name`.
    pub fn metered<T>(&self, name: &str, f: impl FnOnce() -> T) -> T {
        match &self.mac_log {
            None => f(),
            Some(log) => {
                let counter = MacCounter::start();
                let out = f();
                let n = counter.take();
                let mut log = log.borrow_mut();
                match log.iter_mut().find(|(l, _)| l == name) {
                    Some(row) => row.1 += n,
                    None => log.push((name.to_string(), n)),
                }
                out
            }
        }
    }

    pub fn mac_log(&self) -> Vec<(String, u64)> {
        self.mac_log.as_ref().map(|l| l.borrow().clone()).unwrap_or_default()
    }
}

impl ParamStore {
    /// Writes buffered running-statistic updates back into the store.
    pub fn apply_stat_updates(&mut self, updates: Vec<(ParamId, Vec<f64>)>) {
        for (id, v) in updates {
            self.get_mut(id).data_mut().copy_from_slice(&v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_exclude_buffers() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros(&[3, 4]), ParamKind::Weight);
        s.add("a.bias", Tensor::zeros(&[4]), ParamKind::NoDecay);
        s.add("bn.running_mean", Tensor::zeros(&[4]), ParamKind::Buffer);
        assert_eq!(s.num_params(), 16);
        assert_eq!(s.find("a.bias"), Some(ParamId(1)));
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[1]), ParamKind::Weight);
        s.add("w", Tensor::zeros(&[1]), ParamKind::Weight);
    }

    #[test]
    fn binding_is_lazy_and_shared() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::ones(&[2]), ParamKind::Weight);
        let g = Graph::new();
        let cx = Ctx::new(&g, &s, Mode::Train);
        let a = cx.param(id);
        let b = cx.param(id);
        assert_eq!(a.id(), b.id());
        let loss = a.add(&b).unwrap().sum();
        let grads = g.backward(loss).unwrap();
        let pg = cx.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data(), &[2.0, 2.0]);
    }
}
