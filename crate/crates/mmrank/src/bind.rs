//! Lazy bridge from a [`ParamStore`] to tape nodes.
//!
//! Each tape binds a parameter at most once, on first use, so tapes that
//! touch a few parameters stay small. Gradients flow back by node id and are
//! re-keyed to store order here.

use mmrank_core::params::ParamId;
use mmrank_core::{GradBuf, Gradients, NodeId, ParamStore, Tape};

pub struct BoundParams<'a> {
    store: &'a ParamStore,
    nodes: Vec<Option<NodeId>>,
}

impl<'a> BoundParams<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Tape node for a named parameter, binding it on first use.
    pub fn node(&mut self, tape: &mut Tape, name: &str) -> NodeId {
        let pid = self.store.id(name);
        *self.nodes[pid].get_or_insert_with(|| tape.param(self.store.get(pid).clone()))
    }

    /// Fold this tape's parameter gradients into a store-aligned buffer.
    pub fn accumulate_into(&self, grads: &Gradients, buf: &mut GradBuf) {
        for (pid, node) in self.nodes.iter().enumerate() {
            if let Some(node) = node {
                if let Some(g) = grads.of(*node) {
                    buf.add(pid, g);
                }
            }
        }
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, NodeId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(pid, n)| n.map(|n| (pid, n)))
    }
}
