//! Step-stamped doc embedding cache.
//!
//! Workers publish freshly encoded doc embeddings (pre-normalization tower
//! outputs) after every step; history lookups read them back without touching
//! the doc tower. Merging is order-independent: the newest step wins and ties
//! go to the lowest worker id, so simulated all-gather arrival order can't
//! change the outcome. Queries are never banked; the key space is doc ids.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub embedding: Vec<f64>,
    pub written_step: u64,
    pub writer: usize,
}

#[derive(Clone, Debug)]
pub struct MemoryBank {
    capacity: usize,
    window: u64,
    map: HashMap<u64, BankEntry>,
}

/// Checkpoint form: doc-id-sorted so serialization never depends on hash
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankSnapshot {
    pub entries: Vec<(u64, BankEntry)>,
}

/// One sequence lookup: absent ids zero-fill and clear their present bit.
#[derive(Clone, Debug)]
pub struct SequenceFetch {
    pub embeddings: Vec<Vec<f64>>,
    pub present: Vec<bool>,
}

impl SequenceFetch {
    /// Share of requested ids that were found; an empty request is fully
    /// covered.
    pub fn coverage(&self) -> f64 {
        if self.present.is_empty() {
            return 1.0;
        }
        self.present.iter().filter(|&&p| p).count() as f64 / self.present.len() as f64
    }
}

impl MemoryBank {
    pub fn new(capacity: usize, window: u64) -> Self {
        assert!(capacity > 0);
        Self {
            capacity,
            window,
            map: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, doc_id: u64) -> Option<&BankEntry> {
        self.map.get(&doc_id)
    }

    /// Write one embedding. Overwrites only when the incoming entry wins:
    /// strictly newer step, or same step from a lower worker id.
    pub fn put(&mut self, doc_id: u64, embedding: Vec<f64>, step: u64, worker: usize) {
        match self.map.get(&doc_id) {
            Some(old)
                if !(step > old.written_step
                    || (step == old.written_step && worker < old.writer)) => {}
            _ => {
                self.map.insert(
                    doc_id,
                    BankEntry {
                        embedding,
                        written_step: step,
                        writer: worker,
                    },
                );
            }
        }
    }

    /// Drop entries older than the window, then evict down to capacity,
    /// oldest first with doc id breaking ties.
    pub fn sweep(&mut self, current_step: u64) {
        let window = self.window;
        self.map
            .retain(|_, e| current_step.saturating_sub(e.written_step) <= window);
        if self.map.len() > self.capacity {
            let mut order: Vec<(u64, u64)> = self
                .map
                .iter()
                .map(|(&id, e)| (e.written_step, id))
                .collect();
            order.sort_unstable();
            let excess = self.map.len() - self.capacity;
            for &(_, id) in &order[..excess] {
                self.map.remove(&id);
            }
        }
    }

    pub fn get_sequence(&self, ids: &[u64], dim: usize) -> SequenceFetch {
        let mut embeddings = Vec::with_capacity(ids.len());
        let mut present = Vec::with_capacity(ids.len());
        for &id in ids {
            match self.map.get(&id) {
                Some(e) => {
                    assert_eq!(e.embedding.len(), dim, "bank entry width mismatch");
                    embeddings.push(e.embedding.clone());
                    present.push(true);
                }
                None => {
                    embeddings.push(vec![0.0; dim]);
                    present.push(false);
                }
            }
        }
        SequenceFetch {
            embeddings,
            present,
        }
    }

    /// Up to k resident doc ids, drawn without replacement from the sorted
    /// key list so the choice depends only on the rng state.
    pub fn sample_ids(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
        let mut keys: Vec<u64> = self.map.keys().copied().collect();
        keys.sort_unstable();
        let take = k.min(keys.len());
        for i in 0..take {
            let j = rng.gen_range(i..keys.len());
            keys.swap(i, j);
        }
        keys.truncate(take);
        keys
    }

    pub fn snapshot(&self) -> BankSnapshot {
        let mut entries: Vec<(u64, BankEntry)> =
            self.map.iter().map(|(&id, e)| (id, e.clone())).collect();
        entries.sort_unstable_by_key(|(id, _)| *id);
        BankSnapshot { entries }
    }

    pub fn restore(snapshot: BankSnapshot, capacity: usize, window: u64) -> Self {
        let mut bank = Self::new(capacity, window);
        for (id, e) in snapshot.entries {
            bank.map.insert(id, e);
        }
        bank
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmrank_core::rng::stream_rng;

    fn emb(x: f64) -> Vec<f64> {
        vec![x, x]
    }

    #[test]
    fn merge_is_order_independent() {
        let writes = [
            (7u64, emb(1.0), 3u64, 1usize),
            (7, emb(2.0), 4, 2), // newer step wins
            (7, emb(3.0), 4, 0), // same step, lower worker wins
            (8, emb(4.0), 3, 0),
        ];
        let mut forward = MemoryBank::new(16, 100);
        for (id, e, s, w) in writes.iter().cloned() {
            forward.put(id, e, s, w);
        }
        let mut reversed = MemoryBank::new(16, 100);
        for (id, e, s, w) in writes.iter().rev().cloned() {
            reversed.put(id, e, s, w);
        }
        assert_eq!(forward.snapshot(), reversed.snapshot());
        let e = forward.get(7).unwrap();
        assert_eq!((e.embedding.clone(), e.written_step, e.writer), (emb(3.0), 4, 0));
    }

    #[test]
    fn stale_write_never_clobbers() {
        let mut bank = MemoryBank::new(16, 100);
        bank.put(1, emb(9.0), 10, 0);
        bank.put(1, emb(0.0), 9, 0);
        assert_eq!(bank.get(1).unwrap().embedding, emb(9.0));
    }

    #[test]
    fn window_sweep_drops_only_expired() {
        let mut bank = MemoryBank::new(16, 5);
        bank.put(1, emb(1.0), 0, 0);
        bank.put(2, emb(2.0), 3, 0);
        bank.sweep(5); // age 5 is still within a window of 5
        assert_eq!(bank.len(), 2);
        bank.sweep(6); // doc 1 is now age 6
        assert!(bank.get(1).is_none());
        assert!(bank.get(2).is_some());
    }

    #[test]
    fn capacity_evicts_oldest_then_smallest_id() {
        let mut bank = MemoryBank::new(3, 1000);
        bank.put(10, emb(0.0), 1, 0);
        bank.put(11, emb(0.0), 1, 0);
        bank.put(12, emb(0.0), 2, 0);
        bank.put(13, emb(0.0), 3, 0);
        bank.put(14, emb(0.0), 4, 0);
        bank.sweep(4);
        assert_eq!(bank.len(), 3);
        // Step-1 entries go first, smaller doc id first.
        assert!(bank.get(10).is_none());
        assert!(bank.get(11).is_none());
        assert!(bank.get(12).is_some());
    }

    #[test]
    fn sequence_lookup_zero_fills_and_reports_coverage() {
        let mut bank = MemoryBank::new(8, 100);
        bank.put(5, vec![1.0, 2.0, 3.0], 0, 0);
        let fetch = bank.get_sequence(&[5, 6], 3);
        assert_eq!(fetch.embeddings[0], vec![1.0, 2.0, 3.0]);
        assert_eq!(fetch.embeddings[1], vec![0.0; 3]);
        assert_eq!(fetch.present, vec![true, false]);
        assert_eq!(fetch.coverage(), 0.5);
        assert_eq!(bank.get_sequence(&[], 3).coverage(), 1.0);
        // Duplicate ids fetch independently.
        let dup = bank.get_sequence(&[5, 5], 3);
        assert_eq!(dup.coverage(), 1.0);
    }

    #[test]
    fn snapshot_restores_bitwise_and_sorted() {
        let mut bank = MemoryBank::new(8, 100);
        for id in [9u64, 2, 7, 4] {
            bank.put(id, vec![id as f64 * 0.1, -0.4286281768762252], id, (id % 3) as usize);
        }
        let snap = bank.snapshot();
        let ids: Vec<u64> = snap.entries.iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![2, 4, 7, 9]);
        let json = serde_json::to_string(&snap).unwrap();
        let back: BankSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(snap, back);
        let restored = MemoryBank::restore(back, 8, 100);
        assert_eq!(restored.snapshot(), bank.snapshot());
    }

    #[test]
    fn probe_sampling_is_deterministic() {
        let mut bank = MemoryBank::new(64, 100);
        for id in 0..20u64 {
            bank.put(id, emb(id as f64), 0, 0);
        }
        let a = bank.sample_ids(5, &mut stream_rng(1, 3, 0));
        let b = bank.sample_ids(5, &mut stream_rng(1, 3, 0));
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|id| *id < 20));
        let all = bank.sample_ids(99, &mut stream_rng(1, 3, 0));
        assert_eq!(all.len(), 20);
    }
}
