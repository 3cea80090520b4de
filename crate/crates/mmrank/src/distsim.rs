//! Simulated multi-worker protocol: contiguous batch sharding, the
//! forward/backward sampling plan, and unique-doc ownership for dedup.
//!
//! The forward set is the p% of the batch whose doc tower runs fresh this
//! step (never empty); the backward set is the q% whose tower gradients are
//! kept, always a subset of the forward set because gradient needs fresh
//! activations. Ownership assigns each unique doc id in the step's forward
//! set to the lowest-indexed worker that holds it; owners encode once and
//! the results are all-gathered, so every worker scores its samples against
//! identical embedding values whether or not dedup is on.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Contiguous equal shards, one per worker.
pub fn shard<T: Clone>(items: &[T], workers: usize) -> Vec<Vec<T>> {
    assert!(workers > 0);
    assert_eq!(
        items.len() % workers,
        0,
        "batch must divide evenly across workers"
    );
    let per = items.len() / workers;
    items.chunks(per).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPlan {
    pub forward: Vec<bool>,
    pub backward: Vec<bool>,
}

impl SamplingPlan {
    pub fn all(b: usize) -> Self {
        Self {
            forward: vec![true; b],
            backward: vec![true; b],
        }
    }

    pub fn forward_count(&self) -> usize {
        self.forward.iter().filter(|&&f| f).count()
    }

    pub fn backward_count(&self) -> usize {
        self.backward.iter().filter(|&&f| f).count()
    }
}

fn share(b: usize, pct: f64) -> usize {
    ((pct / 100.0) * b as f64).round() as usize
}

/// Draw the step's forward/backward membership. Counts are the rounded
/// shares of the batch; the forward set keeps at least one sample. The
/// backward picks are the first slots of the same shuffle, which is what
/// makes them a subset of the forward picks.
pub fn plan_sampling(b: usize, p_pct: f64, q_pct: f64, rng: &mut ChaCha8Rng) -> SamplingPlan {
    assert!(b > 0);
    assert!(p_pct > 0.0 && p_pct <= 100.0);
    assert!((0.0..=p_pct).contains(&q_pct));
    let n_forward = share(b, p_pct).clamp(1, b);
    let n_backward = share(b, q_pct).min(n_forward);
    let mut order: Vec<usize> = (0..b).collect();
    for i in 0..n_forward {
        let j = rng.gen_range(i..b);
        order.swap(i, j);
    }
    let mut plan = SamplingPlan {
        forward: vec![false; b],
        backward: vec![false; b],
    };
    for &i in &order[..n_forward] {
        plan.forward[i] = true;
    }
    for &i in &order[..n_backward] {
        plan.backward[i] = true;
    }
    plan
}

/// Which worker encodes each unique doc this step.
#[derive(Clone, Debug, PartialEq)]
pub struct Ownership {
    pub owner_of: BTreeMap<u64, usize>,
    /// Sorted doc ids each worker owns; empty vecs for idle workers.
    pub owned: Vec<Vec<u64>>,
}

pub fn plan_ownership(forward_docs_per_worker: &[Vec<u64>]) -> Ownership {
    let mut owner_of: BTreeMap<u64, usize> = BTreeMap::new();
    for (w, docs) in forward_docs_per_worker.iter().enumerate() {
        for &d in docs {
            owner_of.entry(d).or_insert(w);
        }
    }
    let mut owned = vec![Vec::new(); forward_docs_per_worker.len()];
    for (&d, &w) in &owner_of {
        owned[w].push(d);
    }
    // BTreeMap iteration is id-ascending, so each owned list is sorted.
    Ownership { owner_of, owned }
}

/// Concatenate per-worker payloads in worker order.
pub fn all_gather<T: Clone>(per_worker: &[Vec<T>]) -> Vec<T> {
    per_worker.iter().flat_map(|v| v.iter().cloned()).collect()
}
