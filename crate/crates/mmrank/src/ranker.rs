//! CTR ranker head: id embeddings, the fused-feature MLP, and the
//! cross-entropy loss in logit form.
//!
//! User and doc ids index their tables directly; query ids are unbounded
//! across corpora, so they hash into a fixed bucket count. The logit is
//! clamped before the loss, which keeps eval scores and gradients bounded
//! no matter how confident the head gets.

use crate::bind::BoundParams;
use crate::config::RankerSettings;
use mmrank_core::params::xavier_uniform;
use mmrank_core::rng::hash64;
use mmrank_core::{NodeId, ParamStore, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

pub fn qid_bucket(qid: u64, buckets: usize) -> usize {
    (hash64(qid) % buckets as u64) as usize
}

pub fn init_ranker(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &RankerSettings,
    fused_dim: usize,
    n_users: usize,
    n_docs: usize,
) {
    store.insert(
        "rank.user",
        mmrank_core::params::uniform(rng, -0.1, 0.1, vec![n_users, cfg.user_id_dim]),
    );
    store.insert(
        "rank.doc",
        mmrank_core::params::uniform(rng, -0.1, 0.1, vec![n_docs, cfg.doc_id_dim]),
    );
    store.insert(
        "rank.qid",
        mmrank_core::params::uniform(rng, -0.1, 0.1, vec![cfg.qid_buckets, cfg.query_id_dim]),
    );
    let mut prev = fused_dim;
    for (i, &width) in cfg.hidden.iter().enumerate() {
        store.insert(
            &format!("rank.h{i}.w"),
            xavier_uniform(rng, prev, width, vec![prev, width]),
        );
        store.insert(&format!("rank.h{i}.b"), Tensor::zeros(vec![width]));
        prev = width;
    }
    store.insert("rank.out.w", xavier_uniform(rng, prev, 1, vec![prev, 1]));
    store.insert("rank.out.b", Tensor::zeros(vec![1]));
}

/// Embedding vectors for (user, doc, hashed qid).
pub fn id_embeddings(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &RankerSettings,
    uid: u64,
    doc_id: u64,
    qid: u64,
) -> (NodeId, NodeId, NodeId) {
    let mut one = |name: &str, row: usize| {
        let table = bound.node(tape, name);
        let e = tape.embed_rows(table, &[row]);
        tape.row_slice(e, 0)
    };
    let u = one("rank.user", uid as usize);
    let d = one("rank.doc", doc_id as usize);
    let q = one("rank.qid", qid_bucket(qid, cfg.qid_buckets));
    (u, d, q)
}

/// Fused features through the MLP to a clamped scalar logit.
pub fn ranker_logit(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &RankerSettings,
    fused: NodeId,
) -> NodeId {
    let mut x = fused;
    for i in 0..cfg.hidden.len() {
        let w = bound.node(tape, &format!("rank.h{i}.w"));
        let b = bound.node(tape, &format!("rank.h{i}.b"));
        let h = tape.tmatvec(w, x);
        let h = tape.add(h, b);
        x = tape.gelu(h);
    }
    let w = bound.node(tape, "rank.out.w");
    let b = bound.node(tape, "rank.out.b");
    let z = tape.tmatvec(w, x);
    let z = tape.add(z, b);
    tape.clamp(z, -cfg.logit_clamp, cfg.logit_clamp)
}

/// Binary cross-entropy from the logit: softplus(z) - y*z. The softplus runs
/// through exp/ln directly; with clamped logits nothing overflows and the
/// gradient is sigma(z) - y without a cancellation-prone 1-p.
pub fn bce_with_logit(tape: &mut Tape, logit: NodeId, label: u8) -> NodeId {
    assert!(label <= 1, "label must be 0 or 1");
    assert_eq!(tape.value(logit).len(), 1, "logit must be scalar");
    let e = tape.exp(logit);
    let e1 = tape.offset(e, 1.0);
    let softplus = tape.ln(e1);
    if label == 0 {
        softplus
    } else {
        tape.sub(softplus, logit)
    }
}
