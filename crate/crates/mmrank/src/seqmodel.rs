//! Cross-attention decoders over banked history embeddings, plus the
//! query-history similarity features.
//!
//! Each stack starts from a learned linear read of the sample's fused
//! context, then repeats: attend over the history embeddings (raw dot
//! products, unscaled, masked to bank hits) and push the context through a
//! two-layer gelu FFN. No residuals; the history rows serve as both keys and
//! values at every layer. A sample whose history is empty, or entirely
//! missing from the bank, yields the stack's learned fallback vector.
//!
//! Similarity features score the query embedding against the short history:
//! one raw cosine per slot plus the same values ranked descending, absent
//! slots pinned to a sentinel below the cosine range. Ranking is a
//! value-ordered permutation of tape nodes, so gradient flows to whichever
//! embeddings produced each ranked entry.

use crate::bind::BoundParams;
use mmrank_core::error::NumericsError;
use mmrank_core::ops::{cosine, dot_attention};
use mmrank_core::params::{uniform, xavier_uniform};
use mmrank_core::{NodeId, ParamStore, Tape};
use rand_chacha::ChaCha8Rng;

pub const SIM_SENTINEL: f64 = -2.0;

pub fn init_decoder(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    layers: usize,
    other_dim: usize,
    out_dim: usize,
    ffn_mult: usize,
) {
    let h = ffn_mult * out_dim;
    store.insert(
        &format!("{prefix}.init.w"),
        xavier_uniform(rng, other_dim, out_dim, vec![other_dim, out_dim]),
    );
    store.insert(
        &format!("{prefix}.init.b"),
        mmrank_core::Tensor::zeros(vec![out_dim]),
    );
    store.insert(
        &format!("{prefix}.empty"),
        uniform(rng, -0.1, 0.1, vec![out_dim]),
    );
    for l in 0..layers {
        store.insert(
            &format!("{prefix}.l{l}.w1"),
            xavier_uniform(rng, out_dim, h, vec![out_dim, h]),
        );
        store.insert(&format!("{prefix}.l{l}.b1"), mmrank_core::Tensor::zeros(vec![h]));
        store.insert(
            &format!("{prefix}.l{l}.w2"),
            xavier_uniform(rng, h, out_dim, vec![h, out_dim]),
        );
        store.insert(&format!("{prefix}.l{l}.b2"), mmrank_core::Tensor::zeros(vec![out_dim]));
    }
}

/// Run one decoder stack. `keys` is the `[n, dim]` history matrix (bank
/// values, so constant rows); `mask` marks bank hits. Returns the final
/// context vector, or the learned fallback when nothing is attendable.
pub fn decode_sequence(
    tape: &mut Tape,
    bound: &mut BoundParams,
    prefix: &str,
    layers: usize,
    other: NodeId,
    keys: Option<NodeId>,
    mask: &[bool],
) -> Result<NodeId, NumericsError> {
    let attendable = keys.is_some() && mask.iter().any(|&m| m);
    if !attendable {
        return Ok(bound.node(tape, &format!("{prefix}.empty")));
    }
    let keys = keys.unwrap();
    assert_eq!(tape.value(keys).rows(), mask.len(), "mask/keys mismatch");

    let w = bound.node(tape, &format!("{prefix}.init.w"));
    let b = bound.node(tape, &format!("{prefix}.init.b"));
    let proj = tape.tmatvec(w, other);
    let mut qv = tape.add(proj, b);
    for l in 0..layers {
        let ctx = dot_attention(tape, qv, keys, keys, mask, None)?;
        let w1 = bound.node(tape, &format!("{prefix}.l{l}.w1"));
        let b1 = bound.node(tape, &format!("{prefix}.l{l}.b1"));
        let w2 = bound.node(tape, &format!("{prefix}.l{l}.w2"));
        let b2 = bound.node(tape, &format!("{prefix}.l{l}.b2"));
        let h = tape.tmatvec(w1, ctx);
        let h = tape.add(h, b1);
        let h = tape.gelu(h);
        let o = tape.tmatvec(w2, h);
        qv = tape.add(o, b2);
    }
    Ok(qv)
}

/// `[2*cap]` features: per-slot cosine between the query embedding and the
/// banked history rows (sentinel where absent), then the same values sorted
/// descending. Slot order follows the history order, newest first.
pub fn similarity_features(
    tape: &mut Tape,
    q_emb: NodeId,
    keys: Option<NodeId>,
    mask: &[bool],
    cap: usize,
) -> Result<NodeId, NumericsError> {
    let mut raw: Vec<NodeId> = Vec::with_capacity(cap);
    for slot in 0..cap {
        let present = keys.is_some() && slot < mask.len() && mask[slot];
        if present {
            let row = tape.row_slice(keys.unwrap(), slot);
            raw.push(cosine(tape, q_emb, row)?);
        } else {
            raw.push(tape.constant(mmrank_core::Tensor::scalar(SIM_SENTINEL)));
        }
    }
    let mut order: Vec<usize> = (0..cap).collect();
    // Descending by value; slot index breaks ties so the permutation is
    // deterministic.
    order.sort_by(|&a, &b| {
        let va = tape.value(raw[a]).item();
        let vb = tape.value(raw[b]).item();
        vb.partial_cmp(&va).unwrap().then(a.cmp(&b))
    });
    let ranked: Vec<NodeId> = order.iter().map(|&i| raw[i]).collect();
    let mut parts = raw;
    parts.extend(ranked);
    Ok(tape.concat_vec(&parts))
}
