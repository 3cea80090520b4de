//! Session-masked query-doc contrastive loss.
//!
//! Every positive sample pulls its query embedding toward its own doc and
//! pushes it away from the other docs in the denominator set: in-batch
//! positives (plus itself) or the whole batch, depending on strategy. Rows
//! from the same session are dropped from other samples' denominators, since
//! docs co-engaged under one query are not negatives for it. A sample is
//! always in its own denominator, so an isolated positive contributes
//! exactly zero loss rather than an undefined one.

use crate::config::{SqdcReduction, SqdcSettings, SqdcStrategy};
use mmrank_core::error::NumericsError;
use mmrank_core::{NodeId, Tape};

/// Whether doc j may appear in sample i's denominator under the mask.
pub fn session_mask_allows(qids: &[u64], i: usize, j: usize) -> bool {
    i == j || qids[i] != qids[j]
}

fn checked_norm(tape: &mut Tape, x: NodeId) -> Result<NodeId, NumericsError> {
    let sq = tape.dot(x, x);
    let v = tape.value(sq).item();
    if v == 0.0 {
        return Err(NumericsError::ZeroNorm { norm: 0.0 });
    }
    Ok(tape.sqrt(sq))
}

/// Build the loss on the tape. `None` when the batch has no positive, which
/// is exactly a zero loss with no graph behind it.
pub fn sqdc_loss(
    tape: &mut Tape,
    cfg: &SqdcSettings,
    q: &[NodeId],
    d: &[NodeId],
    qids: &[u64],
    labels: &[u8],
) -> Result<Option<NodeId>, NumericsError> {
    let b = q.len();
    assert_eq!(d.len(), b);
    assert_eq!(qids.len(), b);
    assert_eq!(labels.len(), b);
    let positives: Vec<usize> = (0..b).filter(|&i| labels[i] == 1).collect();
    if positives.is_empty() {
        return Ok(None);
    }

    let candidates: Vec<usize> = match cfg.strategy {
        SqdcStrategy::InBatchPositives => positives.clone(),
        SqdcStrategy::InBatchAll => (0..b).collect(),
    };
    let mut nq = vec![None; b];
    for &i in &positives {
        nq[i] = Some(checked_norm(tape, q[i])?);
    }
    let mut nd = vec![None; b];
    for &j in &candidates {
        nd[j] = Some(checked_norm(tape, d[j])?);
    }

    let mut losses = Vec::with_capacity(positives.len());
    for &i in &positives {
        let denom: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&j| !cfg.session_mask || session_mask_allows(qids, i, j))
            .collect();
        let k = denom
            .iter()
            .position(|&j| j == i)
            .expect("sample is always in its own denominator");
        let logits: Vec<NodeId> = denom
            .iter()
            .map(|&j| {
                let num = tape.dot(q[i], d[j]);
                let nn = tape.mul(nq[i].unwrap(), nd[j].unwrap());
                let cos = tape.div(num, nn);
                tape.scale(cos, cfg.temperature)
            })
            .collect();
        let lv = tape.concat_vec(&logits);
        let p = tape.softmax(lv)?;
        let pk = tape.slice_vec(p, k, 1);
        let lnp = tape.ln(pk);
        losses.push(tape.neg(lnp));
    }
    let cat = tape.concat_vec(&losses);
    let total = tape.sum(cat);
    Ok(Some(match cfg.reduction {
        SqdcReduction::Sum => total,
        SqdcReduction::MeanPositives => tape.scale(total, 1.0 / positives.len() as f64),
    }))
}
