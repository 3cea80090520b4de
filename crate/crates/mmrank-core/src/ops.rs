//! Composite tape operations shared across the pipeline.

use crate::error::NumericsError;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};

/// Single-query dot-product attention over a key/value matrix.
///
/// `query` is `[d]`, `keys` and `values` are `[n,d]`, `mask[j]` marks valid
/// rows. Weights are a masked softmax over `keys · query`, optionally scaled
/// by `scale` before the softmax. Errors when every row is masked out or
/// there are no rows at all.
pub fn dot_attention<S: Scalar>(
    tape: &mut Tape<S>,
    query: NodeId,
    keys: NodeId,
    values: NodeId,
    mask: &[bool],
    scale: Option<S>,
) -> Result<NodeId, NumericsError> {
    let n = tape.value(keys).rows();
    assert_eq!(tape.value(values).rows(), n, "keys/values row mismatch");
    assert_eq!(mask.len(), n, "mask length mismatch");
    if n == 0 {
        return Err(NumericsError::EmptySoftmax);
    }
    let mut scores = tape.matvec(keys, query);
    if let Some(c) = scale {
        scores = tape.scale(scores, c);
    }
    let weights = tape.softmax_masked(scores, mask)?;
    Ok(tape.tmatvec(values, weights))
}

/// Cosine similarity between two vectors as a scalar node.
/// Errors when either vector has zero norm.
pub fn cosine<S: Scalar>(
    tape: &mut Tape<S>,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId, NumericsError> {
    let aa = tape.dot(a, a);
    let bb = tape.dot(b, b);
    for sq in [aa, bb] {
        let v = tape.values_of(sq)[0];
        if v == S::zero() {
            return Err(NumericsError::ZeroNorm { norm: 0.0 });
        }
    }
    let na = tape.sqrt(aa);
    let nb = tape.sqrt(bb);
    let ab = tape.dot(a, b);
    let denom = tape.mul(na, nb);
    Ok(tape.div(ab, denom))
}

/// Binary cross entropy of a predicted probability against a 0/1 label.
/// The probability must lie strictly inside (0,1).
pub fn bce_from_prob<S: Scalar>(
    tape: &mut Tape<S>,
    prob: NodeId,
    label: f64,
) -> Result<NodeId, NumericsError> {
    assert_eq!(tape.value(prob).len(), 1, "bce takes a scalar probability");
    assert!(label == 0.0 || label == 1.0, "label must be 0 or 1");
    let p = tape.values_of(prob)[0].to_f64().expect("prob to f64");
    if !(p > 0.0 && p < 1.0) {
        return Err(NumericsError::ProbOutOfDomain { p });
    }
    let term = if label == 1.0 {
        tape.ln(prob)
    } else {
        let neg = tape.neg(prob);
        let one_minus = tape.offset(neg, S::one());
        tape.ln(one_minus)
    };
    Ok(tape.neg(term))
}
