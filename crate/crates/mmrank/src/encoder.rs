//! Raw-token transformer towers for queries and docs.
//!
//! A doc flattens its four content features into one sequence with a
//! separator token between consecutive features, so every doc costs exactly
//! three separators no matter which features are empty:
//!
//!   [cls] title.. [sep] ocr.. [sep] asr.. [sep] cover..
//!
//! A query is just [cls] followed by its tokens. Token, type, and position
//! embeddings are summed; type ids tell features apart. Blocks are pre-norm
//! self-attention plus a gelu FFN with residuals, a final layer norm, and a
//! learned projection of the cls row to the shared embedding width.

use crate::bind::BoundParams;
use crate::config::EncoderSettings;
use crate::data::Token;
use mmrank_core::error::NumericsError;
use mmrank_core::params::{uniform, xavier_uniform};
use mmrank_core::{NodeId, ParamStore, Tape, Tensor};
use rand_chacha::ChaCha8Rng;

pub const N_DOC_FEATURES: usize = 4;
/// Type rows: cls, one per doc feature, sep. The query tower uses cls and
/// the first feature row.
pub const TYPE_ROWS: usize = N_DOC_FEATURES + 2;
pub const TYPE_CLS: usize = 0;
pub const TYPE_SEP: usize = N_DOC_FEATURES + 1;

pub fn cls_row(vocab_size: usize) -> usize {
    vocab_size
}

pub fn sep_row(vocab_size: usize) -> usize {
    vocab_size + 1
}

/// Embedding-table rows and type ids for one flattened sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub rows: Vec<usize>,
    pub types: Vec<usize>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub fn doc_layout(
    vocab_size: usize,
    title: &[Token],
    ocr: &[Token],
    asr: &[Token],
    cover_ocr: &[Token],
) -> Layout {
    let features = [title, ocr, asr, cover_ocr];
    let n = 1 + features.iter().map(|f| f.len()).sum::<usize>() + (N_DOC_FEATURES - 1);
    let mut rows = Vec::with_capacity(n);
    let mut types = Vec::with_capacity(n);
    rows.push(cls_row(vocab_size));
    types.push(TYPE_CLS);
    for (f, feature) in features.iter().enumerate() {
        if f > 0 {
            rows.push(sep_row(vocab_size));
            types.push(TYPE_SEP);
        }
        for &t in *feature {
            debug_assert!((t as usize) < vocab_size);
            rows.push(t as usize);
            types.push(1 + f);
        }
    }
    Layout { rows, types }
}

pub fn query_layout(vocab_size: usize, query: &[Token]) -> Layout {
    let mut rows = Vec::with_capacity(1 + query.len());
    let mut types = Vec::with_capacity(1 + query.len());
    rows.push(cls_row(vocab_size));
    types.push(TYPE_CLS);
    for &t in query {
        debug_assert!((t as usize) < vocab_size);
        rows.push(t as usize);
        types.push(1);
    }
    Layout { rows, types }
}

/// Longest sequence either tower can see under these caps.
pub fn doc_max_len(title_cap: usize, ocr_cap: usize, asr_cap: usize, cover_cap: usize) -> usize {
    1 + title_cap + ocr_cap + asr_cap + cover_cap + (N_DOC_FEATURES - 1)
}

pub fn query_max_len(query_cap: usize) -> usize {
    1 + query_cap
}

pub fn init_tower(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    cfg: &EncoderSettings,
    prefix: &str,
    layers: usize,
    vocab_size: usize,
    max_len: usize,
) {
    let d = cfg.model_dim;
    let h = cfg.ffn_mult * d;
    store.insert(
        &format!("{prefix}.tok"),
        uniform(rng, -0.1, 0.1, vec![vocab_size + 2, d]),
    );
    store.insert(
        &format!("{prefix}.type"),
        uniform(rng, -0.1, 0.1, vec![TYPE_ROWS, d]),
    );
    store.insert(
        &format!("{prefix}.pos"),
        uniform(rng, -0.1, 0.1, vec![max_len, d]),
    );
    for l in 0..layers {
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert(
                &format!("{prefix}.l{l}.{w}"),
                xavier_uniform(rng, d, d, vec![d, d]),
            );
        }
        for ln in ["ln1", "ln2"] {
            store.insert(&format!("{prefix}.l{l}.{ln}.g"), Tensor::new(vec![d], vec![1.0; d]));
            store.insert(&format!("{prefix}.l{l}.{ln}.b"), Tensor::zeros(vec![d]));
        }
        store.insert(
            &format!("{prefix}.l{l}.ffn.w1"),
            xavier_uniform(rng, d, h, vec![d, h]),
        );
        store.insert(&format!("{prefix}.l{l}.ffn.b1"), Tensor::zeros(vec![h]));
        store.insert(
            &format!("{prefix}.l{l}.ffn.w2"),
            xavier_uniform(rng, h, d, vec![h, d]),
        );
        store.insert(&format!("{prefix}.l{l}.ffn.b2"), Tensor::zeros(vec![d]));
    }
    store.insert(&format!("{prefix}.out.ln.g"), Tensor::new(vec![d], vec![1.0; d]));
    store.insert(&format!("{prefix}.out.ln.b"), Tensor::zeros(vec![d]));
    store.insert(
        &format!("{prefix}.out.w"),
        xavier_uniform(rng, d, cfg.output_dim, vec![d, cfg.output_dim]),
    );
    store.insert(&format!("{prefix}.out.b"), Tensor::zeros(vec![cfg.output_dim]));
}

fn block(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &EncoderSettings,
    prefix: &str,
    l: usize,
    x: NodeId,
) -> Result<NodeId, NumericsError> {
    let n = tape.value(x).rows();
    let d = cfg.model_dim;
    let hd = d / cfg.num_heads;
    let eps = cfg.ln_eps;

    let g = bound.node(tape, &format!("{prefix}.l{l}.ln1.g"));
    let b = bound.node(tape, &format!("{prefix}.l{l}.ln1.b"));
    let h = tape.layer_norm(x, g, b, eps)?;

    let wq = bound.node(tape, &format!("{prefix}.l{l}.wq"));
    let wk = bound.node(tape, &format!("{prefix}.l{l}.wk"));
    let wv = bound.node(tape, &format!("{prefix}.l{l}.wv"));
    let q = tape.matmul(h, wq);
    let k = tape.matmul(h, wk);
    let v = tape.matmul(h, wv);
    let mask = vec![true; n];
    let mut heads = Vec::with_capacity(cfg.num_heads);
    for i in 0..cfg.num_heads {
        let qh = tape.col_slice(q, i * hd, hd);
        let kh = tape.col_slice(k, i * hd, hd);
        let vh = tape.col_slice(v, i * hd, hd);
        let mut scores = tape.matmul_tb(qh, kh);
        if cfg.scale_attention {
            scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        }
        let w = tape.row_softmax_masked(scores, &mask)?;
        heads.push(tape.matmul(w, vh));
    }
    let cat = tape.concat_cols(&heads);
    let wo = bound.node(tape, &format!("{prefix}.l{l}.wo"));
    let attn = tape.matmul(cat, wo);
    let x = tape.add(x, attn);

    let g = bound.node(tape, &format!("{prefix}.l{l}.ln2.g"));
    let b = bound.node(tape, &format!("{prefix}.l{l}.ln2.b"));
    let h = tape.layer_norm(x, g, b, eps)?;
    let w1 = bound.node(tape, &format!("{prefix}.l{l}.ffn.w1"));
    let b1 = bound.node(tape, &format!("{prefix}.l{l}.ffn.b1"));
    let w2 = bound.node(tape, &format!("{prefix}.l{l}.ffn.w2"));
    let b2 = bound.node(tape, &format!("{prefix}.l{l}.ffn.b2"));
    let pre = tape.matmul(h, w1);
    let pre = tape.add_row_broadcast(pre, b1);
    let act = tape.gelu(pre);
    let out = tape.matmul(act, w2);
    let out = tape.add_row_broadcast(out, b2);
    Ok(tape.add(x, out))
}

/// Run one tower over a laid-out sequence. Returns the projected cls
/// embedding, `[output_dim]`.
pub fn encode_sequence(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &EncoderSettings,
    prefix: &str,
    layers: usize,
    layout: &Layout,
) -> Result<NodeId, NumericsError> {
    assert!(!layout.is_empty(), "layout always holds at least cls");
    let tok = bound.node(tape, &format!("{prefix}.tok"));
    let typ = bound.node(tape, &format!("{prefix}.type"));
    let pos = bound.node(tape, &format!("{prefix}.pos"));
    let e_tok = tape.embed_rows(tok, &layout.rows);
    let e_typ = tape.embed_rows(typ, &layout.types);
    let positions: Vec<usize> = (0..layout.len()).collect();
    let e_pos = tape.embed_rows(pos, &positions);
    let sum = tape.add(e_tok, e_typ);
    let mut x = tape.add(sum, e_pos);
    for l in 0..layers {
        x = block(tape, bound, cfg, prefix, l, x)?;
    }
    let g = bound.node(tape, &format!("{prefix}.out.ln.g"));
    let b = bound.node(tape, &format!("{prefix}.out.ln.b"));
    let x = tape.layer_norm(x, g, b, cfg.ln_eps)?;
    let cls = tape.row_slice(x, 0);
    let w = bound.node(tape, &format!("{prefix}.out.w"));
    let ob = bound.node(tape, &format!("{prefix}.out.b"));
    let proj = tape.tmatvec(w, cls);
    Ok(tape.add(proj, ob))
}
