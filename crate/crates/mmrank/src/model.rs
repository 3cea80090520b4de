//! Whole-model assembly: one parameter store holding both token towers, the
//! two history decoders, and the ranker head, plus the per-sample feature
//! builder shared by training, evaluation, and gradient checks.

use crate::bind::BoundParams;
use crate::config::RunConfig;
use crate::data::Sample;
use crate::encoder::{self, doc_layout, query_layout};
use crate::memory_bank::MemoryBank;
use crate::ranker::{self, id_embeddings, ranker_logit};
use crate::seqmodel::{decode_sequence, init_decoder, similarity_features};
use mmrank_core::rng::{stream, stream_rng};
use mmrank_core::{NodeId, NumericsError, ParamStore, Tape, Tensor};

pub const Q_TOWER: &str = "q";
pub const D_TOWER: &str = "d";
pub const SEQ_SHORT: &str = "seq_short";
pub const SEQ_LONG: &str = "seq_long";

/// Derived widths. `other` conditions the decoders; `fused` feeds the ranker.
/// Both stay fixed across ablations so the head never changes shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub doc_max_len: usize,
    pub query_max_len: usize,
    pub id_total: usize,
    pub other: usize,
    pub sims: usize,
    pub fused: usize,
}

pub const DENSE_DIM: usize = 4;

pub fn dims(cfg: &RunConfig) -> Dims {
    let d = &cfg.data;
    let doc_max_len = encoder::doc_max_len(d.title_cap, d.ocr_cap, d.asr_cap, d.cover_ocr_cap);
    let query_max_len = encoder::query_max_len(d.query_cap);
    let id_total = cfg.ranker.user_id_dim + cfg.ranker.doc_id_dim + cfg.ranker.query_id_dim;
    let emb = cfg.encoder.output_dim;
    let other = id_total + 2 * emb + DENSE_DIM;
    let sims = 2 * cfg.seq.short_len;
    let fused = id_total + 2 * emb + 2 * emb + sims + DENSE_DIM;
    Dims {
        doc_max_len,
        query_max_len,
        id_total,
        other,
        sims,
        fused,
    }
}

/// Build the full parameter store. Insertion order is part of the model
/// identity: gradient buffers, Adam state, and checkpoints all key off it.
pub fn init_model(cfg: &RunConfig) -> ParamStore {
    let dims = dims(cfg);
    let mut store = ParamStore::new();
    let mut rng = stream_rng(cfg.seed, stream::PARAM_INIT, 0);
    let vocab = cfg.data.vocab_size;
    encoder::init_tower(
        &mut store,
        &mut rng,
        &cfg.encoder,
        Q_TOWER,
        cfg.encoder.query_layers,
        vocab,
        dims.query_max_len,
    );
    encoder::init_tower(
        &mut store,
        &mut rng,
        &cfg.encoder,
        D_TOWER,
        cfg.encoder.doc_layers,
        vocab,
        dims.doc_max_len,
    );
    init_decoder(
        &mut store,
        &mut rng,
        SEQ_SHORT,
        cfg.seq.layers,
        dims.other,
        cfg.encoder.output_dim,
        cfg.seq.ffn_mult,
    );
    init_decoder(
        &mut store,
        &mut rng,
        SEQ_LONG,
        cfg.seq.layers,
        dims.other,
        cfg.encoder.output_dim,
        cfg.seq.ffn_mult,
    );
    ranker::init_ranker(
        &mut store,
        &mut rng,
        &cfg.ranker,
        dims.fused,
        cfg.data.n_users,
        cfg.data.n_docs,
    );
    store
}

pub fn encode_query(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &RunConfig,
    query: &[u32],
) -> Result<NodeId, NumericsError> {
    let layout = query_layout(cfg.data.vocab_size, query);
    encoder::encode_sequence(
        tape,
        bound,
        &cfg.encoder,
        Q_TOWER,
        cfg.encoder.query_layers,
        &layout,
    )
}

pub fn encode_doc(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &RunConfig,
    title: &[u32],
    ocr: &[u32],
    asr: &[u32],
    cover_ocr: &[u32],
) -> Result<NodeId, NumericsError> {
    let layout = doc_layout(cfg.data.vocab_size, title, ocr, asr, cover_ocr);
    encoder::encode_sequence(
        tape,
        bound,
        &cfg.encoder,
        D_TOWER,
        cfg.encoder.doc_layers,
        &layout,
    )
}

fn zeros(tape: &mut Tape, n: usize) -> NodeId {
    tape.constant(Tensor::zeros(vec![n]))
}

fn bank_keys(tape: &mut Tape, bank: &MemoryBank, ids: &[u64], dim: usize) -> (Option<NodeId>, Vec<bool>, f64) {
    let fetch = bank.get_sequence(ids, dim);
    let coverage = fetch.coverage();
    if fetch.embeddings.is_empty() {
        return (None, Vec::new(), coverage);
    }
    let n = fetch.embeddings.len();
    let flat: Vec<f64> = fetch.embeddings.into_iter().flatten().collect();
    let keys = tape.constant(Tensor::new(vec![n, dim], flat));
    (Some(keys), fetch.present, coverage)
}

/// Everything the ranker consumes for one sample, plus the bank coverage
/// observed while assembling it.
pub struct AssembledSample {
    pub fused: NodeId,
    pub coverage_short: f64,
    pub coverage_long: f64,
}

/// Fuse one sample's features. `q_emb`/`d_emb` are supplied by the caller
/// (fresh nodes, gradient-carrying input leaves, or plain constants), which
/// is how stop-gradient and the bank-serving path stay out of this function.
/// Ablations swap disabled components for zero blocks of the same width.
pub fn assemble_features(
    tape: &mut Tape,
    bound: &mut BoundParams,
    cfg: &RunConfig,
    dims: &Dims,
    sample: &Sample,
    q_emb: NodeId,
    d_emb: NodeId,
    bank: &MemoryBank,
) -> Result<AssembledSample, NumericsError> {
    let emb = cfg.encoder.output_dim;
    let ab = &cfg.ablate;
    let (u_id, d_id, q_id) = id_embeddings(tape, bound, &cfg.ranker, sample.uid, sample.doc_id, sample.qid);
    let dense = tape.constant(Tensor::new(vec![DENSE_DIM], sample.dense.to_vec()));

    let multimodal = !ab.id_only;
    let want_short = multimodal && !ab.no_short_seq;
    let want_long = multimodal && !ab.no_long_seq;
    let want_sims = multimodal && !ab.no_cosine_sim;

    let short_ids: &[u64] = &sample.history[..sample.history.len().min(cfg.seq.short_len)];
    let long_ids: &[u64] = &sample.history[..sample.history.len().min(cfg.seq.long_len)];

    let other = if want_short || want_long {
        Some(tape.concat_vec(&[u_id, q_id, d_id, q_emb, d_emb, dense]))
    } else {
        None
    };

    let mut coverage_short = 1.0;
    let mut coverage_long = 1.0;

    let seq_short = if want_short {
        let (keys, mask, cov) = bank_keys(tape, bank, short_ids, emb);
        coverage_short = cov;
        decode_sequence(tape, bound, SEQ_SHORT, cfg.seq.layers, other.unwrap(), keys, &mask)?
    } else {
        zeros(tape, emb)
    };
    let seq_long = if want_long {
        let (keys, mask, cov) = bank_keys(tape, bank, long_ids, emb);
        coverage_long = cov;
        decode_sequence(tape, bound, SEQ_LONG, cfg.seq.layers, other.unwrap(), keys, &mask)?
    } else {
        zeros(tape, emb)
    };
    let sims = if want_sims {
        let (keys, mask, _) = bank_keys(tape, bank, short_ids, emb);
        similarity_features(tape, q_emb, keys, &mask, cfg.seq.short_len)?
    } else {
        zeros(tape, dims.sims)
    };

    let fused = tape.concat_vec(&[u_id, d_id, q_id, q_emb, d_emb, seq_short, seq_long, sims, dense]);
    debug_assert_eq!(tape.value(fused).len(), dims.fused);
    Ok(AssembledSample {
        fused,
        coverage_short,
        coverage_long,
    })
}

/// Fused features through the head to the clamped logit.
pub fn score(tape: &mut Tape, bound: &mut BoundParams, cfg: &RunConfig, fused: NodeId) -> NodeId {
    ranker_logit(tape, bound, &cfg.ranker, fused)
}
