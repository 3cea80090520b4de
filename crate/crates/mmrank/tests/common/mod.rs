//! Shared fixtures for the integration suites.

use mmrank::config::{RunConfig, SyntheticConfig};

/// A run small enough for finite-difference sweeps over every parameter.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.data = SyntheticConfig {
        vocab_size: 48,
        n_topics: 3,
        n_users: 6,
        n_docs: 10,
        n_query_concepts: 4,
        n_sessions: 30,
        docs_per_session: 4,
        history_cap: 8,
        query_cap: 3,
        title_cap: 3,
        ocr_cap: 2,
        asr_cap: 2,
        cover_ocr_cap: 2,
        ..SyntheticConfig::default()
    };
    cfg.encoder.model_dim = 8;
    cfg.encoder.num_heads = 2;
    cfg.encoder.query_layers = 1;
    cfg.encoder.doc_layers = 1;
    cfg.encoder.output_dim = 6;
    cfg.encoder.ffn_mult = 2;
    cfg.seq.short_len = 2;
    cfg.seq.long_len = 4;
    cfg.seq.layers = 1;
    cfg.seq.ffn_mult = 2;
    cfg.ranker.user_id_dim = 3;
    cfg.ranker.doc_id_dim = 3;
    cfg.ranker.query_id_dim = 2;
    cfg.ranker.qid_buckets = 8;
    cfg.ranker.hidden = vec![8];
    cfg.bank.capacity = 64;
    cfg.bank.window_steps = 1_000;
    cfg.bank.probe_size = 4;
    cfg.train.batch_size = 8;
    cfg.train.workers = 2;
    cfg.train.epochs = 1;
    cfg.validate().expect("tiny config must validate");
    cfg
}
