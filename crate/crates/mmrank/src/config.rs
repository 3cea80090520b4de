//! Run configuration.
//!
//! One serializable tree fixes every knob of a run: corpus shape, tower
//! geometry, contrastive settings, bank limits, sequence model, ranker head,
//! and the training schedule. `validate` rejects inconsistent combinations
//! with the offending field named, and `fingerprint` hashes the whole tree so
//! checkpoints can refuse to resume under a different configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

/// Synthetic corpus shape. `Default` keeps the production token caps; the
/// desk profile in [`RunConfig::default`] shrinks them so a full run fits in
/// a test budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub vocab_size: usize,
    pub n_topics: usize,
    pub n_users: usize,
    pub n_docs: usize,
    pub n_query_concepts: usize,
    pub n_sessions: usize,
    pub docs_per_session: usize,
    /// Most recent positively-engaged doc ids kept per sample.
    pub history_cap: usize,
    pub query_cap: usize,
    pub title_cap: usize,
    pub ocr_cap: usize,
    pub asr_cap: usize,
    pub cover_ocr_cap: usize,
    pub zipf_exponent: f64,
    /// Probability that a planted label is flipped.
    pub label_noise: f64,
    /// Trailing fraction of sessions held out for eval.
    pub eval_fraction: f64,
    pub w_query_match: f64,
    pub w_user_match: f64,
    pub base_bias: f64,
    pub user_bias_range: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            n_topics: 16,
            n_users: 64,
            n_docs: 512,
            n_query_concepts: 96,
            n_sessions: 1200,
            docs_per_session: 8,
            history_cap: 64,
            query_cap: 10,
            title_cap: 31,
            ocr_cap: 124,
            asr_cap: 12,
            cover_ocr_cap: 12,
            zipf_exponent: 1.1,
            label_noise: 0.02,
            eval_fraction: 0.1,
            w_query_match: 2.4,
            w_user_match: 1.4,
            base_bias: -1.1,
            user_bias_range: 0.35,
        }
    }
}

fn desk_data() -> SyntheticConfig {
    SyntheticConfig {
        query_cap: 6,
        title_cap: 6,
        ocr_cap: 8,
        asr_cap: 3,
        cover_ocr_cap: 3,
        ..SyntheticConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    pub model_dim: usize,
    pub num_heads: usize,
    pub query_layers: usize,
    pub doc_layers: usize,
    /// Width of the cls projection shared by both towers.
    pub output_dim: usize,
    pub ffn_mult: usize,
    /// Divide self-attention logits by sqrt(head_dim).
    pub scale_attention: bool,
    pub ln_eps: f64,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        Self {
            model_dim: 32,
            num_heads: 2,
            query_layers: 2,
            doc_layers: 2,
            output_dim: 32,
            ffn_mult: 4,
            scale_attention: true,
            ln_eps: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqdcStrategy {
    /// Denominator runs over in-batch positives plus the sample's own doc.
    InBatchPositives,
    /// Denominator runs over every in-batch doc.
    InBatchAll,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SqdcReduction {
    MeanPositives,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqdcSettings {
    pub temperature: f64,
    /// Weight of the contrastive term in the joint loss.
    pub lambda: f64,
    pub strategy: SqdcStrategy,
    /// Drop same-query rows from each sample's denominator.
    pub session_mask: bool,
    pub reduction: SqdcReduction,
}

impl Default for SqdcSettings {
    fn default() -> Self {
        Self {
            temperature: 50.0,
            lambda: 1.0,
            strategy: SqdcStrategy::InBatchPositives,
            session_mask: true,
            reduction: SqdcReduction::MeanPositives,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSettings {
    pub capacity: usize,
    /// Entries older than this many steps are swept out.
    pub window_steps: u64,
    /// Docs re-encoded per staleness probe.
    pub probe_size: usize,
}

impl Default for BankSettings {
    fn default() -> Self {
        Self {
            capacity: 8192,
            window_steps: 100_000,
            probe_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceSettings {
    pub short_len: usize,
    pub long_len: usize,
    /// Cross-attention blocks per stack.
    pub layers: usize,
    pub ffn_mult: usize,
}

impl Default for SequenceSettings {
    fn default() -> Self {
        Self {
            short_len: 8,
            long_len: 64,
            layers: 2,
            ffn_mult: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankerSettings {
    pub user_id_dim: usize,
    pub doc_id_dim: usize,
    pub query_id_dim: usize,
    /// Query ids are unbounded, so they hash into this many buckets.
    pub qid_buckets: usize,
    pub hidden: Vec<usize>,
    pub logit_clamp: f64,
}

impl Default for RankerSettings {
    fn default() -> Self {
        Self {
            user_id_dim: 16,
            doc_id_dim: 16,
            query_id_dim: 16,
            qid_buckets: 512,
            hidden: vec![64, 32],
            logit_clamp: 30.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub workers: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<u64>,
    /// Percent of each batch whose towers run a fresh forward pass.
    pub p_forward_pct: f64,
    /// Percent of each batch whose towers also receive gradient.
    pub q_backward_pct: f64,
    pub lr: f64,
    /// Linear decay target as a fraction of `lr`, reached after
    /// `epochs` worth of steps. 1.0 keeps the rate constant.
    pub lr_final_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub report_every: u64,
    /// Score the holdout at every report step, not just after the run.
    /// Costs a full eval pass per report.
    pub eval_on_report: bool,
    /// Re-run each step without dedup and compare logits.
    pub verify_dedup: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch_size: 64,
            workers: 2,
            epochs: 3,
            max_steps: None,
            p_forward_pct: 100.0,
            q_backward_pct: 100.0,
            lr: 1e-3,
            lr_final_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            report_every: 50,
            eval_on_report: false,
            verify_dedup: false,
        }
    }
}

/// Component switch-offs. Each one zeroes the component's contribution while
/// keeping the fused feature layout fixed, so ranker shapes never change.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Zero all content inputs; towers are never invoked.
    pub id_only: bool,
    /// Block ranker-loss gradient from reaching the towers.
    pub stop_gradient: bool,
    pub no_sqdc: bool,
    pub no_session_mask: bool,
    pub no_short_seq: bool,
    pub no_long_seq: bool,
    pub no_cosine_sim: bool,
}

pub const ABLATION_NAMES: [&str; 7] = [
    "id_only",
    "stop_gradient",
    "no_sqdc",
    "no_session_mask",
    "no_short_seq",
    "no_long_seq",
    "no_cosine_sim",
];

impl AblationFlags {
    pub fn apply_named(&mut self, name: &str) -> Result<(), ConfigError> {
        match name {
            "id_only" => self.id_only = true,
            "stop_gradient" => self.stop_gradient = true,
            "no_sqdc" => self.no_sqdc = true,
            "no_session_mask" => self.no_session_mask = true,
            "no_short_seq" => self.no_short_seq = true,
            "no_long_seq" => self.no_long_seq = true,
            "no_cosine_sim" => self.no_cosine_sim = true,
            other => {
                return Err(invalid(
                    "ablate",
                    format!(
                        "unknown ablation {other:?}; valid names: {}",
                        ABLATION_NAMES.join(", ")
                    ),
                ))
            }
        }
        Ok(())
    }

    pub fn active(&self) -> Vec<&'static str> {
        let flags = [
            self.id_only,
            self.stop_gradient,
            self.no_sqdc,
            self.no_session_mask,
            self.no_short_seq,
            self.no_long_seq,
            self.no_cosine_sim,
        ];
        ABLATION_NAMES
            .iter()
            .zip(flags)
            .filter(|(_, on)| *on)
            .map(|(name, _)| *name)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "desk_data")]
    pub data: SyntheticConfig,
    pub encoder: EncoderSettings,
    pub sqdc: SqdcSettings,
    pub bank: BankSettings,
    pub seq: SequenceSettings,
    pub ranker: RankerSettings,
    pub train: TrainSettings,
    pub ablate: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: desk_data(),
            encoder: EncoderSettings::default(),
            sqdc: SqdcSettings::default(),
            bank: BankSettings::default(),
            seq: SequenceSettings::default(),
            ranker: RankerSettings::default(),
            train: TrainSettings::default(),
            ablate: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    /// Production-scale geometry. Far too slow for the test budget; kept as a
    /// reference point and exercised only through `validate`.
    pub fn production_profile() -> Self {
        Self {
            data: SyntheticConfig::default(),
            encoder: EncoderSettings {
                model_dim: 128,
                num_heads: 4,
                query_layers: 2,
                doc_layers: 4,
                output_dim: 128,
                ..EncoderSettings::default()
            },
            train: TrainSettings {
                batch_size: 2048,
                workers: 8,
                p_forward_pct: 20.0,
                q_backward_pct: 10.0,
                ..TrainSettings::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex sha-256 over the canonical JSON encoding. Field order is the
    /// declaration order, so equal configs hash equal.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        for (field, v) in [
            ("data.vocab_size", d.vocab_size),
            ("data.n_topics", d.n_topics),
            ("data.n_users", d.n_users),
            ("data.n_docs", d.n_docs),
            ("data.n_query_concepts", d.n_query_concepts),
            ("data.n_sessions", d.n_sessions),
            ("data.docs_per_session", d.docs_per_session),
            ("data.history_cap", d.history_cap),
            ("data.query_cap", d.query_cap),
            ("data.title_cap", d.title_cap),
            ("data.ocr_cap", d.ocr_cap),
            ("data.asr_cap", d.asr_cap),
            ("data.cover_ocr_cap", d.cover_ocr_cap),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if d.vocab_size < d.n_topics + 1 {
            return Err(invalid(
                "data.vocab_size",
                format!(
                    "must be at least n_topics + 1 = {} to give every topic and the noise pool a token block",
                    d.n_topics + 1
                ),
            ));
        }
        if !(d.zipf_exponent > 0.0) {
            return Err(invalid("data.zipf_exponent", "must be positive"));
        }
        if !(0.0..=0.5).contains(&d.label_noise) {
            return Err(invalid("data.label_noise", "must lie in [0, 0.5]"));
        }
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            return Err(invalid("data.eval_fraction", "must lie in (0, 1)"));
        }

        let e = &self.encoder;
        for (field, v) in [
            ("encoder.model_dim", e.model_dim),
            ("encoder.num_heads", e.num_heads),
            ("encoder.query_layers", e.query_layers),
            ("encoder.doc_layers", e.doc_layers),
            ("encoder.output_dim", e.output_dim),
            ("encoder.ffn_mult", e.ffn_mult),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if e.model_dim % e.num_heads != 0 {
            return Err(invalid(
                "encoder.model_dim",
                format!("must be divisible by num_heads = {}", e.num_heads),
            ));
        }
        if !(e.ln_eps > 0.0) {
            return Err(invalid("encoder.ln_eps", "must be positive"));
        }

        if !(self.sqdc.temperature > 0.0) {
            return Err(invalid("sqdc.temperature", "must be positive"));
        }
        if !(self.sqdc.lambda >= 0.0) {
            return Err(invalid("sqdc.lambda", "must be non-negative"));
        }

        if self.bank.capacity == 0 {
            return Err(invalid("bank.capacity", "must be positive"));
        }
        if self.bank.window_steps == 0 {
            return Err(invalid("bank.window_steps", "must be positive"));
        }
        if self.bank.probe_size == 0 {
            return Err(invalid("bank.probe_size", "must be positive"));
        }

        let s = &self.seq;
        for (field, v) in [
            ("seq.short_len", s.short_len),
            ("seq.long_len", s.long_len),
            ("seq.layers", s.layers),
            ("seq.ffn_mult", s.ffn_mult),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if s.long_len < s.short_len {
            return Err(invalid("seq.long_len", "must be at least seq.short_len"));
        }
        if d.history_cap < s.long_len {
            return Err(invalid(
                "data.history_cap",
                format!("must cover seq.long_len = {}", s.long_len),
            ));
        }

        let r = &self.ranker;
        for (field, v) in [
            ("ranker.user_id_dim", r.user_id_dim),
            ("ranker.doc_id_dim", r.doc_id_dim),
            ("ranker.query_id_dim", r.query_id_dim),
            ("ranker.qid_buckets", r.qid_buckets),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if r.hidden.is_empty() || r.hidden.contains(&0) {
            return Err(invalid(
                "ranker.hidden",
                "must list at least one positive layer width",
            ));
        }
        if !(r.logit_clamp > 0.0) {
            return Err(invalid("ranker.logit_clamp", "must be positive"));
        }

        let t = &self.train;
        if t.batch_size == 0 {
            return Err(invalid("train.batch_size", "must be positive"));
        }
        if t.workers == 0 {
            return Err(invalid("train.workers", "must be positive"));
        }
        if t.batch_size % t.workers != 0 {
            return Err(invalid(
                "train.batch_size",
                format!("must be divisible by workers = {}", t.workers),
            ));
        }
        if t.epochs == 0 && t.max_steps.is_none() {
            return Err(invalid(
                "train.epochs",
                "must be positive unless max_steps is set",
            ));
        }
        if !(t.p_forward_pct > 0.0 && t.p_forward_pct <= 100.0) {
            return Err(invalid("train.p_forward_pct", "must lie in (0, 100]"));
        }
        if !(0.0..=100.0).contains(&t.q_backward_pct) {
            return Err(invalid("train.q_backward_pct", "must lie in [0, 100]"));
        }
        if t.q_backward_pct > t.p_forward_pct {
            return Err(invalid(
                "train.q_backward_pct",
                "must not exceed train.p_forward_pct; gradient requires a fresh forward",
            ));
        }
        if !(t.lr > 0.0) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if !(t.lr_final_frac > 0.0 && t.lr_final_frac <= 1.0) {
            return Err(invalid("train.lr_final_frac", "must lie in (0, 1]"));
        }
        for (field, b) in [("train.beta1", t.beta1), ("train.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(field, "must lie in [0, 1)"));
            }
        }
        if !(t.adam_eps > 0.0) {
            return Err(invalid("train.adam_eps", "must be positive"));
        }
        if t.report_every == 0 {
            return Err(invalid("train.report_every", "must be positive"));
        }
        Ok(())
    }
}
