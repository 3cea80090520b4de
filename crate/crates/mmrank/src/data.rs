//! Synthetic engagement corpus with planted topic structure.
//!
//! The vocabulary is partitioned into per-topic token blocks plus a shared
//! noise block. Docs own one or two topics and draw their title/ocr/asr/cover
//! tokens mostly from those blocks; queries voice a single concept topic;
//! users prefer a couple of topics. Engagement labels are Bernoulli draws on
//! a planted affinity logit, so a model that reads the raw tokens can beat
//! any id-memorization baseline and tests can probe the ceiling directly.
//!
//! Sessions are the unit of everything downstream: one query issued by one
//! user over `docs_per_session` impressions, with a unique query id and a
//! timestamp equal to the session index. Histories contain only positively
//! engaged doc ids from strictly earlier sessions, newest first.

use crate::config::SyntheticConfig;
use mmrank_core::rng::{stream, stream_rng};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{self, BufRead, Write};

pub type Token = u32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub uid: u64,
    pub qid: u64,
    pub ts: u64,
    pub query: Vec<Token>,
    pub doc_id: u64,
    pub title: Vec<Token>,
    pub ocr: Vec<Token>,
    pub asr: Vec<Token>,
    pub cover_ocr: Vec<Token>,
    /// Positively engaged doc ids from earlier sessions, newest first.
    pub history: Vec<u64>,
    pub label: u8,
    pub reformulated: bool,
    /// Derived, not exported: recomputed by [`annotate_dense`].
    #[serde(skip)]
    pub dense: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub samples: Vec<Sample>,
}

/// Planted generator state, kept for diagnostics and tests. Absent on
/// imported corpora.
#[derive(Clone, Debug)]
pub struct CorpusMeta {
    pub doc_topics: Vec<Vec<usize>>,
    pub user_topics: Vec<Vec<usize>>,
    pub user_bias: Vec<f64>,
    pub concept_topic: Vec<usize>,
    pub session_concept: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub sessions: Vec<Session>,
    pub meta: Option<CorpusMeta>,
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.iter().filter(|x| b.contains(x)).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Query-doc topic match is crisp: the doc either carries the query's topic
/// or it does not. User-doc match stays graded via jaccard.
fn affinity_logit(
    cfg: &SyntheticConfig,
    doc_topics: &[usize],
    query_topic: usize,
    user_topics: &[usize],
    user_bias: f64,
) -> f64 {
    let q_match = f64::from(doc_topics.contains(&query_topic));
    cfg.w_query_match * q_match
        + cfg.w_user_match * jaccard(doc_topics, user_topics)
        + user_bias
        + cfg.base_bias
}

impl CorpusMeta {
    /// The affinity logit the labels were drawn from. The probe for corpus
    /// learnability scores samples with exactly this.
    pub fn planted_logit(&self, cfg: &SyntheticConfig, sample: &Sample, session_idx: usize) -> f64 {
        let concept = self.session_concept[session_idx];
        affinity_logit(
            cfg,
            &self.doc_topics[sample.doc_id as usize],
            self.concept_topic[concept],
            &self.user_topics[sample.uid as usize],
            self.user_bias[sample.uid as usize],
        )
    }
}

/// Cumulative-weight sampler; `zipf` ranks item i at weight (i+1)^-exponent.
struct WeightedCum {
    cum: Vec<f64>,
}

impl WeightedCum {
    fn from_weights(weights: impl Iterator<Item = f64>) -> Self {
        let mut cum = Vec::new();
        let mut total = 0.0;
        for w in weights {
            total += w;
            cum.push(total);
        }
        assert!(!cum.is_empty() && *cum.last().unwrap() > 0.0);
        Self { cum }
    }

    fn zipf(n: usize, exponent: f64) -> Self {
        Self::from_weights((0..n).map(|i| ((i + 1) as f64).powf(-exponent)))
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cum.last().unwrap();
        let u = rng.gen::<f64>() * total;
        self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1)
    }
}

struct Vocab {
    block: usize,
    n_topics: usize,
    vocab_size: usize,
}

impl Vocab {
    fn new(cfg: &SyntheticConfig) -> Self {
        Self {
            block: cfg.vocab_size / (cfg.n_topics + 1),
            n_topics: cfg.n_topics,
            vocab_size: cfg.vocab_size,
        }
    }

    fn topic_token(&self, topic: usize, rng: &mut ChaCha8Rng) -> Token {
        (topic * self.block + rng.gen_range(0..self.block)) as Token
    }

    fn noise_token(&self, rng: &mut ChaCha8Rng) -> Token {
        rng.gen_range(self.n_topics * self.block..self.vocab_size) as Token
    }
}

fn draw_feature(
    rng: &mut ChaCha8Rng,
    vocab: &Vocab,
    topics: &[usize],
    min_len: usize,
    cap: usize,
    topic_frac: f64,
) -> Vec<Token> {
    let len = rng.gen_range(min_len..=cap);
    (0..len)
        .map(|_| {
            if !topics.is_empty() && rng.gen_bool(topic_frac) {
                let t = topics[rng.gen_range(0..topics.len())];
                vocab.topic_token(t, rng)
            } else {
                vocab.noise_token(rng)
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct DocRecord {
    title: Vec<Token>,
    ocr: Vec<Token>,
    asr: Vec<Token>,
    cover_ocr: Vec<Token>,
}

pub fn generate_corpus(cfg: &SyntheticConfig, seed: u64) -> Corpus {
    let mut rng = stream_rng(seed, stream::CORPUS, 0);
    let vocab = Vocab::new(cfg);

    let mut doc_topics: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_docs);
    let mut docs: Vec<DocRecord> = Vec::with_capacity(cfg.n_docs);
    for _ in 0..cfg.n_docs {
        let k = if rng.gen_bool(0.5) { 1 } else { 2 }.min(cfg.n_topics);
        let mut topics = Vec::with_capacity(k);
        while topics.len() < k {
            let t = rng.gen_range(0..cfg.n_topics);
            if !topics.contains(&t) {
                topics.push(t);
            }
        }
        docs.push(DocRecord {
            title: draw_feature(&mut rng, &vocab, &topics, 1, cfg.title_cap, 0.8),
            ocr: draw_feature(&mut rng, &vocab, &topics, 0, cfg.ocr_cap, 0.8),
            asr: draw_feature(&mut rng, &vocab, &topics, 0, cfg.asr_cap, 0.8),
            cover_ocr: draw_feature(&mut rng, &vocab, &topics, 0, cfg.cover_ocr_cap, 0.8),
        });
        doc_topics.push(topics);
    }

    let concept_topic: Vec<usize> = (0..cfg.n_query_concepts)
        .map(|_| rng.gen_range(0..cfg.n_topics))
        .collect();

    let mut user_topics: Vec<Vec<usize>> = Vec::with_capacity(cfg.n_users);
    let mut user_bias: Vec<f64> = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let k = 2.min(cfg.n_topics);
        let mut topics = Vec::with_capacity(k);
        while topics.len() < k {
            let t = rng.gen_range(0..cfg.n_topics);
            if !topics.contains(&t) {
                topics.push(t);
            }
        }
        user_topics.push(topics);
        user_bias.push(if cfg.user_bias_range > 0.0 {
            rng.gen_range(-cfg.user_bias_range..cfg.user_bias_range)
        } else {
            0.0
        });
    }

    // Popularity: doc index doubles as popularity rank.
    let global_docs = WeightedCum::zipf(cfg.n_docs, cfg.zipf_exponent);
    let mut topic_docs: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_topics];
    for (d, topics) in doc_topics.iter().enumerate() {
        for &t in topics {
            topic_docs[t].push(d);
        }
    }
    let topic_doc_tables: Vec<Option<WeightedCum>> = topic_docs
        .iter()
        .map(|pool| {
            (!pool.is_empty()).then(|| {
                WeightedCum::from_weights(
                    pool.iter().map(|&d| ((d + 1) as f64).powf(-cfg.zipf_exponent)),
                )
            })
        })
        .collect();
    let mut topic_concepts: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_topics];
    for (c, &t) in concept_topic.iter().enumerate() {
        topic_concepts[t].push(c);
    }

    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    let mut session_concept = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let uid = rng.gen_range(0..cfg.n_users);
        let concept = if rng.gen_bool(0.6) {
            let pref = &user_topics[uid];
            let t = pref[rng.gen_range(0..pref.len())];
            if topic_concepts[t].is_empty() {
                rng.gen_range(0..cfg.n_query_concepts)
            } else {
                topic_concepts[t][rng.gen_range(0..topic_concepts[t].len())]
            }
        } else {
            rng.gen_range(0..cfg.n_query_concepts)
        };
        session_concept.push(concept);
        let qtopic = [concept_topic[concept]];
        let query = draw_feature(&mut rng, &vocab, &qtopic, 1, cfg.query_cap, 0.85);

        let mut samples = Vec::with_capacity(cfg.docs_per_session);
        for _ in 0..cfg.docs_per_session {
            let doc = if rng.gen_bool(0.65) {
                match &topic_doc_tables[qtopic[0]] {
                    Some(table) => topic_docs[qtopic[0]][table.sample(&mut rng)],
                    None => global_docs.sample(&mut rng),
                }
            } else {
                global_docs.sample(&mut rng)
            };
            let logit = affinity_logit(
                cfg,
                &doc_topics[doc],
                qtopic[0],
                &user_topics[uid],
                user_bias[uid],
            );
            let mut label = u8::from(rng.gen_bool(sigmoid(logit)));
            if cfg.label_noise > 0.0 && rng.gen_bool(cfg.label_noise) {
                label ^= 1;
            }
            let rec = &docs[doc];
            samples.push(Sample {
                uid: uid as u64,
                qid: s as u64,
                ts: s as u64,
                query: query.clone(),
                doc_id: doc as u64,
                title: rec.title.clone(),
                ocr: rec.ocr.clone(),
                asr: rec.asr.clone(),
                cover_ocr: rec.cover_ocr.clone(),
                history: Vec::new(),
                label,
                reformulated: false,
                dense: [0.0; 4],
            });
        }
        let has_positive = samples.iter().any(|s| s.label == 1);
        let reform = rng.gen_bool(if has_positive { 0.1 } else { 0.7 });
        for smp in &mut samples {
            smp.reformulated = reform;
        }
        sessions.push(Session { samples });
    }

    let mut corpus = Corpus {
        sessions,
        meta: Some(CorpusMeta {
            doc_topics,
            user_topics,
            user_bias,
            concept_topic,
            session_concept,
        }),
    };
    attach_history(&mut corpus, cfg.history_cap);
    annotate_dense(&mut corpus);
    corpus
}

/// Fill each sample's history with the user's positively engaged doc ids
/// from strictly earlier sessions, newest first. Same-session positives are
/// invisible to the whole session.
fn attach_history(corpus: &mut Corpus, cap: usize) {
    let mut timelines: HashMap<u64, Vec<u64>> = HashMap::new();
    for session in &mut corpus.sessions {
        let uid = session.samples[0].uid;
        let hist: Vec<u64> = timelines
            .get(&uid)
            .map(|tl| tl.iter().rev().take(cap).copied().collect())
            .unwrap_or_default();
        for s in &mut session.samples {
            s.history = hist.clone();
        }
        let tl = timelines.entry(uid).or_default();
        for s in &session.samples {
            if s.label == 1 {
                tl.push(s.doc_id);
            }
        }
    }
}

/// Recompute the derived dense features from the corpus itself: log counts
/// of the user's and doc's earlier impressions, query length, and position
/// in session. Deterministic, so imported corpora end up bit-identical to
/// the generator's output.
pub fn annotate_dense(corpus: &mut Corpus) {
    let mut user_seen: HashMap<u64, u64> = HashMap::new();
    let mut doc_seen: HashMap<u64, u64> = HashMap::new();
    for session in &mut corpus.sessions {
        let n = session.samples.len() as f64;
        for (i, s) in session.samples.iter_mut().enumerate() {
            s.dense = [
                (1.0 + *user_seen.get(&s.uid).unwrap_or(&0) as f64).ln(),
                (1.0 + *doc_seen.get(&s.doc_id).unwrap_or(&0) as f64).ln(),
                s.query.len() as f64 / 10.0,
                i as f64 / n,
            ];
        }
        for s in &session.samples {
            *user_seen.entry(s.uid).or_insert(0) += 1;
            *doc_seen.entry(s.doc_id).or_insert(0) += 1;
        }
    }
}

/// Number of leading sessions used for training; the rest are the temporal
/// holdout.
pub fn split_index(n_sessions: usize, eval_fraction: f64) -> usize {
    (((n_sessions as f64) * (1.0 - eval_fraction)).floor() as usize)
        .max(1)
        .min(n_sessions)
}

/// Indices into a session slice: (session, sample) pairs.
#[derive(Clone, Debug)]
pub struct BatchRef {
    pub items: Vec<(usize, usize)>,
}

/// Session-contiguous fixed-size batches. The trailing partial batch is
/// dropped so worker shards stay equal.
pub fn make_batches(sessions: &[Session], batch_size: usize) -> Vec<BatchRef> {
    let flat: Vec<(usize, usize)> = sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| (0..s.samples.len()).map(move |i| (si, i)))
        .collect();
    flat.chunks_exact(batch_size)
        .map(|c| BatchRef { items: c.to_vec() })
        .collect()
}

pub fn export_jsonl<W: Write>(corpus: &Corpus, mut w: W) -> io::Result<()> {
    for session in &corpus.sessions {
        for sample in &session.samples {
            serde_json::to_writer(&mut w, sample)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Rebuild a corpus from its JSONL export. Sessions are runs of equal qid;
/// dense features are recomputed. The planted meta does not survive export.
pub fn import_jsonl<R: BufRead>(r: R) -> Result<Corpus, DataError> {
    let mut sessions: Vec<Session> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        match sessions.last_mut() {
            Some(last) if last.samples[0].qid == sample.qid => last.samples.push(sample),
            _ => sessions.push(Session {
                samples: vec![sample],
            }),
        }
    }
    let mut corpus = Corpus {
        sessions,
        meta: None,
    };
    annotate_dense(&mut corpus);
    Ok(corpus)
}
