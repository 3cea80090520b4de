//! Joint training loop over the simulated worker group.
//!
//! Each step runs three phases:
//!   A. every worker encodes the unique docs it owns plus its shard's unique
//!      queries, each worker on its own tape;
//!   B. embeddings cross tapes as plain values. Workers score their shard
//!      against leaf copies of those values, and one shared tape computes the
//!      contrastive loss over the gathered embeddings;
//!   C. consumer-tape backward passes yield cotangents for the embedding
//!      leaves, summed per doc and per (worker, query) and injected as seeds
//!      into the phase-A backward sweeps.
//!
//! Gradients from every tape accumulate into one buffer and Adam applies a
//! single update, so the group behaves like one synchronous step. Fresh doc
//! embeddings are written to the memory bank between phases A and B; history
//! reads therefore see this step's values, and samples outside the forward
//! set are served from the bank instead of the encoder.

use crate::bind::BoundParams;
use crate::config::RunConfig;
use crate::data::{make_batches, split_index, Corpus, Sample};
use crate::distsim::{plan_ownership, plan_sampling, Ownership, SamplingPlan};
use crate::memory_bank::MemoryBank;
use crate::metrics::{auc, qauc, query_change_rate, StepReport};
use crate::model::{self, assemble_features, encode_doc, encode_query, Dims};
use crate::ranker::bce_with_logit;
use crate::sqdc::sqdc_loss;
use anyhow::{bail, Context, Result};
use mmrank_core::params::AdamConfig;
use mmrank_core::rng::{stream, stream_rng};
use mmrank_core::{Adam, GradBuf, NodeId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Monotonic totals kept across the whole run. The eval path is required to
/// leave `doc_encoder_invocations` untouched; tests assert on the delta.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Counters {
    /// Doc-tower forward passes run to serve training samples. With dedup on
    /// this counts unique encodes, so it is the compute meter.
    pub doc_encoder_invocations: u64,
    /// Doc-tower forward passes run by the staleness probe (reporting only).
    pub probe_encodes: u64,
    /// Samples whose target doc came from a fresh encode rather than the
    /// bank; the p-sampling meter.
    pub fresh_forward_samples: u64,
    pub train_samples: u64,
}

#[derive(Clone, Debug)]
pub struct DocFeatures {
    pub title: Vec<u32>,
    pub ocr: Vec<u32>,
    pub asr: Vec<u32>,
    pub cover_ocr: Vec<u32>,
}

fn doc_feature_map(corpus: &Corpus) -> BTreeMap<u64, DocFeatures> {
    let mut map = BTreeMap::new();
    for sess in &corpus.sessions {
        for s in &sess.samples {
            map.entry(s.doc_id).or_insert_with(|| DocFeatures {
                title: s.title.clone(),
                ocr: s.ocr.clone(),
                asr: s.asr.clone(),
                cover_ocr: s.cover_ocr.clone(),
            });
        }
    }
    map
}

fn cosine_vals(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Everything one step produces besides the bank writes it already applied.
pub struct StepOutput {
    pub loss: f64,
    pub ctr_loss: f64,
    pub sqdc_loss: Option<f64>,
    /// Per-sample logits in batch slot order.
    pub logits: Vec<f64>,
    pub coverage_short: f64,
    pub coverage_long: f64,
    pub grads: Option<GradBuf>,
}

/// One synchronous group step: forward (and optionally backward) for a fixed
/// sampling plan. Mutates only `bank` (fresh-embedding writes plus the age
/// sweep) and `counters`; the caller owns the optimizer update. `dedup`
/// picks between one-owner-per-unique-doc and every-worker-encodes-its-own;
/// both serve identical values, which the equivalence test pins.
#[allow(clippy::too_many_arguments)]
pub fn run_step(
    cfg: &RunConfig,
    dims: &Dims,
    store: &ParamStore,
    bank: &mut MemoryBank,
    samples: &[&Sample],
    plan: &SamplingPlan,
    step: u64,
    dedup: bool,
    want_grads: bool,
    counters: &mut Counters,
) -> Result<StepOutput> {
    let b = samples.len();
    let workers = cfg.train.workers;
    assert_eq!(b % workers, 0, "batch must divide across workers");
    assert_eq!(plan.forward.len(), b);
    let per = b / workers;
    let worker_of = |g: usize| g / per;
    let multimodal = !cfg.ablate.id_only;
    let stop_grad = cfg.ablate.stop_gradient;
    let emb = cfg.encoder.output_dim;
    let lambda = cfg.sqdc.lambda;
    let sqdc_on = multimodal && !cfg.ablate.no_sqdc && lambda > 0.0;

    // Phase A: per-worker encode tapes.
    let mut tapes_a: Vec<Tape> = (0..workers).map(|_| Tape::new()).collect();
    let mut bounds_a: Vec<BoundParams> = (0..workers).map(|_| BoundParams::new(store)).collect();
    // doc id -> (owning worker, node on that worker's tape)
    let mut doc_nodes: BTreeMap<u64, (usize, NodeId)> = BTreeMap::new();
    // (worker, qid) -> node
    let mut query_nodes: BTreeMap<(usize, u64), NodeId> = BTreeMap::new();

    let ownership: Ownership = if multimodal {
        let forward_docs: Vec<Vec<u64>> = (0..workers)
            .map(|w| {
                (w * per..(w + 1) * per)
                    .filter(|&g| plan.forward[g])
                    .map(|g| samples[g].doc_id)
                    .collect()
            })
            .collect();
        if dedup {
            plan_ownership(&forward_docs)
        } else {
            // Every worker encodes its own shard's unique docs; owner_of
            // keeps the lowest worker so bank writer attribution matches the
            // dedup path bitwise.
            let mut own = plan_ownership(&forward_docs);
            own.owned = forward_docs
                .iter()
                .map(|docs| {
                    let mut u: Vec<u64> = docs.clone();
                    u.sort_unstable();
                    u.dedup();
                    u
                })
                .collect();
            own
        }
    } else {
        Ownership {
            owner_of: BTreeMap::new(),
            owned: vec![Vec::new(); workers],
        }
    };

    // Worker-local encode results; under dedup each doc appears once
    // globally, otherwise once per worker that holds it.
    let mut local_doc_nodes: Vec<BTreeMap<u64, NodeId>> = vec![BTreeMap::new(); workers];
    if multimodal {
        for w in 0..workers {
            for &doc_id in &ownership.owned[w] {
                let g = (w * per..(w + 1) * per)
                    .find(|&g| samples[g].doc_id == doc_id && plan.forward[g])
                    .expect("owned doc must be a forward sample in this shard");
                let s = samples[g];
                let node = encode_doc(
                    &mut tapes_a[w],
                    &mut bounds_a[w],
                    cfg,
                    &s.title,
                    &s.ocr,
                    &s.asr,
                    &s.cover_ocr,
                )?;
                counters.doc_encoder_invocations += 1;
                local_doc_nodes[w].insert(doc_id, node);
                if dedup || !doc_nodes.contains_key(&doc_id) {
                    doc_nodes.insert(doc_id, (w, node));
                }
            }
            for g in w * per..(w + 1) * per {
                let qid = samples[g].qid;
                if let std::collections::btree_map::Entry::Vacant(e) = query_nodes.entry((w, qid))
                {
                    let node = encode_query(&mut tapes_a[w], &mut bounds_a[w], cfg, &samples[g].query)?;
                    e.insert(node);
                }
            }
        }
    }

    // Barrier: gather fresh values, write them to the bank, age it.
    let gathered: BTreeMap<u64, Vec<f64>> = doc_nodes
        .iter()
        .map(|(&id, &(w, node))| (id, tapes_a[w].values_of(node).to_vec()))
        .collect();
    let query_vals: BTreeMap<(usize, u64), Vec<f64>> = query_nodes
        .iter()
        .map(|(&k, &node)| (k, tapes_a[k.0].values_of(node).to_vec()))
        .collect();
    if multimodal {
        for w in 0..workers {
            for &doc_id in &ownership.owned[w] {
                let vals = tapes_a[w].values_of(local_doc_nodes[w][&doc_id]).to_vec();
                bank.put(doc_id, vals, step, w);
            }
        }
        bank.sweep(step);
    }

    // Phase B: per-worker ranking tapes over leaf copies of the embeddings.
    struct SampleLeaves {
        q: NodeId,
        d: NodeId,
        grad_linked: bool,
    }
    let mut tapes_b: Vec<Tape> = (0..workers).map(|_| Tape::new()).collect();
    let mut bounds_b: Vec<BoundParams> = (0..workers).map(|_| BoundParams::new(store)).collect();
    let mut leaves: Vec<SampleLeaves> = Vec::with_capacity(b);
    let mut row_vals: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(b);
    // Rows whose doc embedding was a bank miss carry a zero placeholder the
    // ranker tolerates, but they must stay out of the contrastive batch.
    let mut row_doc_present: Vec<bool> = Vec::with_capacity(b);
    let mut logits = Vec::with_capacity(b);
    let mut cov_short_sum = 0.0;
    let mut cov_long_sum = 0.0;
    let mut bce_nodes: Vec<Vec<NodeId>> = vec![Vec::new(); workers];
    for g in 0..b {
        let w = worker_of(g);
        let s = samples[g];
        let tape = &mut tapes_b[w];
        let (q_val, d_val, d_present) = if multimodal {
            let q = query_vals[&(w, s.qid)].clone();
            // Backward membership implies forward membership, so a
            // grad-linked sample always reads a fresh value here.
            let (d, present) = if plan.forward[g] {
                let d = if dedup {
                    gathered[&s.doc_id].clone()
                } else {
                    tapes_a[w].values_of(local_doc_nodes[w][&s.doc_id]).to_vec()
                };
                (d, true)
            } else {
                match bank.get(s.doc_id) {
                    Some(e) => (e.embedding.clone(), true),
                    None => (vec![0.0; emb], false),
                }
            };
            (q, d, present)
        } else {
            (vec![0.0; emb], vec![0.0; emb], false)
        };
        row_vals.push((q_val.clone(), d_val.clone()));
        row_doc_present.push(d_present);
        let grad_linked = multimodal && !stop_grad && plan.backward[g];
        let mk = |tape: &mut Tape, v: Vec<f64>, linked: bool| {
            let t = Tensor::new(vec![emb], v);
            if linked {
                tape.input(t)
            } else {
                tape.constant(t)
            }
        };
        let q_leaf = mk(tape, q_val, grad_linked);
        let d_leaf = mk(tape, d_val, grad_linked);
        let assembled = assemble_features(tape, &mut bounds_b[w], cfg, dims, s, q_leaf, d_leaf, bank)?;
        cov_short_sum += assembled.coverage_short;
        cov_long_sum += assembled.coverage_long;
        let logit = model::score(tape, &mut bounds_b[w], cfg, assembled.fused);
        logits.push(tape.value(logit).values()[0]);
        let bce = bce_with_logit(tape, logit, s.label);
        bce_nodes[w].push(bce);
        leaves.push(SampleLeaves {
            q: q_leaf,
            d: d_leaf,
            grad_linked,
        });
    }

    // Loss values (the gradient scaling repeats them inside each tape).
    let ctr_loss = {
        let mut sum = 0.0;
        for w in 0..workers {
            for &n in &bce_nodes[w] {
                sum += tapes_b[w].value(n).values()[0];
            }
        }
        sum / b as f64
    };

    // Shared contrastive tape over the whole batch. Every row keeps its
    // serving-path embedding value; only backward-plan rows are gradient
    // leaves, so low q shrinks the flow of gradient, not the negative pool.
    let mut tape_s = Tape::new();
    let mut sqdc_leaves: Vec<(usize, NodeId, NodeId)> = Vec::new(); // (g, q, d)
    let mut sqdc_value = None;
    let mut sqdc_node = None;
    if sqdc_on {
        let mut qs = Vec::new();
        let mut ds = Vec::new();
        let mut qids = Vec::new();
        let mut labels = Vec::new();
        for g in 0..b {
            if !row_doc_present[g] {
                continue;
            }
            let s = samples[g];
            let (qv, dv) = row_vals[g].clone();
            let (q, d) = if plan.backward[g] {
                let q = tape_s.input(Tensor::new(vec![emb], qv));
                let d = tape_s.input(Tensor::new(vec![emb], dv));
                sqdc_leaves.push((g, q, d));
                (q, d)
            } else {
                let q = tape_s.constant(Tensor::new(vec![emb], qv));
                let d = tape_s.constant(Tensor::new(vec![emb], dv));
                (q, d)
            };
            qs.push(q);
            ds.push(d);
            qids.push(s.qid);
            labels.push(s.label);
        }
        if !qs.is_empty() {
            let mut sq = cfg.sqdc.clone();
            if cfg.ablate.no_session_mask {
                sq.session_mask = false;
            }
            if let Some(node) = sqdc_loss(&mut tape_s, &sq, &qs, &ds, &qids, &labels)? {
                sqdc_value = Some(tape_s.value(node).values()[0]);
                sqdc_node = Some(node);
            }
        }
    }

    let loss = ctr_loss + lambda * sqdc_value.unwrap_or(0.0);

    let mut grads = None;
    if want_grads {
        let mut gbuf = GradBuf::zeros_like(store);
        // Cotangents flowing back into phase A, keyed by the consuming
        // worker so the no-dedup path can route each share to that worker's
        // own encode instead of double-counting a shared doc.
        let mut cot_doc: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
        let mut cot_query: BTreeMap<(usize, u64), Vec<f64>> = BTreeMap::new();
        let add_cot = |slot: &mut Vec<f64>, g: &[f64]| {
            if slot.is_empty() {
                slot.extend_from_slice(g);
            } else {
                for (a, x) in slot.iter_mut().zip(g) {
                    *a += x;
                }
            }
        };

        for w in 0..workers {
            if bce_nodes[w].is_empty() {
                continue;
            }
            // One scalar per worker: its BCE terms over the batch size, so
            // the group total is the batch mean.
            let cat = tapes_b[w].concat_vec(&bce_nodes[w]);
            let summed = tapes_b[w].sum(cat);
            let scaled = tapes_b[w].scale(summed, 1.0 / b as f64);
            let g = tapes_b[w].backward_scalar(scaled);
            bounds_b[w].accumulate_into(&g, &mut gbuf);
            for (gl, leaf) in leaves.iter().enumerate() {
                if worker_of(gl) != w || !leaf.grad_linked {
                    continue;
                }
                let s = samples[gl];
                if let Some(gq) = g.of(leaf.q) {
                    add_cot(cot_query.entry((w, s.qid)).or_default(), gq);
                }
                if let Some(gd) = g.of(leaf.d) {
                    add_cot(cot_doc.entry((w, s.doc_id)).or_default(), gd);
                }
            }
        }

        if let Some(node) = sqdc_node {
            let scaled = tape_s.scale(node, lambda);
            let g = tape_s.backward_scalar(scaled);
            for &(gl, ql, dl) in &sqdc_leaves {
                let s = samples[gl];
                let w = worker_of(gl);
                if let Some(gq) = g.of(ql) {
                    add_cot(cot_query.entry((w, s.qid)).or_default(), gq);
                }
                if let Some(gd) = g.of(dl) {
                    add_cot(cot_doc.entry((w, s.doc_id)).or_default(), gd);
                }
            }
        }

        // Phase C: seed the encode tapes. With dedup on, a doc's owner
        // receives every worker's share; with dedup off, each worker's own
        // encode receives only its local share.
        for w in 0..workers {
            let mut seeds: Vec<(NodeId, Vec<f64>)> = Vec::new();
            for (&doc_id, node) in &local_doc_nodes[w] {
                let mut total: Vec<f64> = Vec::new();
                if dedup {
                    for cw in 0..workers {
                        if let Some(c) = cot_doc.get(&(cw, doc_id)) {
                            add_cot(&mut total, c);
                        }
                    }
                } else if let Some(c) = cot_doc.get(&(w, doc_id)) {
                    add_cot(&mut total, c);
                }
                if !total.is_empty() {
                    seeds.push((*node, total));
                }
            }
            for (&(qw, qid), node) in &query_nodes {
                if qw != w {
                    continue;
                }
                if let Some(c) = cot_query.get(&(qw, qid)) {
                    seeds.push((*node, c.clone()));
                }
            }
            if seeds.is_empty() {
                continue;
            }
            let g = tapes_a[w].backward(&seeds);
            bounds_a[w].accumulate_into(&g, &mut gbuf);
        }
        grads = Some(gbuf);
    }

    if multimodal {
        counters.fresh_forward_samples += plan.forward_count() as u64;
    }
    counters.train_samples += b as u64;

    Ok(StepOutput {
        loss,
        ctr_loss,
        sqdc_loss: sqdc_value,
        logits,
        coverage_short: cov_short_sum / b as f64,
        coverage_long: cov_long_sum / b as f64,
        grads,
    })
}

/// Outcome of scoring a session range without touching the doc encoder.
#[derive(Clone, Debug, Serialize)]
pub struct EvalOutcome {
    pub auc: Option<f64>,
    pub qauc: Option<f64>,
    pub query_change_rate: Option<f64>,
    pub n_samples: usize,
    /// Target docs absent from the bank, scored with a zero embedding.
    pub bank_misses: u64,
    /// Doc-tower invocations observed while evaluating; the serving
    /// contract is that this stays zero.
    pub doc_encoder_calls: u64,
}

/// Score sessions with the current params, serving every doc embedding from
/// the memory bank. Queries are encoded fresh; the doc tower never runs.
pub fn evaluate(
    cfg: &RunConfig,
    dims: &Dims,
    store: &ParamStore,
    bank: &MemoryBank,
    sessions: &[crate::data::Session],
    counters: &mut Counters,
) -> Result<EvalOutcome> {
    let before = counters.doc_encoder_invocations;
    let emb = cfg.encoder.output_dim;
    let multimodal = !cfg.ablate.id_only;
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    let mut qids = Vec::new();
    let mut change_rows: Vec<((u64, Vec<u32>), bool)> = Vec::new();
    let mut bank_misses = 0u64;
    for sess in sessions {
        if sess.samples.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let mut bound = BoundParams::new(store);
        let q_emb = if multimodal {
            encode_query(&mut tape, &mut bound, cfg, &sess.samples[0].query)?
        } else {
            tape.constant(Tensor::zeros(vec![emb]))
        };
        for s in &sess.samples {
            let d_emb = if multimodal {
                match bank.get(s.doc_id) {
                    Some(e) => tape.constant(Tensor::new(vec![emb], e.embedding.clone())),
                    None => {
                        bank_misses += 1;
                        tape.constant(Tensor::zeros(vec![emb]))
                    }
                }
            } else {
                tape.constant(Tensor::zeros(vec![emb]))
            };
            let assembled = assemble_features(&mut tape, &mut bound, cfg, dims, s, q_emb, d_emb, bank)?;
            let logit = model::score(&mut tape, &mut bound, cfg, assembled.fused);
            labels.push(s.label);
            scores.push(tape.value(logit).values()[0]);
            qids.push(s.qid);
            change_rows.push(((s.uid, s.query.clone()), s.reformulated));
        }
    }
    Ok(EvalOutcome {
        auc: auc(&labels, &scores),
        qauc: qauc(&qids, &labels, &scores),
        query_change_rate: query_change_rate(change_rows),
        n_samples: labels.len(),
        bank_misses,
        doc_encoder_calls: counters.doc_encoder_invocations - before,
    })
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub dims: Dims,
    pub store: ParamStore,
    pub adam: Adam,
    pub bank: MemoryBank,
    pub step: u64,
    pub counters: Counters,
    doc_features: BTreeMap<u64, DocFeatures>,
    /// Per-step max |logit(dedup) - logit(no dedup)|, kept when the config
    /// asks for the cross-check.
    pub dedup_gaps: Vec<f64>,
    /// Step horizon for the lr decay line, set by scheduled runs. Direct
    /// stepping without one uses the base rate.
    schedule_total: Option<u64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate().context("invalid run config")?;
        let dims = model::dims(&cfg);
        let store = model::init_model(&cfg);
        let adam = Adam::new(
            AdamConfig {
                lr: cfg.train.lr,
                beta1: cfg.train.beta1,
                beta2: cfg.train.beta2,
                eps: cfg.train.adam_eps,
            },
            &store,
        );
        let bank = MemoryBank::new(cfg.bank.capacity, cfg.bank.window_steps);
        let doc_features = doc_feature_map(corpus);
        Ok(Self {
            cfg,
            dims,
            store,
            adam,
            bank,
            step: 0,
            counters: Counters::default(),
            doc_features,
            dedup_gaps: Vec::new(),
            schedule_total: None,
        })
    }

    /// Learning rate at `step`: linear from `lr` down to
    /// `lr * lr_final_frac` across the schedule horizon.
    fn lr_at(&self, step: u64) -> f64 {
        let t = &self.cfg.train;
        match self.schedule_total {
            Some(total) if total > 0 => {
                let frac = (step as f64 / total as f64).min(1.0);
                t.lr * (1.0 - (1.0 - t.lr_final_frac) * frac)
            }
            _ => t.lr,
        }
    }

    fn plan_for_step(&self, b: usize, step: u64) -> SamplingPlan {
        let t = &self.cfg.train;
        if t.p_forward_pct >= 100.0 && t.q_backward_pct >= 100.0 {
            SamplingPlan::all(b)
        } else {
            let mut rng = stream_rng(self.cfg.seed, stream::SAMPLING, step);
            plan_sampling(b, t.p_forward_pct, t.q_backward_pct, &mut rng)
        }
    }

    /// Fraction of the batch whose target doc is already banked, measured
    /// before this step writes anything.
    fn pre_put_hit_rate(&self, samples: &[&Sample]) -> f64 {
        let hits = samples
            .iter()
            .filter(|s| self.bank.get(s.doc_id).is_some())
            .count();
        hits as f64 / samples.len() as f64
    }

    pub fn train_step(&mut self, samples: &[&Sample]) -> Result<(StepOutput, f64)> {
        let hit_rate = self.pre_put_hit_rate(samples);
        let plan = self.plan_for_step(samples.len(), self.step);
        // The no-dedup cross-check runs first, forward-only, against a clone
        // of the pre-step bank; its logits are compared with the real step's.
        let off_logits = if self.cfg.train.verify_dedup && !self.cfg.ablate.id_only {
            let mut shadow_bank = self.bank.clone();
            let mut shadow_counters = self.counters.clone();
            let off = run_step(
                &self.cfg,
                &self.dims,
                &self.store,
                &mut shadow_bank,
                samples,
                &plan,
                self.step,
                false,
                false,
                &mut shadow_counters,
            )?;
            Some(off.logits)
        } else {
            None
        };
        let out = run_step(
            &self.cfg,
            &self.dims,
            &self.store,
            &mut self.bank,
            samples,
            &plan,
            self.step,
            true,
            true,
            &mut self.counters,
        )?;
        if let Some(off) = off_logits {
            let gap = off
                .iter()
                .zip(&out.logits)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            self.dedup_gaps.push(gap);
        }
        let grads = out.grads.as_ref().expect("training step always keeps grads");
        self.adam.cfg.lr = self.lr_at(self.step);
        self.adam.step(&mut self.store, grads);
        self.step += 1;
        Ok((out, hit_rate))
    }

    /// Mean cosine between sampled bank entries and fresh re-encodes under
    /// the current params. None while the bank is empty.
    pub fn staleness_probe(&mut self) -> Result<Option<f64>> {
        if self.cfg.ablate.id_only {
            return Ok(None);
        }
        let mut rng = stream_rng(self.cfg.seed, stream::PROBE, self.step);
        let ids = self.bank.sample_ids(self.cfg.bank.probe_size, &mut rng);
        if ids.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for id in &ids {
            let feats = self
                .doc_features
                .get(id)
                .expect("banked doc must exist in the corpus");
            let mut tape = Tape::new();
            let mut bound = BoundParams::new(&self.store);
            let node = encode_doc(
                &mut tape,
                &mut bound,
                &self.cfg,
                &feats.title,
                &feats.ocr,
                &feats.asr,
                &feats.cover_ocr,
            )?;
            self.counters.probe_encodes += 1;
            let fresh = tape.values_of(node);
            let banked = &self.bank.get(*id).expect("sampled from bank").embedding;
            total += cosine_vals(fresh, banked);
        }
        Ok(Some(total / ids.len() as f64))
    }

    pub fn evaluate_sessions(&mut self, sessions: &[crate::data::Session]) -> Result<EvalOutcome> {
        evaluate(
            &self.cfg,
            &self.dims,
            &self.store,
            &self.bank,
            sessions,
            &mut self.counters,
        )
    }

    /// Full training run over the corpus's temporal train split, reporting
    /// every `report_every` steps and on the final step.
    pub fn run(&mut self, corpus: &Corpus) -> Result<Vec<StepReport>> {
        self.run_with(corpus, |_, _| Ok(()))
    }

    /// Like [`Trainer::run`], invoking `after_step` once per completed step
    /// (checkpoint hooks live there).
    pub fn run_with(
        &mut self,
        corpus: &Corpus,
        mut after_step: impl FnMut(&Trainer, &StepReport) -> Result<()>,
    ) -> Result<Vec<StepReport>> {
        let split = split_index(corpus.sessions.len(), self.cfg.data.eval_fraction);
        let train_sessions = &corpus.sessions[..split];
        let eval_sessions = &corpus.sessions[split..];
        let batches = make_batches(train_sessions, self.cfg.train.batch_size);
        if batches.is_empty() {
            bail!("train split has no full batch");
        }
        let steps_per_epoch = batches.len() as u64;
        let total_steps = match self.cfg.train.max_steps {
            Some(m) => m,
            None => steps_per_epoch * self.cfg.train.epochs as u64,
        };
        // The decay horizon follows the nominal epoch budget, not max_steps,
        // so a truncated run walks the same lr line as the full one.
        self.schedule_total = Some(steps_per_epoch * self.cfg.train.epochs as u64);
        let mut reports = Vec::new();
        while self.step < total_steps {
            let epoch = (self.step / steps_per_epoch) as usize;
            let batch = &batches[(self.step % steps_per_epoch) as usize];
            let samples: Vec<&Sample> = batch
                .items
                .iter()
                .map(|&(s, i)| &train_sessions[s].samples[i])
                .collect();
            let plan_fresh = if self.cfg.ablate.id_only {
                0
            } else {
                self.plan_for_step(samples.len(), self.step).forward_count()
            };
            let (out, hit_rate) = self.train_step(&samples)?;
            let at_report = self.step % self.cfg.train.report_every == 0 || self.step == total_steps;
            let mut report = StepReport {
                step: self.step,
                epoch,
                loss: out.loss,
                ctr_loss: out.ctr_loss,
                sqdc_loss: out.sqdc_loss.unwrap_or(0.0),
                bank_hit_rate: Some(hit_rate),
                bank_coverage_short: Some(out.coverage_short),
                bank_coverage_long: Some(out.coverage_long),
                probe_similarity: None,
                fresh_forward_frac: Some(plan_fresh as f64 / samples.len() as f64),
                eval_auc: None,
                eval_qauc: None,
            };
            if at_report {
                report.probe_similarity = self.staleness_probe()?;
                if self.cfg.train.eval_on_report && !eval_sessions.is_empty() {
                    let ev = self.evaluate_sessions(eval_sessions)?;
                    report.eval_auc = ev.auc;
                    report.eval_qauc = ev.qauc;
                }
            }
            after_step(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }
}
