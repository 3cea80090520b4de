//! Ranking metrics and run reports.
//!
//! AUC uses the rank-sum form with average ranks over tied scores, which
//! equals the pairwise win count (ties at half weight) without the quadratic
//! scan. Undefined metrics are `None`, never a filler value.

use serde::Serialize;
use std::collections::BTreeMap;
use std::io::{self, Write};

/// Probability that a random positive outscores a random negative, ties at
/// half credit. `None` when either class is absent.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    assert_eq!(labels.len(), scores.len(), "labels and scores must align");
    assert!(
        scores.iter().all(|s| s.is_finite()),
        "scores must be finite"
    );
    assert!(
        labels.iter().all(|&l| l <= 1),
        "labels must be 0 or 1"
    );
    let n = labels.len();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // Walk tie groups; ranks are 1-based, a group spanning i..j gets the
    // average rank (i+1 + j) / 2.
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            if labels[k] == 1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let wins = pos_rank_sum - (pos * (pos + 1) / 2) as f64;
    Some(wins / (pos as f64 * neg as f64))
}

/// Unweighted mean of per-query AUC. Queries with a single label class are
/// skipped; `None` when no query has a defined AUC.
pub fn qauc(qids: &[u64], labels: &[u8], scores: &[f64]) -> Option<f64> {
    assert_eq!(qids.len(), labels.len());
    assert_eq!(qids.len(), scores.len());
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &q) in qids.iter().enumerate() {
        groups.entry(q).or_default().push(i);
    }
    let mut total = 0.0;
    let mut defined = 0usize;
    for idx in groups.values() {
        let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        if let Some(a) = auc(&l, &s) {
            total += a;
            defined += 1;
        }
    }
    (defined > 0).then(|| total / defined as f64)
}

/// Share of distinct keys whose flag is set on any observation. Keys are
/// (user, query) pairs in practice; duplicates collapse with OR.
pub fn query_change_rate<K: Ord>(rows: impl IntoIterator<Item = (K, bool)>) -> Option<f64> {
    let mut seen: BTreeMap<K, bool> = BTreeMap::new();
    for (key, flag) in rows {
        let entry = seen.entry(key).or_insert(false);
        *entry |= flag;
    }
    if seen.is_empty() {
        return None;
    }
    let flagged = seen.values().filter(|&&f| f).count();
    Some(flagged as f64 / seen.len() as f64)
}

/// One row of the periodic training report.
#[derive(Clone, Debug, Default, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub epoch: usize,
    pub loss: f64,
    pub ctr_loss: f64,
    pub sqdc_loss: f64,
    pub bank_hit_rate: Option<f64>,
    pub bank_coverage_short: Option<f64>,
    pub bank_coverage_long: Option<f64>,
    /// Mean cosine between banked embeddings and fresh re-encodes of the
    /// same docs; higher means the cache is less stale.
    pub probe_similarity: Option<f64>,
    pub fresh_forward_frac: Option<f64>,
    pub eval_auc: Option<f64>,
    pub eval_qauc: Option<f64>,
}

pub fn write_reports_jsonl<W: Write>(mut w: W, reports: &[StepReport]) -> io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const CSV_HEADER: &str = "step,epoch,loss,ctr_loss,sqdc_loss,bank_hit_rate,\
bank_coverage_short,bank_coverage_long,probe_similarity,fresh_forward_frac,eval_auc,eval_qauc";

pub fn write_reports_csv<W: Write>(mut w: W, reports: &[StepReport]) -> io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.loss,
            r.ctr_loss,
            r.sqdc_loss,
            cell(r.bank_hit_rate),
            cell(r.bank_coverage_short),
            cell(r.bank_coverage_long),
            cell(r.probe_similarity),
            cell(r.fresh_forward_frac),
            cell(r.eval_auc),
            cell(r.eval_qauc),
        )?;
    }
    Ok(())
}
