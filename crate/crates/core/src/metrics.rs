//! Corpus-level caption metrics over token ids: BLEU, ROUGE-L and CIDEr-D.
//!
//! Scores are reported on a 0–100 scale (CIDEr-D can exceed 100).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::TokenId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalItem {
    pub candidate: Vec<TokenId>,
    pub references: Vec<Vec<TokenId>>,
}

/// Nonempty list of items, each with at least one reference.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalBatch {
    items: Vec<EvalItem>,
}

impl EvalBatch {
    pub fn new(items: Vec<EvalItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("evaluation batch is empty".into()));
        }
        if let Some(i) = items.iter().position(|it| it.references.is_empty()) {
            return Err(Error::Input(format!("item {i} has no references")));
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[EvalItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 6] = ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu1, self.bleu2, self.bleu3, self.bleu4, self.rouge_l, self.cider]
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, f64)> {
        Self::NAMES.into_iter().zip(self.values())
    }
}

pub fn evaluate(batch: &EvalBatch) -> Result<MetricReport> {
    Ok(MetricReport {
        bleu1: bleu(batch, 1)?,
        bleu2: bleu(batch, 2)?,
        bleu3: bleu(batch, 3)?,
        bleu4: bleu(batch, 4)?,
        rouge_l: rouge_l(batch),
        cider: cider(batch)?,
    })
}

fn ngram_counts(s: &[TokenId], n: usize) -> BTreeMap<&[TokenId], usize> {
    let mut out = BTreeMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and candidate n-gram total, summed over the batch.
pub fn modified_precision(batch: &EvalBatch, n: usize) -> (usize, usize) {
    let (mut matched, mut total) = (0, 0);
    for item in batch.items() {
        let mut max_ref: BTreeMap<&[TokenId], usize> = BTreeMap::new();
        for r in &item.references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in ngram_counts(&item.candidate, n) {
            matched += c.min(max_ref.get(g).copied().unwrap_or(0));
            total += c;
        }
    }
    (matched, total)
}

/// Reference length closest to `len`; ties go to the shorter reference.
fn closest_ref_len(len: usize, refs: &[Vec<TokenId>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&r| (r.abs_diff(len), r))
        .expect("validated nonempty")
}

/// Corpus BLEU-n: geometric mean of modified precisions 1..=n times the
/// brevity penalty. Any order without matches scores 0.
pub fn bleu(batch: &EvalBatch, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Input(format!("BLEU order {n} outside 1..=4")));
    }
    let c: usize = batch.items().iter().map(|it| it.candidate.len()).sum();
    let r: usize = batch
        .items()
        .iter()
        .map(|it| closest_ref_len(it.candidate.len(), &it.references))
        .sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = modified_precision(batch, k);
        if m == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(100.0 * bp * (log_sum / n as f64).exp())
}

pub fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

fn rouge_f(cand: &[TokenId], reference: &[TokenId]) -> f64 {
    let l = lcs_len(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over items of the best LCS F-measure against any reference.
pub fn rouge_l(batch: &EvalBatch) -> f64 {
    let total: f64 = batch
        .items()
        .iter()
        .map(|it| it.references.iter().map(|r| rouge_f(&it.candidate, r)).fold(0.0, f64::max))
        .sum();
    100.0 * total / batch.len() as f64
}

pub const CIDER_SIGMA: f64 = 6.0;

/// Gaussian penalty on the candidate/reference length difference.
pub fn length_penalty(delta: f64) -> f64 {
    (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp()
}

struct TfIdf<'a> {
    /// One weighted n-gram map per order 1..=4.
    vecs: [BTreeMap<&'a [TokenId], f64>; 4],
    norms: [f64; 4],
    len: usize,
}

fn tfidf<'a>(s: &'a [TokenId], df: &BTreeMap<&[TokenId], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs: [BTreeMap<&[TokenId], f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, c) in ngram_counts(s, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let v = c as f64 * (log_n - d.ln());
            norms[n - 1] += v * v;
            vecs[n - 1].insert(g, v);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    TfIdf {
        vecs,
        norms,
        len: s.len(),
    }
}

fn cider_sim(h: &TfIdf<'_>, r: &TfIdf<'_>) -> f64 {
    let delta = h.len as f64 - r.len as f64;
    let mut sum = 0.0;
    for n in 0..4 {
        let mut val: f64 = h.vecs[n]
            .iter()
            .map(|(g, &vh)| {
                let vr = r.vecs[n].get(g).copied().unwrap_or(0.0);
                vh.min(vr) * vr
            })
            .sum();
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            val /= h.norms[n] * r.norms[n];
        }
        sum += val * length_penalty(delta);
    }
    sum / 4.0
}

/// CIDEr-D with document frequencies taken over each item's reference set.
/// Matches the usual toolkit value (which carries a factor of 10) scaled by 100.
pub fn cider(batch: &EvalBatch) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::Input(
            "CIDEr-D needs at least two items; document frequencies over one item make every weight zero".into(),
        ));
    }
    let mut df: BTreeMap<&[TokenId], usize> = BTreeMap::new();
    for item in batch.items() {
        let mut seen: BTreeSet<&[TokenId]> = BTreeSet::new();
        for r in &item.references {
            for n in 1..=4 {
                if r.len() >= n {
                    seen.extend(r.windows(n));
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (batch.len() as f64).ln();
    let mut total = 0.0;
    for item in batch.items() {
        let h = tfidf(&item.candidate, &df, log_n);
        let per_ref: f64 = item
            .references
            .iter()
            .map(|r| cider_sim(&h, &tfidf(r, &df, log_n)))
            .sum();
        total += 10.0 * per_ref / item.references.len() as f64;
    }
    Ok(100.0 * total / batch.len() as f64)
}
