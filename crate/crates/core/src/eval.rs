//! Retrieval metrics and division-quality audits.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{PairDataset, SplitName};
use crate::division::DivisionResult;
use crate::encoders::ModelParams;
use crate::error::{PcsrError, Result};
use crate::numerics::DenseMatrix;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Zero-based rank of gallery item `target` in row `scores`: items with a higher
/// score, or an equal score and a lower index, come first.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(g, &v)| v > s || (v == s && g < target))
        .count()
}

/// Percentage of queries (rows of `sim`) with at least one relevant gallery item
/// among their top `k`.
pub fn recall_at_k(sim: &DenseMatrix, relevant: &[Vec<usize>], k: usize) -> Result<f64> {
    Ok(recalls(sim, relevant, &[k])?[0])
}

/// [`recall_at_k`] for several cutoffs from a single ranking pass.
pub fn recalls(sim: &DenseMatrix, relevant: &[Vec<usize>], ks: &[usize]) -> Result<Vec<f64>> {
    let (q, g) = sim.shape();
    if relevant.len() != q {
        return Err(PcsrError::Logic(format!("{} relevance sets for {q} queries", relevant.len())));
    }
    if q == 0 {
        return Err(PcsrError::config("recall needs at least one query"));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > g) {
        return Err(PcsrError::config(format!("k = {k} outside [1, {g}]")));
    }
    let mut hits = vec![0usize; ks.len()];
    for (row, rel) in relevant.iter().enumerate() {
        if rel.is_empty() {
            return Err(PcsrError::Logic(format!("query {row} has no relevant items")));
        }
        if let Some(&r) = rel.iter().find(|&&r| r >= g) {
            return Err(PcsrError::Logic(format!("relevant item {r} outside gallery of {g}")));
        }
        let scores = sim.row(row);
        let best = rel.iter().map(|&r| rank_of(scores, r)).min().unwrap();
        for (h, &k) in hits.iter_mut().zip(ks) {
            if best < k {
                *h += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| 100.0 * h as f64 / q as f64).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub i2t_r10: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub t2i_r10: f64,
    pub rsum: f64,
    pub n_queries: usize,
}

impl RetrievalReport {
    fn from_parts(i2t: &[f64], t2i: &[f64], n_queries: usize) -> Self {
        RetrievalReport {
            i2t_r1: i2t[0],
            i2t_r5: i2t[1],
            i2t_r10: i2t[2],
            t2i_r1: t2i[0],
            t2i_r5: t2i[1],
            t2i_r10: t2i[2],
            rsum: i2t.iter().chain(t2i).sum(),
            n_queries,
        }
    }

    /// Range, monotonicity and sum checks; the error names the first violation.
    pub fn check_invariants(&self) -> Result<()> {
        let rows = [
            ("image-to-text", [self.i2t_r1, self.i2t_r5, self.i2t_r10]),
            ("text-to-image", [self.t2i_r1, self.t2i_r5, self.t2i_r10]),
        ];
        for (name, r) in rows {
            if r.iter().any(|v| !(0.0..=100.0).contains(v)) {
                return Err(PcsrError::Logic(format!("{name} recall outside [0, 100]: {r:?}")));
            }
            if !(r[0] <= r[1] && r[1] <= r[2]) {
                return Err(PcsrError::Logic(format!("{name} recall not monotone in k: {r:?}")));
            }
        }
        let sum = self.i2t_r1 + self.i2t_r5 + self.i2t_r10 + self.t2i_r1 + self.t2i_r5 + self.t2i_r10;
        if sum != self.rsum {
            return Err(PcsrError::Logic(format!("rsum {} differs from {sum}", self.rsum)));
        }
        Ok(())
    }

    /// Plain-text table with one row per retrieval direction.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>7} {:>7} {:>8} {:>8}",
            "direction", "R@1", "R@5", "R@10", "sum", "queries"
        );
        for (name, r) in [
            ("image-to-text", [self.i2t_r1, self.i2t_r5, self.i2t_r10]),
            ("text-to-image", [self.t2i_r1, self.t2i_r5, self.t2i_r10]),
        ] {
            let _ = writeln!(
                out,
                "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>8.2} {:>8}",
                name,
                r[0],
                r[1],
                r[2],
                r.iter().sum::<f64>(),
                self.n_queries
            );
        }
        let _ = writeln!(out, "rsum {:.2}", self.rsum);
        out
    }
}

/// Recall in both directions from precomputed embeddings, where text `t` belongs to
/// image `t / captions_per_image`. Cutoffs larger than a gallery are clamped to its size.
pub fn evaluate_embeddings(
    images: &DenseMatrix,
    texts: &DenseMatrix,
    captions_per_image: usize,
) -> Result<RetrievalReport> {
    let n = images.rows();
    if n == 0 || captions_per_image == 0 || texts.rows() != n * captions_per_image {
        return Err(PcsrError::config(format!(
            "{} texts cannot be {captions_per_image} captions for each of {n} images",
            texts.rows()
        )));
    }
    let sim = images.matmul_transposed(texts)?;
    let i2t_rel: Vec<Vec<usize>> = (0..n)
        .map(|i| (i * captions_per_image..(i + 1) * captions_per_image).collect())
        .collect();
    let clamp = |g: usize| RECALL_KS.map(|k| k.min(g));
    let i2t = recalls(&sim, &i2t_rel, &clamp(texts.rows()))?;
    let t2i_rel: Vec<Vec<usize>> = (0..texts.rows()).map(|t| vec![t / captions_per_image]).collect();
    let t2i = recalls(&sim.transpose(), &t2i_rel, &clamp(n))?;
    Ok(RetrievalReport::from_parts(&i2t, &t2i, n))
}

/// Retrieval over the images of `split` and all of their true captions.
pub fn evaluate(params: &ModelParams, ds: &PairDataset, split: SplitName) -> Result<RetrievalReport> {
    let images = ds.split.get(split);
    if images.is_empty() {
        return Err(PcsrError::config(format!("split {split:?} is empty")));
    }
    let texts: Vec<usize> = images.iter().flat_map(|&i| ds.captions_of(i)).collect();
    let img_emb = params.embed_images(&ds.image_feats.select_rows(images))?;
    let txt_emb = params.embed_texts(&ds.text_feats.select_rows(&texts))?;
    evaluate_embeddings(&img_emb, &txt_emb, ds.captions_per_image)
}

/// Division quality against the known corruption mask.
///
/// Clean precision is 0 for an empty clean set; clean recall is 1 when no pair in
/// the division is uncorrupted. The corrupted fractions are 0 when nothing is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisionAudit {
    pub clean_precision: f64,
    pub clean_recall: f64,
    /// Share of the corrupted pairs that were placed in the refinable set.
    pub corrupted_in_refinable: f64,
    /// Share of the corrupted pairs that were placed in the ambiguous set.
    pub corrupted_in_ambiguous: f64,
    pub n_corrupted: usize,
}

pub fn audit_division(division: &DivisionResult, corrupted: &[bool]) -> Result<DivisionAudit> {
    let all = division.clean.iter().chain(&division.refinable).chain(&division.ambiguous);
    if let Some(&i) = all.clone().find(|&&i| i >= corrupted.len()) {
        return Err(PcsrError::Logic(format!(
            "division index {i} outside corruption mask of {}",
            corrupted.len()
        )));
    }
    let count = |set: &[usize], want: bool| set.iter().filter(|&&i| corrupted[i] == want).count();
    let clean_true = count(&division.clean, false);
    let total_true = all.clone().filter(|&&i| !corrupted[i]).count();
    let total_corrupt = all.filter(|&&i| corrupted[i]).count();
    let ratio = |num: usize, den: usize, empty: f64| {
        if den == 0 {
            empty
        } else {
            num as f64 / den as f64
        }
    };
    Ok(DivisionAudit {
        clean_precision: ratio(clean_true, division.clean.len(), 0.0),
        clean_recall: ratio(clean_true, total_true, 1.0),
        corrupted_in_refinable: ratio(count(&division.refinable, true), total_corrupt, 0.0),
        corrupted_in_ambiguous: ratio(count(&division.ambiguous, true), total_corrupt, 0.0),
        n_corrupted: total_corrupt,
    })
}
