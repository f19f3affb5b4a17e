//! Confidence division of training pairs and consistency-guided refinement.

mod consistency;
mod gmm;
mod threshold;

use serde::{Deserialize, Serialize};

use crate::data::PairDataset;
use crate::encoders::ModelParams;
use crate::error::{PcsrError, Result};

pub use consistency::{partition_noisy, ConsistencyTracker};
pub use gmm::{fit_gmm_em, split_by_confidence, GmmFit, GmmModel, MIN_GMM_SAMPLES, SIGMA_FLOOR};
pub use threshold::{ThresholdController, ThresholdStep};

/// Raw per-pair matching losses for the pairs `indices` of `ds`.
///
/// Pair `i` is image `i` with its claimed caption `pair_of[i]`. The negative pool is
/// the other pairs in `indices`: the loss is
/// `[margin − S(I_i, T_i) + max_j S(I_i, T_j)]⁺ + [margin − S(I_i, T_i) + max_j S(I_j, T_i)]⁺`
/// over `j ≠ i` whose caption differs from that of `i`.
pub fn raw_pair_losses(
    params: &ModelParams,
    ds: &PairDataset,
    indices: &[usize],
    margin: f64,
) -> Result<Vec<f64>> {
    if indices.len() < 2 {
        return Err(PcsrError::config("per-pair losses need at least 2 pairs"));
    }
    let images = params.embed_images(&ds.image_feats.select_rows(indices))?;
    let captions: Vec<usize> = indices.iter().map(|&i| ds.pair_of[i]).collect();
    let texts = params.embed_texts(&ds.text_feats.select_rows(&captions))?;
    let sim = images.matmul_transposed(&texts)?;
    let n = indices.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let pos = sim[(i, i)];
        let mut hard_text = f64::NEG_INFINITY;
        let mut hard_image = f64::NEG_INFINITY;
        for j in 0..n {
            if j == i || captions[j] == captions[i] {
                continue;
            }
            hard_text = hard_text.max(sim[(i, j)]);
            hard_image = hard_image.max(sim[(j, i)]);
        }
        let hinge = |neg: f64| {
            if neg.is_finite() {
                (margin - pos + neg).max(0.0)
            } else {
                0.0
            }
        };
        out.push(hinge(hard_text) + hinge(hard_image));
    }
    Ok(out)
}

/// Rescales to `[0, 1]`; a constant vector maps to all zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Per-pair losses of `indices`, min-max normalized across the whole set.
///
/// Raw losses are computed by [`raw_pair_losses`] within consecutive pools of
/// `pool` pairs, so each pair competes against as many negatives as it does in a
/// training batch. A trailing pool of a single pair joins the previous one.
pub fn per_pair_loss(
    params: &ModelParams,
    ds: &PairDataset,
    indices: &[usize],
    margin: f64,
    pool: usize,
) -> Result<Vec<f64>> {
    if pool < 2 {
        return Err(PcsrError::config(format!("negative pool size must be at least 2, got {pool}")));
    }
    if indices.len() < 2 {
        return Err(PcsrError::config("per-pair losses need at least 2 pairs"));
    }
    let mut raw = Vec::with_capacity(indices.len());
    let mut start = 0;
    while start < indices.len() {
        let mut end = (start + pool).min(indices.len());
        if indices.len() - end == 1 {
            end += 1;
        }
        raw.extend(raw_pair_losses(params, ds, &indices[start..end], margin)?);
        start = end;
    }
    Ok(min_max_normalize(&raw))
}

/// One epoch's split of the training images into clean, refinable and ambiguous sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivisionResult {
    pub clean: Vec<usize>,
    pub refinable: Vec<usize>,
    pub ambiguous: Vec<usize>,
    /// Clean posterior of each training pair, aligned with the training index order.
    pub clean_posterior: Vec<f64>,
}

impl DivisionResult {
    pub fn noisy(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.refinable.iter().chain(&self.ambiguous).copied().collect();
        all.sort_unstable();
        all
    }

    /// Checks that the three sets partition `train` exactly.
    pub fn check_partition(&self, train: &[usize]) -> Result<()> {
        let mut got: Vec<usize> = self
            .clean
            .iter()
            .chain(&self.refinable)
            .chain(&self.ambiguous)
            .copied()
            .collect();
        got.sort_unstable();
        let mut want = train.to_vec();
        want.sort_unstable();
        if got != want {
            return Err(PcsrError::Logic(format!(
                "division of {} pairs does not partition the {} training pairs",
                got.len(),
                want.len()
            )));
        }
        if self.clean_posterior.len() != train.len() {
            return Err(PcsrError::Logic("posterior vector misaligned with training set".into()));
        }
        Ok(())
    }
}
