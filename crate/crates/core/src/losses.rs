//! Training objectives and their analytic gradients.
//!
//! Every function here is pure over a batch snapshot: it returns the loss value
//! and gradients w.r.t. its direct inputs (similarities, embeddings or
//! probabilities). Chaining into model parameters happens in the trainer.
//!
//! Logs and powers clamp probabilities at [`PROB_EPS`]; inside the clamped region
//! the gradient of the clamped term is zero.

use serde::{Deserialize, Serialize};

use crate::encoders::distribution_similarity;
use crate::error::{PcsrError, Result};
use crate::numerics::{argmax, DenseMatrix};

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_t: f64,
    pub lambda_ce: f64,
    pub lambda_gce: f64,
    pub lambda_en: f64,
    /// Base `m > 1` of the adaptive margin.
    pub margin_m: f64,
    /// Largest adaptive margin, also the fixed margin used in warmup and for GMM losses.
    pub margin_alpha: f64,
    pub gce_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_t: 1.0,
            lambda_ce: 1.0,
            lambda_gce: 1.0,
            lambda_en: 10.0,
            margin_m: 10.0,
            margin_alpha: 0.2,
            gce_gamma: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.gce_gamma > 0.0 && self.gce_gamma <= 1.0) {
            return Err(PcsrError::config(format!(
                "gce_gamma must lie in (0, 1], got {}",
                self.gce_gamma
            )));
        }
        if !(self.margin_m > 1.0) {
            return Err(PcsrError::config(format!("margin_m must exceed 1, got {}", self.margin_m)));
        }
        if !(self.margin_alpha > 0.0) {
            return Err(PcsrError::config("margin_alpha must be positive"));
        }
        let weights = [self.lambda_t, self.lambda_ce, self.lambda_gce, self.lambda_en];
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(PcsrError::config("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// `α̂ = (m^sp − 1)/(m − 1) · alpha`.
pub fn adaptive_margin(sp: f64, m: f64, alpha: f64) -> Result<f64> {
    if !(m > 1.0) {
        return Err(PcsrError::config(format!("adaptive margin needs m > 1, got {m}")));
    }
    if !(0.0..=1.0).contains(&sp) {
        return Err(PcsrError::config(format!("similarity {sp} outside [0, 1]")));
    }
    Ok((m.powf(sp) - 1.0) / (m - 1.0) * alpha)
}

/// Per-pair margins from the pseudo-distributions of each scored (image, text) pair.
pub fn pair_margins(
    img_probs: &DenseMatrix,
    txt_probs: &DenseMatrix,
    weights: &LossWeights,
) -> Result<Vec<f64>> {
    (0..img_probs.rows())
        .map(|i| {
            let sp = distribution_similarity(img_probs.row(i), txt_probs.row(i))?;
            adaptive_margin(sp, weights.margin_m, weights.margin_alpha)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TripletLoss {
    pub loss: f64,
    /// Gradient w.r.t. every entry of the similarity matrix.
    pub grad: DenseMatrix,
}

/// Bidirectional hinge with hardest in-batch negatives, summed over the batch.
///
/// Row `i` of `sim` is image `i`, column `j` text `j`; the diagonal holds the
/// positive pairs. For each `i` the hardest negative text is
/// `argmax_{j≠i} S[i, j]` and the hardest negative image `argmax_{j≠i} S[j, i]`
/// (ties to the lowest index).
pub fn triplet_loss(sim: &DenseMatrix, margins: &[f64]) -> Result<TripletLoss> {
    triplet_loss_keyed(sim, margins, None)
}

/// [`triplet_loss`] where columns sharing a key are the same caption: for pair
/// `i`, any `j` with `keys[j] == keys[i]` is not a negative in either direction.
/// A direction with no admissible negative contributes nothing.
pub fn triplet_loss_keyed(
    sim: &DenseMatrix,
    margins: &[f64],
    keys: Option<&[usize]>,
) -> Result<TripletLoss> {
    let b = sim.rows();
    if b < 2 || sim.cols() != b {
        return Err(PcsrError::config(format!(
            "triplet loss needs a square similarity matrix with B ≥ 2, got {}x{}",
            sim.rows(),
            sim.cols()
        )));
    }
    if margins.len() != b || keys.is_some_and(|k| k.len() != b) {
        return Err(PcsrError::config("margins/keys must have one entry per pair"));
    }
    let admissible = |i: usize, j: usize| j != i && keys.is_none_or(|k| k[j] != k[i]);
    let mut grad = DenseMatrix::zeros(b, b);
    let mut loss = 0.0;
    for i in 0..b {
        let pos = sim[(i, i)];
        let hardest_text = (0..b)
            .filter(|&j| admissible(i, j))
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if sim[(i, k)] >= sim[(i, j)] => Some(k),
                _ => Some(j),
            });
        if let Some(j) = hardest_text {
            let h = margins[i] - pos + sim[(i, j)];
            if h > 0.0 {
                loss += h;
                grad[(i, i)] -= 1.0;
                grad[(i, j)] += 1.0;
            }
        }
        let hardest_image = (0..b)
            .filter(|&j| admissible(i, j))
            .fold(None, |best: Option<usize>, j| match best {
                Some(k) if sim[(k, i)] >= sim[(j, i)] => Some(k),
                _ => Some(j),
            });
        if let Some(j) = hardest_image {
            let h = margins[i] - pos + sim[(j, i)];
            if h > 0.0 {
                loss += h;
                grad[(i, i)] -= 1.0;
                grad[(j, i)] += 1.0;
            }
        }
    }
    Ok(TripletLoss { loss, grad })
}

/// Loss value and gradient w.r.t. a `B × K` probability matrix.
#[derive(Debug, Clone)]
pub struct ProbLoss {
    pub loss: f64,
    pub grad: DenseMatrix,
}

/// Batch mean of `−log p_i[q̂_i]`.
pub fn ce_loss(p: &DenseMatrix, q_hat: &[usize]) -> Result<ProbLoss> {
    let b = p.rows();
    if b == 0 || q_hat.len() != b {
        return Err(PcsrError::config("ce_loss needs one target per non-empty row"));
    }
    if let Some(&t) = q_hat.iter().find(|&&t| t >= p.cols()) {
        return Err(PcsrError::Logic(format!("target class {t} out of range")));
    }
    let mut grad = DenseMatrix::zeros(b, p.cols());
    let mut loss = 0.0;
    for (i, &t) in q_hat.iter().enumerate() {
        let v = p[(i, t)];
        if v < PROB_EPS {
            loss -= PROB_EPS.ln();
        } else {
            loss -= v.ln();
            grad[(i, t)] = -1.0 / (v * b as f64);
        }
    }
    Ok(ProbLoss {
        loss: loss / b as f64,
        grad,
    })
}

/// Entropy of the batch-mean prediction,
/// `−(1/B) Σ_i p_i · log(p̄) = −Σ_k p̄_k log p̄_k`.
pub fn entropy_reg(p: &DenseMatrix) -> Result<ProbLoss> {
    let (b, k) = p.shape();
    if b == 0 {
        return Err(PcsrError::config("entropy_reg needs a non-empty batch"));
    }
    let mut mean = vec![0.0; k];
    for i in 0..b {
        for (m, v) in mean.iter_mut().zip(p.row(i)) {
            *m += v / b as f64;
        }
    }
    let mut loss = 0.0;
    let mut d_mean = vec![0.0; k];
    for (c, &m) in mean.iter().enumerate() {
        if m < PROB_EPS {
            loss -= m * PROB_EPS.ln();
            d_mean[c] = -PROB_EPS.ln();
        } else {
            loss -= m * m.ln();
            d_mean[c] = -m.ln() - 1.0;
        }
    }
    let mut grad = DenseMatrix::zeros(b, k);
    for i in 0..b {
        for (g, d) in grad.row_mut(i).iter_mut().zip(&d_mean) {
            *g = d / b as f64;
        }
    }
    Ok(ProbLoss { loss, grad })
}

/// Distance of the batch-mean prediction from uniform, `log K − entropy_reg(p)`.
///
/// This is the term the training objectives minimize: it is zero exactly when
/// the batch spreads evenly over the `K` pseudo-classes and grows as the
/// predictions collapse onto a few classes.
pub fn entropy_penalty(p: &DenseMatrix) -> Result<ProbLoss> {
    let ProbLoss { loss, mut grad } = entropy_reg(p)?;
    grad.scale(-1.0);
    Ok(ProbLoss {
        loss: (p.cols() as f64).ln() - loss,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct GceLoss {
    pub loss: f64,
    pub grad_p: DenseMatrix,
    pub grad_q: DenseMatrix,
}

/// Cross-modal generalized cross-entropy, batch mean of
/// `(1 − p_i[q̂_i]^γ)/γ + (1 − q_i[p̂_i]^γ)/γ` with hard targets `q̂ = argmax q`, `p̂ = argmax p`.
pub fn gce_loss(p: &DenseMatrix, q: &DenseMatrix, gamma: f64) -> Result<GceLoss> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(PcsrError::config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    if p.shape() != q.shape() || p.rows() == 0 {
        return Err(PcsrError::config("gce_loss needs matching non-empty batches"));
    }
    let b = p.rows() as f64;
    let mut grad_p = DenseMatrix::zeros(p.rows(), p.cols());
    let mut grad_q = DenseMatrix::zeros(q.rows(), q.cols());
    let mut loss = 0.0;
    for i in 0..p.rows() {
        let q_hat = argmax(q.row(i));
        let p_hat = argmax(p.row(i));
        for (probs, target, grad) in [(p, q_hat, &mut grad_p), (q, p_hat, &mut grad_q)] {
            let v = probs[(i, target)];
            let clamped = v.max(PROB_EPS);
            loss += (1.0 - clamped.powf(gamma)) / gamma;
            if v >= PROB_EPS {
                grad[(i, target)] = -v.powf(gamma - 1.0) / b;
            }
        }
    }
    Ok(GceLoss {
        loss: loss / b,
        grad_p,
        grad_q,
    })
}

/// Index of the clean caption whose pseudo-distribution is closest to `p_r`
/// under [`distribution_similarity`]; ties go to the lowest index.
pub fn rematch_caption(p_r: &[f64], clean_text_probs: &DenseMatrix) -> Result<usize> {
    if clean_text_probs.rows() == 0 {
        return Err(PcsrError::config("caption rematch needs a non-empty clean pool"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for j in 0..clean_text_probs.rows() {
        let s = distribution_similarity(p_r, clean_text_probs.row(j))?;
        if s > best.1 {
            best = (j, s);
        }
    }
    Ok(best.0)
}

/// Forward snapshot of a batch of `B` pairs.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs<'a> {
    pub img_emb: &'a DenseMatrix,
    pub txt_emb: &'a DenseMatrix,
    pub img_probs: &'a DenseMatrix,
    pub txt_probs: &'a DenseMatrix,
}

/// Gradients of a composite objective w.r.t. the batch snapshot.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub img_emb: DenseMatrix,
    pub txt_emb: DenseMatrix,
    pub img_probs: DenseMatrix,
    pub txt_probs: DenseMatrix,
}

impl ObjectiveGrads {
    fn zeros(batch: &BatchOutputs<'_>) -> Self {
        ObjectiveGrads {
            img_emb: DenseMatrix::zeros(batch.img_emb.rows(), batch.img_emb.cols()),
            txt_emb: DenseMatrix::zeros(batch.txt_emb.rows(), batch.txt_emb.cols()),
            img_probs: DenseMatrix::zeros(batch.img_probs.rows(), batch.img_probs.cols()),
            txt_probs: DenseMatrix::zeros(batch.txt_probs.rows(), batch.txt_probs.cols()),
        }
    }
}

/// Unweighted component values of a composite objective and its weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub triplet: f64,
    pub ce: f64,
    pub entropy: f64,
    pub gce: f64,
    pub total: f64,
}

impl LossParts {
    pub fn clean_total(triplet: f64, ce: f64, entropy: f64, w: &LossWeights) -> Self {
        LossParts {
            triplet,
            ce,
            entropy,
            gce: 0.0,
            total: w.lambda_t * triplet + w.lambda_ce * ce + w.lambda_en * entropy,
        }
    }

    pub fn ambiguous_total(triplet: f64, gce: f64, entropy: f64, w: &LossWeights) -> Self {
        LossParts {
            triplet,
            ce: 0.0,
            entropy,
            gce,
            total: w.lambda_t * triplet + w.lambda_gce * gce + w.lambda_en * entropy,
        }
    }
}

/// Adds the triplet term's gradient, scaled by `weight`, into the embedding grads.
fn add_triplet_grads(
    batch: &BatchOutputs<'_>,
    t: &TripletLoss,
    weight: f64,
    grads: &mut ObjectiveGrads,
) -> Result<()> {
    let mut d_sim = t.grad.clone();
    d_sim.scale(weight);
    // S = E_i E_tᵀ  ⇒  dE_i = dS E_t,  dE_t = dSᵀ E_i
    grads.img_emb.add_assign(&d_sim.matmul(batch.txt_emb)?)?;
    grads.txt_emb.add_assign(&d_sim.transposed_matmul(batch.img_emb)?)?;
    Ok(())
}

fn batch_sim(batch: &BatchOutputs<'_>) -> Result<DenseMatrix> {
    batch.img_emb.matmul_transposed(batch.txt_emb)
}

/// `λ_t·L_triplet + λ_ce·L_CE + λ_en·L_en` over a clean batch, with text
/// pseudo-labels `argmax q` as CE targets and `L_en` the uniformity penalty.
pub fn clean_loss(
    batch: &BatchOutputs<'_>,
    margins: &[f64],
    w: &LossWeights,
) -> Result<(LossParts, ObjectiveGrads)> {
    let mut grads = ObjectiveGrads::zeros(batch);
    let t = triplet_loss(&batch_sim(batch)?, margins)?;
    add_triplet_grads(batch, &t, w.lambda_t, &mut grads)?;
    let targets: Vec<usize> = (0..batch.txt_probs.rows())
        .map(|i| argmax(batch.txt_probs.row(i)))
        .collect();
    let ce = ce_loss(batch.img_probs, &targets)?;
    let en = entropy_penalty(batch.img_probs)?;
    let mut d = ce.grad;
    d.scale(w.lambda_ce);
    let mut d_en = en.grad;
    d_en.scale(w.lambda_en);
    d.add_assign(&d_en)?;
    grads.img_probs = d;
    Ok((LossParts::clean_total(t.loss, ce.loss, en.loss, w), grads))
}

/// Triplet loss over rematched (refinable image, clean caption) pairs. `caption_keys`
/// identifies the chosen caption so that two images rematched to the same caption
/// are not used as each other's negatives.
pub fn refinable_loss(
    batch: &BatchOutputs<'_>,
    margins: &[f64],
    caption_keys: &[usize],
    w: &LossWeights,
) -> Result<(LossParts, ObjectiveGrads)> {
    let mut grads = ObjectiveGrads::zeros(batch);
    let t = triplet_loss_keyed(&batch_sim(batch)?, margins, Some(caption_keys))?;
    add_triplet_grads(batch, &t, w.lambda_t, &mut grads)?;
    let parts = LossParts {
        triplet: t.loss,
        total: w.lambda_t * t.loss,
        ..LossParts::default()
    };
    Ok((parts, grads))
}

/// `λ_t·L_triplet + λ_gce·L_GCE + λ_en·L_en` over an ambiguous batch, each image
/// scored against its own (possibly mismatched) caption.
pub fn ambiguous_loss(
    batch: &BatchOutputs<'_>,
    margins: &[f64],
    w: &LossWeights,
) -> Result<(LossParts, ObjectiveGrads)> {
    let mut grads = ObjectiveGrads::zeros(batch);
    let t = triplet_loss(&batch_sim(batch)?, margins)?;
    add_triplet_grads(batch, &t, w.lambda_t, &mut grads)?;
    let gce = gce_loss(batch.img_probs, batch.txt_probs, w.gce_gamma)?;
    let en = entropy_penalty(batch.img_probs)?;
    let mut dp = gce.grad_p;
    dp.scale(w.lambda_gce);
    let mut d_en = en.grad;
    d_en.scale(w.lambda_en);
    dp.add_assign(&d_en)?;
    let mut dq = gce.grad_q;
    dq.scale(w.lambda_gce);
    grads.img_probs = dp;
    grads.txt_probs = dq;
    Ok((LossParts::ambiguous_total(t.loss, gce.loss, en.loss, w), grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, layers, Rng};

    fn random_probs(b: usize, k: usize, rng: &mut Rng) -> DenseMatrix {
        let logits =
            DenseMatrix::from_vec(b, k, (0..b * k).map(|_| rng.normal() * 1.5).collect()).unwrap();
        layers::softmax_rows(&logits)
    }

    #[test]
    fn margin_endpoints_and_midpoint() {
        assert_eq!(adaptive_margin(0.0, 10.0, 0.2).unwrap(), 0.0);
        assert_eq!(adaptive_margin(1.0, 10.0, 0.2).unwrap(), 0.2);
        let mid = adaptive_margin(0.5, 10.0, 0.2).unwrap();
        assert!((mid - (10f64.sqrt() - 1.0) / 9.0 * 0.2).abs() < 1e-15);
        assert!((mid - 0.04805).abs() < 1e-5);
        assert!(adaptive_margin(0.5, 1.0, 0.2).is_err());
    }

    #[test]
    fn identity_similarity_has_zero_triplet_loss() {
        let t = triplet_loss(&DenseMatrix::identity(4), &[0.2; 4]).unwrap();
        assert_eq!(t.loss, 0.0);
        assert!(t.grad.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn worst_case_triplet_arithmetic() {
        // S_ii = 0, every negative 1: each pair pays 2 × (0.2 − 0 + 1) = 2.4
        let mut s = DenseMatrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    s[(i, j)] = 1.0;
                }
            }
        }
        let t = triplet_loss(&s, &[0.2; 3]).unwrap();
        assert!((t.loss - 3.0 * 2.4).abs() < 1e-12);
        assert!(triplet_loss(&DenseMatrix::zeros(1, 1), &[0.2]).is_err());
    }

    /// Exhaustive oracle: scan every negative, keep the max, apply both hinges.
    fn triplet_oracle(s: &DenseMatrix, m: &[f64]) -> f64 {
        let b = s.rows();
        let mut total = 0.0;
        for i in 0..b {
            let mut best_t = f64::NEG_INFINITY;
            let mut best_i = f64::NEG_INFINITY;
            for j in 0..b {
                if j != i {
                    best_t = best_t.max(s[(i, j)]);
                    best_i = best_i.max(s[(j, i)]);
                }
            }
            total += (m[i] - s[(i, i)] + best_t).max(0.0);
            total += (m[i] - s[(i, i)] + best_i).max(0.0);
        }
        total
    }

    #[test]
    fn triplet_matches_exhaustive_oracle() {
        let mut rng = Rng::new(29);
        let s = DenseMatrix::from_vec(8, 8, (0..64).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .unwrap();
        let m: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 0.2)).collect();
        assert_eq!(triplet_loss(&s, &m).unwrap().loss, triplet_oracle(&s, &m));
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = Rng::new(30);
        let s0: Vec<f64> = (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let m: Vec<f64> = vec![0.2; 6];
        let err = grad_check(
            |s: &[f64]| {
                let t = triplet_loss(&DenseMatrix::from_vec(6, 6, s.to_vec())?, &m)?;
                Ok((t.loss, t.grad.into_vec()))
            },
            &s0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn keyed_triplet_skips_shared_captions() {
        // pairs 0 and 1 share caption key 7; their cross similarity is ignored
        let s = DenseMatrix::from_rows(&[
            vec![0.5, 0.9, 0.0],
            vec![0.9, 0.5, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        let plain = triplet_loss(&s, &[0.2; 3]).unwrap().loss;
        let keyed = triplet_loss_keyed(&s, &[0.2; 3], Some(&[7, 7, 3])).unwrap().loss;
        assert!(plain > keyed);
        // pairs 0/1 only see the column/row of pair 2: [0.2 − 0.5 + 0]⁺ = 0
        assert_eq!(keyed, 0.0);
    }

    #[test]
    fn ce_examples() {
        let onehot = DenseMatrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(ce_loss(&onehot, &[1]).unwrap().loss, 0.0);
        let uniform = DenseMatrix::from_vec(2, 256, vec![1.0 / 256.0; 512]).unwrap();
        let l = ce_loss(&uniform, &[3, 200]).unwrap().loss;
        assert!((l - 256f64.ln()).abs() < 1e-12);
        assert!((l - 5.545).abs() < 1e-3);
        // clamped target: finite loss, zero gradient
        let z = ce_loss(&onehot, &[0]).unwrap();
        assert!((z.loss + PROB_EPS.ln()).abs() < 1e-12);
        assert_eq!(z.grad[(0, 0)], 0.0);
        assert!(matches!(ce_loss(&onehot, &[3]), Err(PcsrError::Logic(_))));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let p = random_probs(4, 5, &mut rng);
        let targets = [0, 3, 2, 2];
        let err = grad_check(
            |v: &[f64]| {
                let l = ce_loss(&DenseMatrix::from_vec(4, 5, v.to_vec())?, &targets)?;
                Ok((l.loss, l.grad.into_vec()))
            },
            p.as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn entropy_examples() {
        // identical one-hot rows: p̄ is one-hot, zero entries hit the clamp, value 0
        let rows = vec![vec![0.0, 1.0, 0.0, 0.0]; 3];
        let onehot = DenseMatrix::from_rows(&rows).unwrap();
        let e = entropy_reg(&onehot).unwrap();
        assert_eq!(e.loss, 0.0);
        assert!(e.grad.is_finite());
        // mean uniform over K (each row one-hot on a different class)
        let k = 4;
        let eye = DenseMatrix::identity(k);
        let e = entropy_reg(&eye).unwrap();
        assert!((e.loss - (k as f64).ln()).abs() < 1e-12);
        assert!(entropy_penalty(&eye).unwrap().loss.abs() < 1e-12);
        assert!((entropy_penalty(&onehot).unwrap().loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_gradients_match_finite_differences() {
        let mut rng = Rng::new(33);
        let p = random_probs(5, 4, &mut rng);
        for f in [entropy_reg, entropy_penalty] {
            let err = grad_check(
                |v: &[f64]| {
                    let l = f(&DenseMatrix::from_vec(5, 4, v.to_vec())?)?;
                    Ok((l.loss, l.grad.into_vec()))
                },
                p.as_slice(),
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-6, "{err}");
        }
    }

    #[test]
    fn gce_examples() {
        let p = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(gce_loss(&p, &p, 0.7).unwrap().loss, 0.0);

        let p = DenseMatrix::from_rows(&[vec![0.5, 0.3, 0.2]]).unwrap();
        let q = DenseMatrix::from_rows(&[vec![0.5, 0.1, 0.4]]).unwrap();
        let l = gce_loss(&p, &q, 0.7).unwrap().loss;
        let expected = 2.0 * (1.0 - 0.5f64.powf(0.7)) / 0.7;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 1.0984).abs() < 1e-4);

        let l1 = gce_loss(&p, &q, 1.0).unwrap().loss;
        assert_eq!(l1, (1.0 - 0.5) + (1.0 - 0.5));
        assert!(gce_loss(&p, &q, 0.0).is_err());
    }

    #[test]
    fn gce_gradient_matches_finite_differences() {
        let mut rng = Rng::new(35);
        let p = random_probs(4, 5, &mut rng);
        let q = random_probs(4, 5, &mut rng);
        let mut theta = p.as_slice().to_vec();
        theta.extend_from_slice(q.as_slice());
        let err = grad_check(
            |v: &[f64]| {
                let p = DenseMatrix::from_vec(4, 5, v[..20].to_vec())?;
                let q = DenseMatrix::from_vec(4, 5, v[20..].to_vec())?;
                let l = gce_loss(&p, &q, 0.7)?;
                let mut g = l.grad_p.into_vec();
                g.extend(l.grad_q.into_vec());
                Ok((l.loss, g))
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn composite_weighting() {
        let w = LossWeights::default();
        assert_eq!(LossParts::clean_total(0.0, 0.0, 0.0, &w).total, 0.0);
        assert!((LossParts::clean_total(0.5, 0.2, 0.01, &w).total - 0.8).abs() < 1e-12);
        assert_eq!(LossParts::ambiguous_total(0.0, 0.0, 0.0, &w).total, 0.0);
        assert!((LossParts::ambiguous_total(0.3, 0.4, 0.02, &w).total - 0.9).abs() < 1e-12);
    }

    #[test]
    fn rematch_examples() {
        let pool = DenseMatrix::from_rows(&[
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.7, 0.2, 0.1],
        ])
        .unwrap();
        assert_eq!(rematch_caption(&[0.3, 0.3, 0.4], &pool).unwrap(), 1);
        let eye = DenseMatrix::identity(4);
        assert_eq!(rematch_caption(&[0.0, 0.0, 1.0, 0.0], &eye).unwrap(), 2);
        assert!(rematch_caption(&[1.0], &DenseMatrix::zeros(0, 1)).is_err());
    }

    #[test]
    fn rematch_matches_exhaustive_argmax() {
        let mut rng = Rng::new(37);
        let pool = random_probs(50, 8, &mut rng);
        let p = random_probs(1, 8, &mut rng);
        let mut best = (0, -1.0);
        for j in 0..50 {
            let (a, b) = (p.row(0), pool.row(j));
            let cos = crate::numerics::dot(a, b)
                / (crate::numerics::norm(a) * crate::numerics::norm(b));
            if cos > best.1 {
                best = (j, cos);
            }
        }
        assert_eq!(rematch_caption(p.row(0), &pool).unwrap(), best.0);
    }

    #[test]
    fn perfect_rematched_structure_has_zero_loss() {
        let e = DenseMatrix::identity(3);
        let probs = DenseMatrix::from_vec(3, 2, vec![0.5; 6]).unwrap();
        let batch = BatchOutputs {
            img_emb: &e,
            txt_emb: &e,
            img_probs: &probs,
            txt_probs: &probs,
        };
        let (parts, _) =
            refinable_loss(&batch, &[0.2; 3], &[0, 1, 2], &LossWeights::default()).unwrap();
        assert_eq!(parts.total, 0.0);
        let one = DenseMatrix::identity(1);
        let p1 = DenseMatrix::from_vec(1, 2, vec![0.5; 2]).unwrap();
        let single = BatchOutputs {
            img_emb: &one,
            txt_emb: &one,
            img_probs: &p1,
            txt_probs: &p1,
        };
        assert!(refinable_loss(&single, &[0.2], &[0], &LossWeights::default()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn margin_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let ml = adaptive_margin(lo, 10.0, 0.2).unwrap();
                let mh = adaptive_margin(hi, 10.0, 0.2).unwrap();
                prop_assert!(ml <= mh);
                prop_assert!((0.0..=0.2).contains(&ml) && (0.0..=0.2).contains(&mh));
            }

            #[test]
            fn triplet_weakly_decreases_with_diagonal(
                vals in proptest::collection::vec(-1.0f64..1.0, 25),
                bump in 0.0f64..0.5,
                which in 0usize..5,
            ) {
                let s = DenseMatrix::from_vec(5, 5, vals).unwrap();
                let mut raised = s.clone();
                raised[(which, which)] += bump;
                let a = triplet_loss(&s, &[0.2; 5]).unwrap().loss;
                let b = triplet_loss(&raised, &[0.2; 5]).unwrap().loss;
                prop_assert!(b <= a + 1e-12);
                prop_assert!(a >= 0.0);
            }

            #[test]
            fn gce_monotone_in_target_prob(x in 0.05f64..0.9, dx in 0.0f64..0.09, gamma in 0.05f64..=1.0) {
                // two-class rows; q̂ = 0 so the p term reads p[0]
                let mk = |v: f64| DenseMatrix::from_rows(&[vec![v, 1.0 - v]]).unwrap();
                let q = DenseMatrix::from_rows(&[vec![0.95, 0.05]]).unwrap();
                let lo = gce_loss(&mk(x), &q, gamma).unwrap().loss;
                let hi = gce_loss(&mk(x + dx), &q, gamma).unwrap().loss;
                // p̂ may flip from 1 to 0 as p[0] crosses 0.5, which only lowers the q term
                prop_assert!(hi <= lo + 1e-12);
                prop_assert!(lo >= 0.0);
            }
        }
    }
}
