//! Warmup, per-epoch division and the three-stage optimization schedule.

mod config;

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, PairDataset, SplitName};
use crate::division::{
    fit_gmm_em, partition_noisy, per_pair_loss, ConsistencyTracker, DivisionResult, GmmModel,
    ThresholdController, MIN_GMM_SAMPLES,
};
use crate::encoders::{ModelConfig, ModelParams, ParamGroup};
use crate::error::{PcsrError, Result};
use crate::eval::{audit_division, evaluate, DivisionAudit, RetrievalReport};
use crate::losses::{
    ambiguous_loss, clean_loss, pair_margins, refinable_loss, rematch_caption, BatchOutputs,
    LossParts, LossWeights, ObjectiveGrads,
};
use crate::numerics::{adam_step, argmax, layers, AdamConfig, AdamState, DenseMatrix, Rng};

pub use config::{TrainConfig, Variant};

const INIT_STREAM: u64 = 0;

fn warmup_stream(epoch: usize) -> u64 {
    (1 << 32) | epoch as u64
}

fn stage_stream(epoch: usize, subset: u64) -> u64 {
    (2 << 32) | ((epoch as u64) << 4) | subset
}

/// Adam state for every parameter tensor.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new(params: &mut ModelParams, cfg: AdamConfig) -> Self {
        let states = params
            .tensors_mut()
            .iter()
            .map(|(_, p, _)| AdamState::new(p.len()))
            .collect();
        Optimizer { cfg, states }
    }

    /// Steps every tensor. With `classifier` false the classifier is skipped
    /// entirely, and any gradient found on it is a provenance error.
    pub fn step(&mut self, params: &mut ModelParams, classifier: bool) -> Result<()> {
        for ((group, values, grads), state) in params.tensors_mut().into_iter().zip(&mut self.states) {
            if group == ParamGroup::Classifier && !classifier {
                if grads.iter().any(|&g| g != 0.0) {
                    return Err(PcsrError::Logic(
                        "pseudo-classifier received gradient from a non-clean batch".into(),
                    ));
                }
                continue;
            }
            adam_step(values, grads, state, &self.cfg)?;
        }
        Ok(())
    }
}

/// Objective applied to one batch.
#[derive(Debug, Clone, Copy)]
pub enum BatchKind<'a> {
    /// Fixed-margin triplet loss on claimed pairs.
    Warmup { caption_keys: &'a [usize] },
    Clean,
    Refinable { caption_keys: &'a [usize] },
    Ambiguous,
}

impl BatchKind<'_> {
    fn trains_classifier(&self) -> bool {
        matches!(self, BatchKind::Clean)
    }
}

/// Runs one batch forward and backward, accumulating parameter gradients.
///
/// `margins` defaults to the adaptive margin of each pair's pseudo-distributions;
/// margins are constants of the backward pass either way. Gradients w.r.t. class
/// probabilities reach the classifier weights only for clean batches; for other
/// batches they still flow into the encoders.
pub fn batch_gradients(
    params: &mut ModelParams,
    images: DenseMatrix,
    texts: DenseMatrix,
    kind: BatchKind<'_>,
    margins: Option<&[f64]>,
    w: &LossWeights,
) -> Result<LossParts> {
    let img = params.image.forward_batch(images)?;
    let txt = params.text.forward_batch(texts)?;
    let img_probs = params.classify_batch(&img.embedding)?;
    let txt_probs = params.classify_batch(&txt.embedding)?;
    let batch = BatchOutputs {
        img_emb: &img.embedding,
        txt_emb: &txt.embedding,
        img_probs: &img_probs,
        txt_probs: &txt_probs,
    };
    let owned;
    let margins = match margins {
        Some(m) => m,
        None => {
            owned = match kind {
                BatchKind::Warmup { .. } => vec![w.margin_alpha; img_probs.rows()],
                _ => pair_margins(&img_probs, &txt_probs, w)?,
            };
            &owned
        }
    };
    let (parts, grads) = match kind {
        // keyed triplet only, as for rematched pairs
        BatchKind::Warmup { caption_keys } | BatchKind::Refinable { caption_keys } => {
            refinable_loss(&batch, margins, caption_keys, w)?
        }
        BatchKind::Clean => clean_loss(&batch, margins, w)?,
        BatchKind::Ambiguous => ambiguous_loss(&batch, margins, w)?,
    };
    let ObjectiveGrads {
        img_emb: mut d_img,
        txt_emb: mut d_txt,
        img_probs: dp,
        txt_probs: dq,
    } = grads;
    for (probs, d_probs, emb, d_emb) in [
        (&img_probs, dp, &img.embedding, &mut d_img),
        (&txt_probs, dq, &txt.embedding, &mut d_txt),
    ] {
        if d_probs.as_slice().iter().all(|&g| g == 0.0) {
            continue;
        }
        let d_logits = layers::softmax_rows_backward(probs, &d_probs);
        let d_from_classifier = if kind.trains_classifier() {
            params.classifier.backward_batch(emb, &d_logits)?
        } else {
            params.classifier.input_grad_batch(&d_logits)?
        };
        d_emb.add_assign(&d_from_classifier)?;
    }
    params.image.backward_batch(&img, &d_img)?;
    params.text.backward_batch(&txt, &d_txt)?;
    Ok(parts)
}

fn ensure_finite(value: f64, what: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(PcsrError::Numeric(format!("non-finite loss {value} in {}", what())))
    }
}

/// Trains the encoders on every training pair with the fixed-margin triplet loss.
/// The classifier is left untouched. Returns the mean batch loss of each epoch.
pub fn warmup(
    params: &mut ModelParams,
    optim: &mut Optimizer,
    ds: &PairDataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let w = cfg.weights();
    let mut means = Vec::with_capacity(cfg.warmup_epochs);
    for epoch in 1..=cfg.warmup_epochs {
        let batches = batch_iter(&ds.split.train, cfg.batch_size, warmup_stream(epoch), cfg.seed)?;
        let mut total = 0.0;
        for batch in &batches {
            let captions: Vec<usize> = batch.iter().map(|&i| ds.pair_of[i]).collect();
            params.zero_grad();
            let parts = batch_gradients(
                params,
                ds.image_feats.select_rows(batch),
                ds.text_feats.select_rows(&captions),
                BatchKind::Warmup {
                    caption_keys: &captions,
                },
                None,
                &w,
            )?;
            ensure_finite(parts.total, || format!("warmup epoch {epoch}"))?;
            optim.step(params, false)?;
            total += parts.total;
        }
        means.push(total / batches.len().max(1) as f64);
    }
    Ok(means)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetSizes {
    pub clean: usize,
    pub refinable: usize,
    pub ambiguous: usize,
}

/// Mean batch objective per subset; 0 for a subset that was not trained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetLosses {
    pub clean: f64,
    pub refinable: f64,
    pub ambiguous: f64,
}

/// What one stage epoch did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub losses: SubsetLosses,
    pub clean_batches: usize,
    pub refinable_batches: usize,
    pub ambiguous_batches: usize,
    /// Optimizer steps that touched the pseudo-classifier; all come from clean batches.
    pub classifier_steps: usize,
}

/// Subsets a variant trains on at a given stage.
fn active_subsets(variant: Variant, stage: u8) -> (bool, bool) {
    match variant {
        Variant::Full => (stage >= 2, stage >= 3),
        Variant::CleanOnly | Variant::NoDivision => (false, false),
        Variant::WithoutRefinable => (false, stage >= 3),
        Variant::WithoutAmbiguous => (stage >= 2, false),
    }
}

/// One epoch of staged optimization over this epoch's division.
///
/// Stage 1 trains on clean pairs; stage 2 adds the refinable images, each paired
/// with the clean caption whose pseudo-distribution is closest to its own; stage 3
/// adds the ambiguous pairs with their own captions. Batches of the active subsets
/// are interleaved round-robin and each takes one optimizer step.
pub fn run_stage_epoch(
    params: &mut ModelParams,
    optim: &mut Optimizer,
    ds: &PairDataset,
    division: &DivisionResult,
    stage: u8,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<StageOutcome> {
    if !(1..=3).contains(&stage) {
        return Err(PcsrError::config(format!("stage must be 1, 2 or 3, got {stage}")));
    }
    if division.clean.is_empty() {
        return Err(PcsrError::Training(format!(
            "epoch {epoch}: clean set is empty, nothing to anchor training on"
        )));
    }
    let w = cfg.weights();
    let (use_refinable, use_ambiguous) = active_subsets(cfg.variant, stage);
    let batches = |set: &[usize], active: bool, tag: u64| -> Result<Vec<Vec<usize>>> {
        if active {
            batch_iter(set, cfg.batch_size, stage_stream(epoch, tag), cfg.seed)
        } else {
            Ok(Vec::new())
        }
    };
    let clean_batches = batches(&division.clean, true, 1)?;
    let refinable_batches = batches(&division.refinable, use_refinable, 2)?;
    let ambiguous_batches = batches(&division.ambiguous, use_ambiguous, 3)?;

    // rematch pool: captions of the clean pairs, scored once per epoch
    let pool: Vec<usize> = division.clean.iter().map(|&i| ds.pair_of[i]).collect();
    let pool_probs = if refinable_batches.is_empty() {
        DenseMatrix::zeros(0, cfg.num_classes)
    } else {
        params.classify_batch(&params.embed_texts(&ds.text_feats.select_rows(&pool))?)?
    };

    let mut out = StageOutcome::default();
    let mut sums = SubsetLosses::default();
    let rounds = clean_batches
        .len()
        .max(refinable_batches.len())
        .max(ambiguous_batches.len());
    for r in 0..rounds {
        if let Some(batch) = clean_batches.get(r) {
            let captions: Vec<usize> = batch.iter().map(|&i| ds.pair_of[i]).collect();
            params.zero_grad();
            let parts = batch_gradients(
                params,
                ds.image_feats.select_rows(batch),
                ds.text_feats.select_rows(&captions),
                BatchKind::Clean,
                None,
                &w,
            )?;
            ensure_finite(parts.total, || format!("epoch {epoch}, clean batch {r}"))?;
            optim.step(params, true)?;
            sums.clean += parts.total;
            out.clean_batches += 1;
            out.classifier_steps += 1;
        }
        if let Some(batch) = refinable_batches.get(r) {
            let img_probs =
                params.classify_batch(&params.embed_images(&ds.image_feats.select_rows(batch))?)?;
            let keys = (0..batch.len())
                .map(|j| rematch_caption(img_probs.row(j), &pool_probs).map(|p| pool[p]))
                .collect::<Result<Vec<usize>>>()?;
            params.zero_grad();
            let parts = batch_gradients(
                params,
                ds.image_feats.select_rows(batch),
                ds.text_feats.select_rows(&keys),
                BatchKind::Refinable {
                    caption_keys: &keys,
                },
                None,
                &w,
            )?;
            ensure_finite(parts.total, || format!("epoch {epoch}, refinable batch {r}"))?;
            optim.step(params, false)?;
            sums.refinable += parts.total;
            out.refinable_batches += 1;
        }
        if let Some(batch) = ambiguous_batches.get(r) {
            let captions: Vec<usize> = batch.iter().map(|&i| ds.pair_of[i]).collect();
            params.zero_grad();
            let parts = batch_gradients(
                params,
                ds.image_feats.select_rows(batch),
                ds.text_feats.select_rows(&captions),
                BatchKind::Ambiguous,
                None,
                &w,
            )?;
            ensure_finite(parts.total, || format!("epoch {epoch}, ambiguous batch {r}"))?;
            optim.step(params, false)?;
            sums.ambiguous += parts.total;
            out.ambiguous_batches += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    out.losses = SubsetLosses {
        clean: mean(sums.clean, out.clean_batches),
        refinable: mean(sums.refinable, out.refinable_batches),
        ambiguous: mean(sums.ambiguous, out.ambiguous_batches),
    };
    Ok(out)
}

/// Controller readings of one division.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivisionStats {
    pub tau: f64,
    pub lambda_target: f64,
    /// Refinable share of the noisy set under the previous threshold, fed to the
    /// controller; absent when the noisy set is empty.
    pub lambda_current: Option<f64>,
    pub gmm: Option<GmmModel>,
    pub gmm_converged: bool,
}

/// Divides the training set for `epoch`: confidence split, prediction recording,
/// threshold update and refinable/ambiguous partition.
///
/// If every per-pair loss is identical the mixture is undefined and all pairs
/// count as clean.
pub fn divide_epoch(
    params: &ModelParams,
    ds: &PairDataset,
    cfg: &TrainConfig,
    tracker: &mut ConsistencyTracker,
    controller: &mut ThresholdController,
    epoch: usize,
) -> Result<(DivisionResult, DivisionStats)> {
    let train = &ds.split.train;
    let lambda_target = controller.lambda_target(epoch, cfg.total_epochs);
    if cfg.variant == Variant::NoDivision {
        let division = DivisionResult {
            clean: train.clone(),
            refinable: Vec::new(),
            ambiguous: Vec::new(),
            clean_posterior: vec![1.0; train.len()],
        };
        let stats = DivisionStats {
            tau: controller.tau,
            lambda_target,
            lambda_current: None,
            gmm: None,
            gmm_converged: false,
        };
        return Ok((division, stats));
    }
    let losses = per_pair_loss(params, ds, train, cfg.margin_alpha, cfg.batch_size)?;
    let (posterior, gmm, converged) = match fit_gmm_em(&losses, cfg.gmm_max_iters, cfg.gmm_tol) {
        Ok(fit) => (
            losses.iter().map(|&l| fit.model.posterior_clean(l)).collect(),
            Some(fit.model),
            fit.converged,
        ),
        Err(PcsrError::Degenerate(_)) => (vec![1.0; train.len()], None, false),
        Err(e) => return Err(e),
    };
    let (clean, noisy): (Vec<usize>, Vec<usize>) = (0..train.len())
        .partition(|&p| posterior[p] >= cfg.clean_threshold);
    let clean: Vec<usize> = clean.into_iter().map(|p| train[p]).collect();
    let noisy: Vec<usize> = noisy.into_iter().map(|p| train[p]).collect();

    let probs = params.classify_batch(&params.embed_images(&ds.image_feats.select_rows(train))?)?;
    let labels: Vec<usize> = (0..train.len()).map(|r| argmax(probs.row(r))).collect();
    tracker.record_predictions(train, &labels)?;

    let lambda_current = if noisy.is_empty() {
        None
    } else {
        let (r, _) = partition_noisy(&noisy, tracker, controller.tau);
        Some(r.len() as f64 / noisy.len() as f64)
    };
    if let Some(lambda) = lambda_current {
        controller.update(lambda, epoch, cfg.total_epochs)?;
    }
    let (refinable, ambiguous) = partition_noisy(&noisy, tracker, controller.tau);
    let division = DivisionResult {
        clean,
        refinable,
        ambiguous,
        clean_posterior: posterior,
    };
    division.check_partition(train)?;
    Ok((
        division,
        DivisionStats {
            tau: controller.tau,
            lambda_target,
            lambda_current,
            gmm,
            gmm_converged: converged,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub stage: u8,
    pub losses: SubsetLosses,
    pub tau: f64,
    pub lambda_target: f64,
    pub lambda_current: Option<f64>,
    pub sizes: SubsetSizes,
    pub gmm: Option<GmmModel>,
    pub gmm_converged: bool,
    pub clean_batches: usize,
    pub refinable_batches: usize,
    pub ambiguous_batches: usize,
    pub classifier_steps: usize,
    pub val: RetrievalReport,
    pub division: DivisionAudit,
}

impl EpochReport {
    fn floats(&self) -> Vec<f64> {
        let mut v = vec![
            self.losses.clean,
            self.losses.refinable,
            self.losses.ambiguous,
            self.tau,
            self.lambda_target,
            self.lambda_current.unwrap_or(0.0),
            self.val.rsum,
            self.val.i2t_r1,
            self.val.t2i_r1,
            self.division.clean_precision,
            self.division.clean_recall,
            self.division.corrupted_in_refinable,
            self.division.corrupted_in_ambiguous,
        ];
        if let Some(g) = &self.gmm {
            v.extend(g.mu.iter().chain(&g.sigma).chain(&g.pi));
        }
        v
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.floats().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(PcsrError::Numeric(format!("epoch {} produced non-finite values", self.epoch)))
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub params: ModelParams,
    pub reports: Vec<EpochReport>,
    pub warmup_losses: Vec<f64>,
    pub tracker: ConsistencyTracker,
    pub last_division: Option<DivisionResult>,
}

pub fn model_config(cfg: &TrainConfig, ds: &PairDataset) -> ModelConfig {
    ModelConfig {
        d_img: ds.d_img(),
        d_txt: ds.d_txt(),
        hidden: cfg.hidden,
        d_emb: cfg.d_emb,
        num_classes: cfg.num_classes,
    }
}

/// Initial parameters for a run: every run with the same seed starts here.
pub fn init_params(cfg: &TrainConfig, ds: &PairDataset) -> Result<ModelParams> {
    ModelParams::init(model_config(cfg, ds), &mut Rng::for_stream(cfg.seed, INIT_STREAM))
}

pub fn train(cfg: &TrainConfig, ds: &PairDataset) -> Result<TrainRun> {
    train_with(cfg, ds, |_, _| Ok(()))
}

/// [`train`], calling `observer` after every epoch with its report and the
/// parameters at the end of that epoch.
pub fn train_with<F>(cfg: &TrainConfig, ds: &PairDataset, mut observer: F) -> Result<TrainRun>
where
    F: FnMut(&EpochReport, &ModelParams) -> Result<()>,
{
    cfg.validate()?;
    ds.validate()?;
    if ds.split.train.len() < MIN_GMM_SAMPLES {
        return Err(PcsrError::config(format!(
            "training split needs at least {MIN_GMM_SAMPLES} pairs"
        )));
    }
    if ds.split.val.len() < 10 {
        return Err(PcsrError::config("validation split needs at least 10 images"));
    }
    let mut params = init_params(cfg, ds)?;
    let mut optim = Optimizer::new(&mut params, cfg.adam());
    let warmup_losses = warmup(&mut params, &mut optim, ds, cfg)?;
    let mut tracker = ConsistencyTracker::new(ds.len(), cfg.num_classes);
    let mut controller = cfg.controller();
    let mask = ds.corruption_mask();
    let mut reports = Vec::with_capacity(cfg.total_epochs);
    let mut last_division = None;
    for epoch in 1..=cfg.total_epochs {
        let (division, stats) = divide_epoch(&params, ds, cfg, &mut tracker, &mut controller, epoch)?;
        let stage = cfg.stage_of(epoch);
        let outcome = run_stage_epoch(&mut params, &mut optim, ds, &division, stage, epoch, cfg)?;
        if !params.flatten().iter().all(|v| v.is_finite()) {
            return Err(PcsrError::Numeric(format!("parameters became non-finite in epoch {epoch}")));
        }
        let report = EpochReport {
            epoch,
            stage,
            losses: outcome.losses,
            tau: stats.tau,
            lambda_target: stats.lambda_target,
            lambda_current: stats.lambda_current,
            sizes: SubsetSizes {
                clean: division.clean.len(),
                refinable: division.refinable.len(),
                ambiguous: division.ambiguous.len(),
            },
            gmm: stats.gmm,
            gmm_converged: stats.gmm_converged,
            clean_batches: outcome.clean_batches,
            refinable_batches: outcome.refinable_batches,
            ambiguous_batches: outcome.ambiguous_batches,
            classifier_steps: outcome.classifier_steps,
            val: evaluate(&params, ds, SplitName::Val)?,
            division: audit_division(&division, &mask)?,
        };
        report.check_finite()?;
        observer(&report, &params)?;
        reports.push(report);
        last_division = Some(division);
    }
    Ok(TrainRun {
        params,
        reports,
        warmup_losses,
        tracker,
        last_division,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, inject_noise_into, SyntheticConfig};
    use crate::numerics::grad_check;

    fn small_ds(noise: f64) -> PairDataset {
        let ds = generate_synthetic(&SyntheticConfig {
            n_pairs: 200,
            n_classes: 8,
            d_img: 12,
            d_txt: 10,
            seed: 7,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let train = ds.split.train.clone();
        inject_noise_into(&ds, &train, noise, 8).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            num_classes: 6,
            hidden: 16,
            d_emb: 8,
            batch_size: 32,
            warmup_epochs: 2,
            total_epochs: 6,
            ..TrainConfig::default()
        }
    }

    fn param_grad_error(kind_name: &str) -> f64 {
        let ds = small_ds(0.3);
        let cfg = small_cfg();
        let params = init_params(&cfg, &ds).unwrap();
        let w = cfg.weights();
        let rows: Vec<usize> = (0..6).collect();
        let captions: Vec<usize> = rows.iter().map(|&i| ds.pair_of[i]).collect();
        let imgs = ds.image_feats.select_rows(&rows);
        let txts = ds.text_feats.select_rows(&captions);
        let margins = [0.05, 0.1, 0.15, 0.2, 0.0, 0.12];
        let kind = |keys: &'static [usize]| match kind_name {
            "clean" => BatchKind::Clean,
            "refinable" => BatchKind::Refinable { caption_keys: keys },
            _ => BatchKind::Ambiguous,
        };
        const KEYS: [usize; 6] = [0, 1, 2, 3, 4, 5];
        // the ambiguous objective deliberately leaves the classifier out; check encoders only there
        let n_enc = {
            let total = params.flatten().len();
            total - params.classifier.weight.as_slice().len() - params.classifier.bias.len()
        };
        let theta = params.flatten();
        let check_len = if kind_name == "ambiguous" { n_enc } else { theta.len() };
        grad_check(
            |v: &[f64]| {
                let mut full = theta.clone();
                full[..check_len].copy_from_slice(v);
                let mut p = params.clone();
                p.load_flat(&full)?;
                p.zero_grad();
                let parts =
                    batch_gradients(&mut p, imgs.clone(), txts.clone(), kind(&KEYS), Some(&margins), &w)?;
                let mut g = p.flatten_grads();
                g.truncate(check_len);
                Ok((parts.total, g))
            },
            &theta[..check_len],
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn clean_batch_gradient_through_model() {
        let err = param_grad_error("clean");
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn refinable_batch_gradient_through_model() {
        let err = param_grad_error("refinable");
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn ambiguous_batch_gradient_through_model() {
        let err = param_grad_error("ambiguous");
        assert!(err <= 1e-5, "{err}");
    }

    #[test]
    fn non_clean_batches_leave_classifier_alone() {
        let ds = small_ds(0.3);
        let cfg = small_cfg();
        let mut params = init_params(&cfg, &ds).unwrap();
        let rows: Vec<usize> = (0..8).collect();
        let captions: Vec<usize> = rows.iter().map(|&i| ds.pair_of[i]).collect();
        params.zero_grad();
        batch_gradients(
            &mut params,
            ds.image_feats.select_rows(&rows),
            ds.text_feats.select_rows(&captions),
            BatchKind::Ambiguous,
            None,
            &cfg.weights(),
        )
        .unwrap();
        assert!(params.classifier.grad_weight.as_slice().iter().all(|&g| g == 0.0));
        let before = params.classifier.clone();
        let mut optim = Optimizer::new(&mut params, cfg.adam());
        optim.step(&mut params, false).unwrap();
        assert_eq!(params.classifier, before);
        // a stray classifier gradient on a non-clean step is refused
        params.classifier.grad_bias[0] = 1.0;
        assert!(matches!(optim.step(&mut params, false), Err(PcsrError::Logic(_))));
    }

    #[test]
    fn zero_warmup_leaves_params_unchanged() {
        let ds = small_ds(0.0);
        let cfg = TrainConfig {
            warmup_epochs: 0,
            ..small_cfg()
        };
        let mut params = init_params(&cfg, &ds).unwrap();
        let before = params.clone();
        let mut optim = Optimizer::new(&mut params, cfg.adam());
        assert!(warmup(&mut params, &mut optim, &ds, &cfg).unwrap().is_empty());
        assert_eq!(params, before);
    }

    #[test]
    fn warmup_leaves_classifier_and_is_deterministic() {
        let ds = small_ds(0.0);
        let cfg = small_cfg();
        let run = || {
            let mut params = init_params(&cfg, &ds).unwrap();
            let mut optim = Optimizer::new(&mut params, cfg.adam());
            warmup(&mut params, &mut optim, &ds, &cfg).unwrap();
            params
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.classifier, init_params(&cfg, &ds).unwrap().classifier);
    }

    #[test]
    fn empty_clean_set_is_a_training_error() {
        let ds = small_ds(0.3);
        let cfg = small_cfg();
        let mut params = init_params(&cfg, &ds).unwrap();
        let mut optim = Optimizer::new(&mut params, cfg.adam());
        let division = DivisionResult {
            clean: vec![],
            refinable: ds.split.train.clone(),
            ambiguous: vec![],
            clean_posterior: vec![0.0; ds.split.train.len()],
        };
        let err = run_stage_epoch(&mut params, &mut optim, &ds, &division, 2, 1, &cfg).unwrap_err();
        assert!(matches!(err, PcsrError::Training(_)));
    }

    #[test]
    fn stage_one_ignores_noisy_subsets() {
        let ds = small_ds(0.3);
        let cfg = small_cfg();
        let train = ds.split.train.clone();
        let (clean, rest) = train.split_at(100);
        let with_noisy = DivisionResult {
            clean: clean.to_vec(),
            refinable: rest[..30].to_vec(),
            ambiguous: rest[30..].to_vec(),
            clean_posterior: vec![0.5; train.len()],
        };
        let clean_only = DivisionResult {
            refinable: vec![],
            ambiguous: vec![],
            ..with_noisy.clone()
        };
        let run = |d: &DivisionResult, stage: u8| {
            let mut params = init_params(&cfg, &ds).unwrap();
            let mut optim = Optimizer::new(&mut params, cfg.adam());
            let out = run_stage_epoch(&mut params, &mut optim, &ds, d, stage, 1, &cfg).unwrap();
            (params, out)
        };
        assert_eq!(run(&with_noisy, 1).0, run(&clean_only, 1).0);
        // stage 2 with no refinable pairs is stage 1
        assert_eq!(run(&clean_only, 2).0, run(&clean_only, 1).0);
        let (_, out) = run(&with_noisy, 3);
        assert!(out.refinable_batches > 0 && out.ambiguous_batches > 0);
        assert_eq!(out.classifier_steps, out.clean_batches);
    }

    #[test]
    fn short_run_reports_and_partitions() {
        let ds = small_ds(0.3);
        let cfg = small_cfg();
        let run = train(&cfg, &ds).unwrap();
        assert_eq!(run.reports.len(), 6);
        assert_eq!(run.tracker.epochs_recorded(), 6);
        for r in &run.reports {
            let s = r.sizes;
            assert_eq!(s.clean + s.refinable + s.ambiguous, ds.split.train.len());
            assert_eq!(r.classifier_steps, r.clean_batches);
            r.val.check_invariants().unwrap();
        }
        let stages: Vec<u8> = run.reports.iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn identical_configs_give_identical_histories() {
        let ds = small_ds(0.3);
        let cfg = TrainConfig {
            total_epochs: 3,
            ..small_cfg()
        };
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn invalid_schedule_rejected() {
        let ds = small_ds(0.0);
        let cfg = TrainConfig {
            total_epochs: 1,
            warmup_epochs: 2,
            ..small_cfg()
        };
        assert!(matches!(train(&cfg, &ds), Err(PcsrError::Config(_))));
    }

    #[test]
    fn no_division_trains_every_pair_as_clean() {
        let ds = small_ds(0.3);
        let cfg = TrainConfig {
            total_epochs: 2,
            variant: Variant::NoDivision,
            ..small_cfg()
        };
        let run = train(&cfg, &ds).unwrap();
        for r in &run.reports {
            assert_eq!(r.sizes.clean, ds.split.train.len());
            assert_eq!(r.lambda_current, None);
        }
    }
}
