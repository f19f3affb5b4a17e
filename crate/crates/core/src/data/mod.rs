//! Paired image/text features, noise injection, batching and file formats.

mod batch;
mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{PcsrError, Result};
use crate::numerics::{DenseMatrix, Rng};

pub use batch::batch_iter;
pub use io::{load_csv_features, load_dataset, save_dataset, DatasetHeader, DATASET_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticConfig};

/// Train/validation/test partition of image indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitSpec {
    /// Contiguous split: the first `train_frac·n` indices train, the next `val_frac·n` validate,
    /// the rest test.
    pub fn contiguous(n: usize, train_frac: f64, val_frac: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_frac)
            || !(0.0..=1.0).contains(&val_frac)
            || train_frac + val_frac > 1.0
        {
            return Err(PcsrError::config(format!(
                "invalid split fractions {train_frac}/{val_frac}"
            )));
        }
        let n_train = (train_frac * n as f64).round() as usize;
        let n_val = ((val_frac * n as f64).round() as usize).min(n - n_train);
        Ok(SplitSpec {
            train: (0..n_train).collect(),
            val: (n_train..n_train + n_val).collect(),
            test: (n_train + n_val..n).collect(),
        })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(PcsrError::Logic(format!("split index {i} out of range {n}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(PcsrError::Logic(format!("split index {i} appears twice")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(PcsrError::Logic(format!("split does not cover index {i}")));
        }
        Ok(())
    }

    pub fn get(&self, which: SplitName) -> &[usize] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = PcsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            other => Err(PcsrError::config(format!("unknown split `{other}`"))),
        }
    }
}

/// Aligned image and text features plus the training correspondence.
///
/// Text `t` is a caption of image `t / captions_per_image`; `true_of[i]` is the
/// first caption of image `i`. `pair_of[i]` is the caption the training set
/// claims for image `i`, which differs from `true_of[i]` for corrupted pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDataset {
    pub image_feats: DenseMatrix,
    pub text_feats: DenseMatrix,
    pub pair_of: Vec<usize>,
    pub true_of: Vec<usize>,
    pub captions_per_image: usize,
    pub latent_class: Option<Vec<usize>>,
    pub n_classes: usize,
    pub split: SplitSpec,
    pub seed: u64,
    /// Fraction of the training split whose pairs were mismatched.
    pub noise_ratio: f64,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.image_feats.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_img(&self) -> usize {
        self.image_feats.cols()
    }

    pub fn d_txt(&self) -> usize {
        self.text_feats.cols()
    }

    pub fn captions_of(&self, image: usize) -> std::ops::Range<usize> {
        image * self.captions_per_image..(image + 1) * self.captions_per_image
    }

    pub fn image_of_caption(&self, text: usize) -> usize {
        text / self.captions_per_image
    }

    pub fn is_corrupted(&self, image: usize) -> bool {
        self.pair_of[image] != self.true_of[image]
    }

    pub fn corruption_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.is_corrupted(i)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(PcsrError::EmptyDataset);
        }
        if self.captions_per_image == 0 {
            return Err(PcsrError::config("captions_per_image must be positive"));
        }
        if self.text_feats.rows() != n * self.captions_per_image {
            return Err(PcsrError::config(format!(
                "{} texts for {n} images with {} captions each",
                self.text_feats.rows(),
                self.captions_per_image
            )));
        }
        if self.pair_of.len() != n || self.true_of.len() != n {
            return Err(PcsrError::config("pair_of/true_of must cover every image"));
        }
        let n_text = self.text_feats.rows();
        if let Some(&t) = self.pair_of.iter().chain(&self.true_of).find(|&&t| t >= n_text) {
            return Err(PcsrError::config(format!("text index {t} out of range {n_text}")));
        }
        for (i, &t) in self.true_of.iter().enumerate() {
            if self.image_of_caption(t) != i {
                return Err(PcsrError::config(format!(
                    "true_of[{i}] = {t} is not a caption of image {i}"
                )));
            }
        }
        if let Some(classes) = &self.latent_class {
            if classes.len() != n {
                return Err(PcsrError::config("latent_class must cover every image"));
            }
            if let Some(&c) = classes.iter().find(|&&c| c >= self.n_classes) {
                return Err(PcsrError::config(format!("latent class {c} out of range")));
            }
        }
        self.split.validate(n)
    }
}

/// Mismatches `⌊ratio·N⌋` pairs over all images. See [`inject_noise_into`].
pub fn inject_noise(ds: &PairDataset, ratio: f64, seed: u64) -> Result<PairDataset> {
    let all: Vec<usize> = (0..ds.len()).collect();
    inject_noise_into(ds, &all, ratio, seed)
}

/// Mismatches `⌊ratio·|subset|⌋` pairs drawn uniformly from `subset`.
///
/// The selected images trade captions among themselves through a random
/// derangement, so every selected pair ends up with a caption that is not one of
/// its own. A selection of exactly one image cannot be deranged; it is widened
/// to two. Feature matrices are never touched.
pub fn inject_noise_into(
    ds: &PairDataset,
    subset: &[usize],
    ratio: f64,
    seed: u64,
) -> Result<PairDataset> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(PcsrError::config(format!("ratio must be < 1 (and ≥ 0), got {ratio}")));
    }
    let mut out = ds.clone();
    out.noise_ratio = ratio;
    let mut count = (ratio * subset.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(out);
    }
    if count == 1 {
        if subset.len() < 2 {
            return Err(PcsrError::config("cannot mismatch a single pair"));
        }
        count = 2;
    }
    let mut rng = Rng::new(seed);
    for _attempt in 0..1000 {
        let picks = rng.sample_without_replacement(subset.len(), count);
        let selected: Vec<usize> = picks.iter().map(|&p| subset[p]).collect();
        let mut targets: Vec<usize> = selected.iter().map(|&i| ds.pair_of[i]).collect();
        for _ in 0..100 {
            rng.shuffle(&mut targets);
            let ok = selected
                .iter()
                .zip(&targets)
                .all(|(&i, &t)| ds.image_of_caption(t) != i);
            if ok {
                for (&i, &t) in selected.iter().zip(&targets) {
                    out.pair_of[i] = t;
                }
                return Ok(out);
            }
        }
    }
    Err(PcsrError::config("could not find a derangement of the selected captions"))
}
