use serde::{Deserialize, Serialize};

use super::{PairDataset, SplitSpec};
use crate::error::{PcsrError, Result};
use crate::numerics::{DenseMatrix, Rng};

/// Parameters of the synthetic bimodal generator.
///
/// Every latent class owns an image prototype and a text prototype drawn from
/// `N(0, I)`. Sample `i` draws its class uniformly and an instance code
/// `z_i ~ N(0, I_latent)` shared by both modalities:
///
/// ```text
/// image_i = P_img[c] + σ · A_img z_i
/// text_i  = P_txt[c] + σ · A_txt z_i + σ · caption_noise · ε
/// ```
///
/// `A_img`, `A_txt` have `N(0, 1/latent_dim)` entries, so each coordinate of the
/// jitter has standard deviation close to `σ`. The shared code is what makes
/// instance-level retrieval learnable; with `σ = 0` all samples of a class coincide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub intra_class_noise: f64,
    pub latent_dim: usize,
    pub caption_noise: f64,
    pub captions_per_image: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_pairs: 2000,
            n_classes: 32,
            d_img: 64,
            d_txt: 48,
            intra_class_noise: 1.0,
            latent_dim: 16,
            caption_noise: 0.25,
            captions_per_image: 1,
            train_frac: 0.8,
            val_frac: 0.1,
            seed: 42,
        }
    }
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("finite gaussian draws")
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<PairDataset> {
    if cfg.n_classes < 1 || cfg.n_pairs < cfg.n_classes {
        return Err(PcsrError::config(format!(
            "need n_pairs ≥ n_classes ≥ 1, got {} pairs and {} classes",
            cfg.n_pairs, cfg.n_classes
        )));
    }
    if cfg.d_img == 0 || cfg.d_txt == 0 || cfg.latent_dim == 0 || cfg.captions_per_image == 0 {
        return Err(PcsrError::config("dimensions and caption count must be positive"));
    }
    if !(cfg.intra_class_noise >= 0.0) || !(cfg.caption_noise >= 0.0) {
        return Err(PcsrError::config("noise scales must be non-negative"));
    }
    let mut rng = Rng::new(cfg.seed);
    let img_protos = gaussian_matrix(cfg.n_classes, cfg.d_img, 1.0, &mut rng);
    let txt_protos = gaussian_matrix(cfg.n_classes, cfg.d_txt, 1.0, &mut rng);
    let mix_scale = 1.0 / (cfg.latent_dim as f64).sqrt();
    let img_mix = gaussian_matrix(cfg.d_img, cfg.latent_dim, mix_scale, &mut rng);
    let txt_mix = gaussian_matrix(cfg.d_txt, cfg.latent_dim, mix_scale, &mut rng);

    let n = cfg.n_pairs;
    let cpi = cfg.captions_per_image;
    let sigma = cfg.intra_class_noise;
    let mut images = DenseMatrix::zeros(n, cfg.d_img);
    let mut texts = DenseMatrix::zeros(n * cpi, cfg.d_txt);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.below(cfg.n_classes);
        classes.push(c);
        let z: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.normal()).collect();
        let row = images.row_mut(i);
        for (d, v) in row.iter_mut().enumerate() {
            let jitter: f64 = img_mix.row(d).iter().zip(&z).map(|(a, b)| a * b).sum();
            *v = img_protos[(c, d)] + sigma * jitter;
        }
        for k in 0..cpi {
            let row = texts.row_mut(i * cpi + k);
            for (d, v) in row.iter_mut().enumerate() {
                let jitter: f64 = txt_mix.row(d).iter().zip(&z).map(|(a, b)| a * b).sum();
                let own = rng.normal() * cfg.caption_noise;
                *v = txt_protos[(c, d)] + sigma * (jitter + own);
            }
        }
    }
    let true_of: Vec<usize> = (0..n).map(|i| i * cpi).collect();
    let ds = PairDataset {
        image_feats: images,
        text_feats: texts,
        pair_of: true_of.clone(),
        true_of,
        captions_per_image: cpi,
        latent_class: Some(classes),
        n_classes: cfg.n_classes,
        split: SplitSpec::contiguous(n, cfg.train_frac, cfg.val_frac)?,
        seed: cfg.seed,
        noise_ratio: 0.0,
    };
    ds.validate()?;
    Ok(ds)
}
