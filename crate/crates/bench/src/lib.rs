//! Shared fixtures for the pipeline benchmarks.

use pcsr::data::{generate_synthetic, inject_noise_into, SyntheticConfig};
use pcsr::trainer::{init_params, TrainConfig};
use pcsr::{ModelParams, PairDataset, Rng};

/// Synthetic dataset of `n` pairs with 40% of the training pairs mismatched.
pub fn noisy_dataset(n: usize) -> PairDataset {
    let ds = generate_synthetic(&SyntheticConfig {
        n_pairs: n,
        ..SyntheticConfig::default()
    })
    .expect("valid generator config");
    let train = ds.split.train.clone();
    inject_noise_into(&ds, &train, 0.4, 42).expect("valid noise ratio")
}

/// Freshly initialized model for `ds` under the default config.
pub fn model(ds: &PairDataset) -> ModelParams {
    init_params(&TrainConfig::default(), ds).expect("valid model config")
}

/// Bimodal loss sample shaped like a clean/noisy split.
pub fn bimodal_losses(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            if rng.next_f64() < 0.6 {
                0.2 + 0.05 * rng.normal()
            } else {
                0.7 + 0.1 * rng.normal()
            }
        })
        .collect()
}
