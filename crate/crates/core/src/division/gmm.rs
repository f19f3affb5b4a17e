use serde::{Deserialize, Serialize};

use crate::error::{PcsrError, Result};

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const MIN_GMM_SAMPLES: usize = 16;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Two-component 1-D Gaussian mixture. Component 0 has the lower mean (clean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
    pub pi: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood of the initial model followed by one entry per EM step.
    pub log_likelihoods: Vec<f64>,
    pub converged: bool,
}

fn log_normal(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - LN_SQRT_2PI
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl GmmModel {
    fn log_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.pi[k].ln() + log_normal(x, self.mu[k], self.sigma[k]))
    }

    /// Posterior probability of component 0, computed in log space.
    pub fn posterior_clean(&self, x: f64) -> f64 {
        let [a, b] = self.log_joint(x);
        (a - log_add(a, b)).exp()
    }

    pub fn log_likelihood(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let [a, b] = self.log_joint(x);
                log_add(a, b)
            })
            .sum()
    }

    fn sorted(mut self) -> Self {
        if self.mu[0] > self.mu[1] {
            self.mu.swap(0, 1);
            self.sigma.swap(0, 1);
            self.pi.swap(0, 1);
        }
        self
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits the mixture by EM.
///
/// Initialization puts the means at the 25th and 75th percentiles, both standard
/// deviations at half the sample standard deviation and equal weights. Iteration
/// stops once the log-likelihood gain drops below `tol`; after `max_iters` steps
/// without that happening the best model seen is returned with `converged = false`.
/// Losses whose 25th and 75th percentiles coincide start both components at the
/// same point, which EM can never split; they are reported as degenerate.
pub fn fit_gmm_em(losses: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    if losses.len() < MIN_GMM_SAMPLES {
        return Err(PcsrError::config(format!(
            "GMM fit needs at least {MIN_GMM_SAMPLES} samples, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|x| !x.is_finite()) {
        return Err(PcsrError::Numeric("non-finite loss passed to GMM fit".into()));
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[sorted.len() - 1] - sorted[0] <= 0.0 {
        return Err(PcsrError::Degenerate("all losses identical; GMM is undefined".into()));
    }
    let n = losses.len() as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let std = (losses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (q1, q3) = (percentile(&sorted, 0.25), percentile(&sorted, 0.75));
    if q3 - q1 <= 0.0 {
        return Err(PcsrError::Degenerate(format!(
            "quartiles coincide at {q1}; EM cannot separate two components"
        )));
    }
    let mut model = GmmModel {
        mu: [q1, q3],
        sigma: [(0.5 * std).max(SIGMA_FLOOR); 2],
        pi: [0.5, 0.5],
    };

    let mut resp = vec![0.0; losses.len()];
    let mut trace = Vec::with_capacity(max_iters + 1);
    let mut best = (f64::NEG_INFINITY, model);
    let mut converged = false;
    for step in 0..=max_iters {
        // E-step, scoring the current model on the way
        let mut ll = 0.0;
        for (r, &x) in resp.iter_mut().zip(losses) {
            let [a, b] = model.log_joint(x);
            let total = log_add(a, b);
            ll += total;
            *r = (a - total).exp();
        }
        if !ll.is_finite() {
            return Err(PcsrError::Numeric("GMM log-likelihood became non-finite".into()));
        }
        trace.push(ll);
        if ll > best.0 {
            best = (ll, model);
        }
        if step > 0 && ll - trace[step - 1] < tol {
            converged = true;
            break;
        }
        if step == max_iters {
            break;
        }
        // M-step
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        if n0 < 1e-12 || n1 < 1e-12 {
            return Err(PcsrError::Degenerate("a GMM component lost all mass".into()));
        }
        let mu0 = resp.iter().zip(losses).map(|(r, x)| r * x).sum::<f64>() / n0;
        let mu1 = resp.iter().zip(losses).map(|(r, x)| (1.0 - r) * x).sum::<f64>() / n1;
        let var0 = resp.iter().zip(losses).map(|(r, x)| r * (x - mu0).powi(2)).sum::<f64>() / n0;
        let var1 = resp
            .iter()
            .zip(losses)
            .map(|(r, x)| (1.0 - r) * (x - mu1).powi(2))
            .sum::<f64>()
            / n1;
        model = GmmModel {
            mu: [mu0, mu1],
            sigma: [var0.sqrt().max(SIGMA_FLOOR), var1.sqrt().max(SIGMA_FLOOR)],
            pi: [n0 / n, n1 / n],
        };
    }
    Ok(GmmFit {
        model: best.1.sorted(),
        log_likelihoods: trace,
        converged,
    })
}

/// Positions in `losses` whose clean posterior is at least `threshold`, and the rest.
pub fn split_by_confidence(
    gmm: &GmmModel,
    losses: &[f64],
    threshold: f64,
) -> (Vec<usize>, Vec<usize>) {
    (0..losses.len()).partition(|&i| gmm.posterior_clean(losses[i]) >= threshold)
}
