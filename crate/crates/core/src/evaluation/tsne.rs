//! Exact (O(n^2)) t-SNE projection of embeddings into two dimensions.
//!
//! Gaussian input affinities with per-point bandwidth found by binary search
//! on the perplexity target, symmetrized and floored; student-t output
//! kernel optimized by gradient descent with momentum, adaptive gains, and
//! early exaggeration. Deterministic for a fixed seed.

use crate::error::{Error, Result};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 500,
            learning_rate: 200.0,
            seed: 0,
        }
    }
}

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 100;
const MOMENTUM_SWITCH: usize = 250;

fn pairwise_sq_dists(x: &Array2<f64>) -> Array2<f64> {
    let n = x.dim().0;
    let mut d = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..x.dim().1 {
                let diff = x[(i, k)] - x[(j, k)];
                s += diff * diff;
            }
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    d
}

/// Conditional affinities for row i at the bandwidth matching log(perp).
fn row_affinities(d2: &Array2<f64>, i: usize, target_entropy: f64) -> Vec<f64> {
    let n = d2.dim().0;
    let mut beta = 1.0;
    let mut beta_min = f64::NEG_INFINITY;
    let mut beta_max = f64::INFINITY;
    let mut p = vec![0.0; n];
    for _ in 0..50 {
        let mut sum = 0.0;
        for j in 0..n {
            p[j] = if j == i { 0.0 } else { (-beta * d2[(i, j)]).exp() };
            sum += p[j];
        }
        if sum <= 0.0 {
            // all mass collapsed; relax the bandwidth
            beta_max = beta;
            beta = if beta_min.is_finite() {
                (beta + beta_min) / 2.0
            } else {
                beta / 2.0
            };
            continue;
        }
        let mut entropy = 0.0;
        for pj in p.iter_mut() {
            *pj /= sum;
            if *pj > 1e-300 {
                entropy -= *pj * pj.ln();
            }
        }
        let diff = entropy - target_entropy;
        if diff.abs() < 1e-5 {
            break;
        }
        if diff > 0.0 {
            beta_min = beta;
            beta = if beta_max.is_finite() {
                (beta + beta_max) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            beta_max = beta;
            beta = if beta_min.is_finite() {
                (beta + beta_min) / 2.0
            } else {
                beta / 2.0
            };
        }
    }
    p
}

/// Projects (n, d) embeddings to (n, 2) coordinates.
pub fn tsne_export(embeddings: &Array2<f64>, cfg: &TsneConfig) -> Result<Array2<f64>> {
    let n = embeddings.dim().0;
    if n < 3 {
        return Err(Error::TooFewSamples { got: n, need: 3 });
    }
    if embeddings.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateLabels("non-finite embedding".into()));
    }
    let perp = cfg.perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let target_entropy = perp.ln();

    let d2 = pairwise_sq_dists(embeddings);
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let row = row_affinities(&d2, i, target_entropy);
        for j in 0..n {
            p[(i, j)] = row[j];
        }
    }
    // symmetrize and floor
    let mut pm = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            pm[(i, j)] = ((p[(i, j)] + p[(j, i)]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = Array2::<f64>::zeros((n, 2));
    for v in y.iter_mut() {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = g * 1e-4;
    }
    let mut velocity = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::from_elem((n, 2), 1.0);

    for iter in 0..cfg.iterations {
        let exaggeration = if iter < EXAGGERATION_ITERS {
            EXAGGERATION
        } else {
            1.0
        };
        let momentum = if iter < MOMENTUM_SWITCH { 0.5 } else { 0.8 };

        // student-t kernel
        let mut num = Array2::<f64>::zeros((n, n));
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = y[(i, 0)] - y[(j, 0)];
                let dy = y[(i, 1)] - y[(j, 1)];
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[(i, j)] = v;
                num[(j, i)] = v;
                qsum += 2.0 * v;
            }
        }
        let qsum = qsum.max(1e-300);

        let mut grad = Array2::<f64>::zeros((n, 2));
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[(i, j)] / qsum).max(1e-300);
                let coeff = 4.0 * (exaggeration * pm[(i, j)] - q) * num[(i, j)];
                grad[(i, 0)] += coeff * (y[(i, 0)] - y[(j, 0)]);
                grad[(i, 1)] += coeff * (y[(i, 1)] - y[(j, 1)]);
            }
        }

        for i in 0..n {
            for k in 0..2 {
                let same_sign = grad[(i, k)].signum() == velocity[(i, k)].signum();
                gains[(i, k)] = if same_sign {
                    (gains[(i, k)] * 0.8).max(0.01)
                } else {
                    gains[(i, k)] + 0.2
                };
                velocity[(i, k)] =
                    momentum * velocity[(i, k)] - cfg.learning_rate * gains[(i, k)] * grad[(i, k)];
                y[(i, k)] += velocity[(i, k)];
            }
        }
        // recentre
        for k in 0..2 {
            let mean = y.column(k).sum() / n as f64;
            for i in 0..n {
                y[(i, k)] -= mean;
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss { step: cfg.iterations, value: f64::NAN });
    }
    Ok(y)
}
