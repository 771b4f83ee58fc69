//! Logistic-regression linear probe on frozen embeddings.

use super::auroc_binary;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    /// Full-batch gradient descent on L2-regularised logistic loss over
    /// standardised features.
    pub fn fit(x: &[Vec<f64>], y: &[usize], l2: f64, iters: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::shape("probe needs one label per non-empty feature row"));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; d];
        for r in x {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let std: Vec<f64> = std.into_iter().map(|s| s.sqrt().max(1e-8)).collect();
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|r| r.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let lr = 0.5;
        for _ in 0..iters {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (r, &t) in z.iter().zip(y) {
                let logit: f64 = r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + b;
                let err = crate::autograd::sigmoid(logit) - t as f64;
                for (g, a) in gw.iter_mut().zip(r) {
                    *g += err * a / n;
                }
                gb += err / n;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= lr * (g + l2 * *wi);
            }
            b -= lr * gb;
        }
        Ok(Self {
            mean,
            std,
            weights: w,
            bias: b,
        })
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) / s * w)
            .sum::<f64>()
            + self.bias
    }
}

/// Fits on the training rows and returns test AUROC.
pub fn linear_probe_auroc(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
) -> Result<f64> {
    let probe = LinearProbe::fit(train_x, train_y, 1e-2, 300)?;
    let scores: Vec<f64> = test_x.iter().map(|r| probe.score(r)).collect();
    auroc_binary(&scores, test_y)
}
