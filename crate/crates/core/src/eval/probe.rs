//! Linear probing of flattened quantized register values.
//!
//! Fixed recipe: seeded shuffle and hold-out split, per-feature
//! standardization from the training split, zero-initialized multinomial
//! logistic regression fit by full-batch gradient descent with L2.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{bail_shape, bail_validation, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRecipe {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeRecipe {
    fn default() -> Self {
        ProbeRecipe { epochs: 300, lr: 0.5, l2: 1e-4, test_fraction: 0.25, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeResult {
    pub feature_dim: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

struct Softmax {
    w: Vec<f64>,
    b: Vec<f64>,
    dim: usize,
    classes: usize,
}

impl Softmax {
    fn probs(&self, x: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = (0..self.classes)
            .map(|c| self.b[c] + x.iter().zip(&self.w[c * self.dim..(c + 1) * self.dim]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in z.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        z.iter_mut().for_each(|v| *v /= s);
        z
    }

    fn predict(&self, x: &[f64]) -> usize {
        let p = self.probs(x);
        (0..self.classes).fold(0, |best, c| if p[c] > p[best] { c } else { best })
    }
}

fn accuracy(model: &Softmax, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().zip(ys).filter(|(x, &y)| model.predict(x) == y).count() as f64 / xs.len() as f64
}

pub fn linear_probe(features: &[Vec<f32>], labels: &[usize], recipe: &ProbeRecipe) -> Result<ProbeResult> {
    if features.len() != labels.len() || features.len() < 2 {
        bail_shape!("probe needs ≥ 2 feature rows with one label each ({} rows, {} labels)", features.len(), labels.len());
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        bail_shape!("probe features must share one non-zero dimension");
    }
    let classes = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct < 2 {
        bail_validation!("linear probe needs at least two classes");
    }

    let mut order: Vec<usize> = (0..features.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(recipe.seed));
    let n_test = ((features.len() as f64 * recipe.test_fraction).round() as usize).clamp(1, features.len() - 1);
    let (test_idx, train_idx) = order.split_at(n_test);

    let to_f64 = |i: &usize| features[*i].iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut train: Vec<Vec<f64>> = train_idx.iter().map(to_f64).collect();
    let mut test: Vec<Vec<f64>> = test_idx.iter().map(to_f64).collect();
    let ytrain: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let ytest: Vec<usize> = test_idx.iter().map(|&i| labels[i]).collect();

    let n = train.len() as f64;
    for j in 0..dim {
        let mean = train.iter().map(|x| x[j]).sum::<f64>() / n;
        let var = train.iter().map(|x| (x[j] - mean).powi(2)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for x in train.iter_mut().chain(test.iter_mut()) {
            x[j] = (x[j] - mean) / sd;
        }
    }

    let mut model = Softmax { w: vec![0.0; classes * dim], b: vec![0.0; classes], dim, classes };
    for _ in 0..recipe.epochs {
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for (x, &y) in train.iter().zip(&ytrain) {
            let p = model.probs(x);
            for c in 0..classes {
                let d = p[c] - (c == y) as u8 as f64;
                gb[c] += d;
                for (g, &xv) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
        }
        for (w, g) in model.w.iter_mut().zip(&gw) {
            *w -= recipe.lr * (g / n + recipe.l2 * *w);
        }
        for (b, g) in model.b.iter_mut().zip(&gb) {
            *b -= recipe.lr * g / n;
        }
    }
    Ok(ProbeResult {
        feature_dim: dim,
        n_train: train.len(),
        n_test: test.len(),
        train_accuracy: accuracy(&model, &train, &ytrain),
        test_accuracy: accuracy(&model, &test, &ytest),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_two_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..200 {
            let x: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            ys.push((x[0] > 0.0) as usize);
            xs.push(x);
        }
        let r = linear_probe(&xs, &ys, &ProbeRecipe::default()).unwrap();
        assert_eq!((r.feature_dim, r.n_test, r.n_train), (5, 50, 150));
        assert!(r.test_accuracy > 0.95, "{r:?}");
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![vec![1.0f32], vec![2.0]];
        assert!(linear_probe(&xs, &[0, 0], &ProbeRecipe::default()).is_err());
        assert!(linear_probe(&xs, &[0], &ProbeRecipe::default()).is_err());
    }
}
