//! Linear probe on frozen, average-pooled features.

use crate::augment::{render_view, ViewGeometry};
use crate::encoder::{stack_views, Encoder, Mode, Provenance};
use crate::error::{CloveError, Result};
use crate::evalkit::corpus::SyntheticImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Spatially averaged features `[N,D]` of the unaugmented images.
pub fn pooled_features(encoder: &Encoder, images: &[SyntheticImage]) -> Result<Vec<Vec<f64>>> {
    let mut enc = encoder.clone();
    enc.set_mode(Mode::Eval);
    let d = enc.config.out_dim;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let views = chunk
            .iter()
            .map(|im| {
                let s = im.image.shape();
                render_view(&im.image, &ViewGeometry::identity(s[1], s[2]))
            })
            .collect::<Result<Vec<_>>>()?;
        let (f, fh, fw) = enc.infer(&stack_views(&views)?, Provenance::Teacher)?;
        let l = fh * fw;
        for b in 0..chunk.len() {
            let mut m = vec![0.0; d];
            for row in f[b * l * d..(b + 1) * l * d].chunks_exact(d) {
                for (a, &x) in m.iter_mut().zip(row) {
                    *a += x as f64 / l as f64;
                }
            }
            out.push(m);
        }
    }
    Ok(out)
}

/// Multinomial logistic regression by full-batch gradient descent from zero
/// weights, on features standardized with training statistics.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if train_x.is_empty() || train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(CloveError::Contract("probe inputs and labels differ in length".into()));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= n_classes) {
        return Err(CloveError::Contract("probe label out of range".into()));
    }
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for x in train_x {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    for x in train_x {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|s| s.sqrt().max(1e-8)).collect();
    let norm = |x: &Vec<f64>| -> Vec<f64> { x.iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s).collect() };
    let tx: Vec<Vec<f64>> = train_x.iter().map(norm).collect();
    let ex: Vec<Vec<f64>> = test_x.iter().map(norm).collect();

    let mut w = vec![vec![0.0; d]; n_classes];
    let mut b = vec![0.0; n_classes];
    let logits = |w: &[Vec<f64>], b: &[f64], x: &[f64]| -> Vec<f64> {
        w.iter()
            .zip(b)
            .map(|(wc, bc)| bc + wc.iter().zip(x).map(|(p, q)| p * q).sum::<f64>())
            .collect()
    };
    for _ in 0..cfg.iterations {
        let mut gw = vec![vec![0.0; d]; n_classes];
        let mut gb = vec![0.0; n_classes];
        for (x, &y) in tx.iter().zip(train_y) {
            let z = logits(&w, &b, x);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..n_classes {
                let g = e[c] / s - if c == y { 1.0 } else { 0.0 };
                gb[c] += g / n;
                for (gwc, xv) in gw[c].iter_mut().zip(x) {
                    *gwc += g * xv / n;
                }
            }
        }
        for c in 0..n_classes {
            b[c] -= cfg.lr * gb[c];
            for (wv, g) in w[c].iter_mut().zip(&gw[c]) {
                *wv -= cfg.lr * (g + cfg.l2 * *wv);
            }
        }
    }
    let accuracy = |xs: &[Vec<f64>], ys: &[usize]| -> f64 {
        if xs.is_empty() {
            return 0.0;
        }
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| {
                let z = logits(&w, &b, x);
                let pred = (0..n_classes).fold(0, |a, c| if z[c] > z[a] { c } else { a });
                pred == y
            })
            .count();
        correct as f64 / xs.len() as f64
    };
    Ok(ProbeReport {
        train_accuracy: accuracy(&tx, train_y),
        test_accuracy: accuracy(&ex, test_y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_features_are_separable() {
        let ys: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let xs: Vec<Vec<f64>> = ys
            .iter()
            .map(|&y| (0..3).map(|c| if c == y { 1.0 } else { 0.0 }).collect())
            .collect();
        let r = linear_probe(&xs, &ys, &xs, &ys, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
        assert_eq!(r.test_accuracy, 1.0);
    }

    #[test]
    fn constant_features_give_majority_rate() {
        let ys: Vec<usize> = (0..20).map(|i| usize::from(i % 4 == 0)).collect();
        let xs = vec![vec![0.7, -1.0]; 20];
        let r = linear_probe(&xs, &ys, &xs, &ys, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(r.train_accuracy, 0.75);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(linear_probe(&[vec![1.0]], &[3], &[], &[], 2, &ProbeConfig::default()).is_err());
    }
}
