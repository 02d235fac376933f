use clove::predictor::{AttentionConfig, Predictor};
use clove::rng::stream;
use diffcore::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use diffcore::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

fn predictor(seed: u64, heads: usize, head_dim: usize, normalize_qk: bool) -> Predictor {
    let cfg = AttentionConfig {
        n_heads: heads,
        head_dim,
        temperature: 0.2,
        normalize_qk,
    };
    Predictor::new(cfg, &mut stream(seed, &[])).unwrap()
}

fn random_input(rng: &mut impl Rng, n: usize, l: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[n, l, d], |_| rng.gen_range(-1.0..1.0))
}

/// Attention recomputed position by position with plain loops.
fn naive(p: &Predictor, x: &Tensor) -> Vec<f64> {
    let (l, d) = (x.shape()[1], x.shape()[2]);
    let cfg = p.config;
    let w = |i: usize| p.params.tensor(i);
    let proj = |m: usize, pos: usize, col: usize| -> f64 { (0..d).map(|k| x.at(&[0, pos, k]) as f64 * w(m).at(&[k, col]) as f64).sum() };
    let mut concat = vec![0.0; l * d];
    for h in 0..cfg.n_heads {
        let cols: Vec<usize> = (h * cfg.head_dim..(h + 1) * cfg.head_dim).collect();
        let vecs = |m: usize| -> Vec<Vec<f64>> {
            (0..l)
                .map(|pos| {
                    let v: Vec<f64> = cols.iter().map(|&c| proj(m, pos, c)).collect();
                    if m < 2 && cfg.normalize_qk {
                        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
                        v.iter().map(|a| a / n).collect()
                    } else {
                        v
                    }
                })
                .collect()
        };
        let (q, k, v) = (vecs(0), vecs(1), vecs(2));
        for i in 0..l {
            let s: Vec<f64> = (0..l)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / cfg.temperature)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|a| (a - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (c, _) in cols.iter().enumerate() {
                concat[i * d + h * cfg.head_dim + c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for o in 0..d {
            out[i * d + o] = w(4).data()[o] as f64 + (0..d).map(|k| concat[i * d + k] * w(3).at(&[k, o]) as f64).sum::<f64>();
        }
    }
    out
}

#[test]
fn matches_naive_loop() {
    let mut rng = stream(1, &[]);
    for normalize in [true, false] {
        let p = predictor(2, 2, 4, normalize);
        let x = random_input(&mut rng, 1, 6, 8);
        let got = p.apply(&x).unwrap();
        for (a, b) in got.data().iter().zip(naive(&p, &x)) {
            assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn weights_are_distributions() {
    let mut rng = stream(3, &[]);
    let p = predictor(4, 8, 8, true);
    for _ in 0..20 {
        let x = random_input(&mut rng, 2, 16, 64);
        let w = p.attention_scores(&x).unwrap();
        for row in w.data().chunks(16) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn permutation_equivariance() {
    let mut rng = stream(5, &[]);
    let p = predictor(6, 8, 8, true);
    let (l, d) = (16, 64);
    for _ in 0..50 {
        let x = random_input(&mut rng, 1, l, d);
        let mut perm: Vec<usize> = (0..l).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::from_fn(&[1, l, d], |i| x.data()[perm[i / d] * d + i % d]);
        let (y, py) = (p.apply(&x).unwrap(), p.apply(&px).unwrap());
        for i in 0..l {
            for k in 0..d {
                assert!((py.at(&[0, i, k]) - y.at(&[0, perm[i], k])).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn normalized_scores_are_bounded_and_scale_free() {
    let mut rng = stream(7, &[]);
    let p = predictor(8, 8, 8, true);
    let tau = p.config.temperature;
    for _ in 0..20 {
        let x = random_input(&mut rng, 1, 16, 64);
        let (scores, w) = p.attention_detail(&x).unwrap();
        assert!(scores.data().iter().all(|&s| (s as f64 / tau).abs() <= 1.0 / tau));
        let c: f32 = rng.gen_range(0.1..50.0);
        let scaled = Tensor::from_fn(x.shape(), |i| x.data()[i] * c);
        let (_, ws) = p.attention_detail(&scaled).unwrap();
        for (a, b) in w.data().iter().zip(ws.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn unnormalized_scores_escape_the_bound() {
    let p = predictor(9, 8, 8, false);
    let tau = p.config.temperature;
    let mut rng = stream(10, &[]);
    let x = random_input(&mut rng, 1, 16, 64);
    let big = Tensor::from_fn(x.shape(), |i| x.data()[i] * 100.0);
    let (scores, w) = p.attention_detail(&big).unwrap();
    assert!(scores.data().iter().any(|&s| (s as f64 / tau).abs() > 1.0 / tau));
    let (_, w_small) = p.attention_detail(&x).unwrap();
    assert!(w.data().iter().zip(w_small.data()).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn predictor_gradient_matches_finite_differences() {
    let mut rng = stream(11, &[]);
    let p = predictor(12, 2, 4, true);
    let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = |xs: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let bound = p.params.bind(&mut tape, false).unwrap();
        let xv = tape.leaf(&[1, 4, 8], xs.to_vec(), true).unwrap();
        let out = p.forward(&mut tape, &bound, xv).unwrap().output;
        let rv = tape.leaf(&[1, 4, 8], r.clone(), false).unwrap();
        let prod = tape.mul(out, rv).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        (tape.scalar(s), tape.grad(xv).unwrap().to_vec())
    };
    let (_, analytic) = loss(&x);
    let numeric = central_difference(|v| loss(v).0, &x, DEFAULT_STEP);
    assert!(max_relative_error(&analytic, &numeric) < 1e-3);
}
