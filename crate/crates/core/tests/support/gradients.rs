//! Finite-difference check of the full student path: encoder, attention
//! predictor and ranking loss, in f64.


use clove::encoder::{Encoder, EncoderConfig, Provenance};
use clove::objective::{LossBuilder, LossConfig, LossMode, NegativeQueue, NegativeSource};
use clove::predictor::{AttentionConfig, Predictor};
use clove::rng::stream;
use diffcore::gradcheck::{central_difference, DEFAULT_STEP};
use diffcore::Tape;
use rand::Rng;

struct Instance {
    encoder: Encoder,
    predictor: Predictor,
    input: Vec<f64>,
    targets: Vec<f32>,
    pairs: Vec<Vec<(usize, usize)>>,
    mode: LossMode,
    queue: Option<NegativeQueue>,
}

const N: usize = 2;
const HW: usize = 8;
const D: usize = 4;

fn instance(seed: u64) -> Instance {
    let mut rng = stream(seed, &[]);
    let cfg = EncoderConfig {
        channels: vec![3, 4],
        head_hidden: 8,
        out_dim: D,
        ..EncoderConfig::default()
    };
    let mut encoder = Encoder::new(cfg, &mut rng).unwrap();
    // zero biases put dead-hidden locations exactly at the origin, where
    // the query normalization has no derivative
    let b2 = encoder.params.index_of("head.fc2.bias").unwrap();
    encoder.params.tensor_mut(b2).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let attn = AttentionConfig {
        n_heads: 2,
        head_dim: 2,
        temperature: 0.2,
        normalize_qk: true,
    };
    let mut predictor = Predictor::new(attn, &mut rng).unwrap();
    let bo = predictor.params.index_of("predictor.bo").unwrap();
    predictor.params.tensor_mut(bo).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let l = (HW / 2) * (HW / 2);
    let input = (0..N * 3 * HW * HW).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets = (0..N * l * D).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let pairs = (0..N)
        .map(|_| {
            let mut p: Vec<(usize, usize)> = (0..l)
                .flat_map(|i| (0..l).map(move |j| (i, j)))
                .filter(|_| rng.gen_bool(0.4))
                .collect();
            if p.is_empty() {
                p.push((0, 0));
            }
            p
        })
        .collect();
    let mode = if seed % 3 == 2 { LossMode::L2 } else { LossMode::Rank };
    let queue = (seed % 3 == 0).then(|| {
        let mut q = NegativeQueue::new(8, D).unwrap();
        for _ in 0..8 {
            let v: Vec<f32> = (0..D).map(|_| rng.gen_range(-1.0..1.0)).collect();
            q.push(&v).unwrap();
        }
        q
    });
    Instance {
        encoder,
        predictor,
        input,
        targets,
        pairs,
        mode,
        queue,
    }
}

/// Which parameter set a perturbation applies to.
#[derive(Clone, Copy)]
enum Side {
    Encoder,
    Predictor,
}

/// Loss and, when requested, every trainable gradient `(side, index, grad)`.
fn evaluate(inst: &Instance, replace: Option<(Side, usize, &[f64])>, grads: bool) -> (f64, Vec<(Side, usize, Vec<f64>)>) {
    let mut tape = Tape::<f64>::new();
    let mut enc = inst.encoder.clone();
    let er = match replace {
        Some((Side::Encoder, i, v)) => Some((i, v)),
        _ => None,
    };
    let pr = match replace {
        Some((Side::Predictor, i, v)) => Some((i, v)),
        _ => None,
    };
    let eb = enc.params.bind_with(&mut tape, grads, er).unwrap();
    let pb = inst.predictor.params.bind_with(&mut tape, grads, pr).unwrap();
    let x = tape.leaf(&[N, 3, HW, HW], inst.input.clone(), false).unwrap();
    let fm = enc.forward(&mut tape, &eb, x, Provenance::Student).unwrap();
    let c = inst.predictor.forward(&mut tape, &pb, fm.seq).unwrap().output;
    let l = fm.len();
    let flat = tape.reshape(c, &[N * l, D]).unwrap();
    let cfg = LossConfig {
        margin: 0.8,
        // every non-top-1 location is a negative, so the selection only
        // changes when the best match does
        top_k: l,
        mode: inst.mode,
        ..LossConfig::default()
    };
    let mut b = LossBuilder::new(cfg, D).unwrap();
    let cv = tape.value(flat).to_vec();
    let mut rng = stream(0, &[]);
    for n in 0..N {
        b.add_pair(
            0,
            n * l,
            &cv[n * l * D..(n + 1) * l * D],
            &inst.targets[n * l * D..(n + 1) * l * D],
            &inst.pairs[n],
            inst.queue.as_ref().map_or(NegativeSource::Intra, NegativeSource::Queue),
            &mut rng,
        )
        .unwrap();
    }
    let loss = b.finish(&mut tape, &[flat]).unwrap().0.unwrap();
    let value = tape.scalar(loss);
    let mut out = Vec::new();
    if grads {
        tape.backward(loss).unwrap();
        for (side, bound) in [(Side::Encoder, &eb), (Side::Predictor, &pb)] {
            let n = match side {
                Side::Encoder => enc.params.len(),
                Side::Predictor => inst.predictor.params.len(),
            };
            for i in 0..n {
                if let Some(v) = bound.get(i) {
                    out.push((side, i, tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default()));
                }
            }
        }
    }
    (value, out)
}

fn params_of(inst: &Instance, side: Side, index: usize) -> Vec<f64> {
    let set = match side {
        Side::Encoder => &inst.encoder.params,
        Side::Predictor => &inst.predictor.params,
    };
    set.tensor(index).data().iter().map(|&x| x as f64).collect()
}

/// Central differences at `h` and `h/2` disagree when a ReLU kink, a top-1
/// switch or strong curvature lies within the step; such coordinates are
/// counted but not compared.
fn stable(coarse: f64, fine: f64, denom: f64) -> bool {
    (coarse - fine).abs() <= 1e-4 * denom
}

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub compared: usize,
    pub unstable: usize,
    pub instances: usize,
    pub worst: f64,
}

/// Compares up to four random coordinates of every trainable tensor on each
/// instance.
pub fn check_instances(n: u64) -> GradReport {
    let mut r = GradReport {
        compared: 0,
        unstable: 0,
        instances: 0,
        worst: 0.0,
    };
    for seed in 0..n {
        let inst = instance(seed);
        let (_, grads) = evaluate(&inst, None, true);
        let mut pick = stream(seed, &[1]);
        let scale = grads.iter().flat_map(|g| &g.2).fold(0.0f64, |m, g| m.max(g.abs()));
        let mut compared = 0;
        for (side, index, analytic) in &grads {
            let base = params_of(&inst, *side, *index);
            let coords = rand::seq::index::sample(&mut pick, base.len(), base.len().min(4)).into_vec();
            let point: Vec<f64> = coords.iter().map(|&c| base[c]).collect();
            let f = |v: &[f64]| {
                let mut full = base.clone();
                for (&c, &x) in coords.iter().zip(v) {
                    full[c] = x;
                }
                evaluate(&inst, Some((*side, *index, &full)), false).0
            };
            let coarse = central_difference(f, &point, DEFAULT_STEP);
            let fine = central_difference(f, &point, DEFAULT_STEP / 2.0);
            for (k, &c) in coords.iter().enumerate() {
                let a = analytic.get(c).copied().unwrap_or(0.0);
                let denom = a.abs().max(coarse[k].abs()).max(1e-3 * scale).max(1e-12);
                if !stable(coarse[k], fine[k], denom) {
                    r.unstable += 1;
                    continue;
                }
                r.worst = r.worst.max((a - coarse[k]).abs() / denom);
                r.compared += 1;
                compared += 1;
            }
        }
        if compared > 0 {
            r.instances += 1;
        }
    }
    r
}
