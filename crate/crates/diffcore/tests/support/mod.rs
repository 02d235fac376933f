//! Finite-difference oracle for every tape op, shared with the workspace
//! acceptance run.

#![allow(dead_code)]

use diffcore::gradcheck::{central_difference, max_relative_error, DEFAULT_STEP};
use diffcore::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INSTANCES: u64 = 20;
pub const PER_OP_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

pub type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build>,
    pub tol: f64,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
        tol: PER_OP_TOL,
    }
}

/// Values bounded away from zero so relu kinks and eps branches stay out of
/// reach of the finite-difference step.
pub fn sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Worst relative error over [`INSTANCES`] random inputs. The op output is
/// reduced to a scalar through fixed random weights.
pub fn worst_error(c: &OpCase) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + c.name.len() as u64);
        let inputs: Vec<Vec<f64>> = c.shapes.iter().map(|s| sample(&mut rng, s.iter().product())).collect();

        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = c
            .shapes
            .iter()
            .zip(&inputs)
            .map(|(s, v)| tape.leaf(s, v.clone(), true).unwrap())
            .collect();
        let out = (c.build)(&mut tape, &vars);
        let out_shape = tape.shape(out).to_vec();
        let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let reduce = |tape: &mut Tape<f64>, out: Var| {
            let w = tape.leaf(&out_shape, weights.clone(), false).unwrap();
            let p = tape.mul(out, w).unwrap();
            tape.sum(p).unwrap()
        };
        let loss = reduce(&mut tape, out);
        tape.backward(loss).unwrap();

        for (k, v) in vars.iter().enumerate() {
            let analytic: Vec<f64> = tape
                .grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
            let numeric = central_difference(
                |x| {
                    let mut t = Tape::<f64>::new();
                    let vs: Vec<Var> = c
                        .shapes
                        .iter()
                        .enumerate()
                        .map(|(j, s)| {
                            let data = if j == k { x.to_vec() } else { inputs[j].clone() };
                            t.leaf(s, data, true).unwrap()
                        })
                        .collect();
                    let o = (c.build)(&mut t, &vs);
                    let l = reduce(&mut t, o);
                    t.scalar(l)
                },
                &inputs[k],
                DEFAULT_STEP,
            );
            worst = worst.max(max_relative_error(&analytic, &numeric));
        }
    }
    worst
}

pub fn op_cases() -> Vec<OpCase> {
    let s: &[usize] = &[3, 4];
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]).unwrap()),
        // d/dA sum(A·B) = 1·Bᵀ
        case("matmul_sum", &[&[2, 3], &[3, 2]], |t, v| {
            let p = t.matmul(v[0], v[1]).unwrap();
            t.sum(p).unwrap()
        }),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], |t, v| t.bmm(v[0], v[1], false).unwrap()),
        case("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.bmm(v[0], v[1], true).unwrap()),
        case("add", &[s, s], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", &[s, s], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", &[s, s], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("mul_self", &[s], |t, v| t.mul(v[0], v[0]).unwrap()),
        case("scale", &[s], |t, v| t.scale(v[0], -2.5).unwrap()),
        case("add_scalar", &[s], |t, v| t.add_scalar(v[0], 100.0).unwrap()),
        case("relu", &[s], |t, v| t.relu(v[0]).unwrap()),
        case("add_bias", &[&[5, 3], &[3]], |t, v| t.add_bias(v[0], v[1]).unwrap()),
        case("linear", &[&[4, 3], &[3, 2], &[2]], |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        case("softmax", &[&[3, 5]], |t, v| t.softmax(v[0]).unwrap()),
        case("softmax_scaled", &[&[2, 3, 4]], |t, v| {
            let s = t.scale(v[0], 5.0).unwrap();
            t.softmax(s).unwrap()
        }),
        case("l2_normalize", &[&[4, 6]], |t, v| t.l2_normalize(v[0], 1e-6).unwrap()),
        case("conv3x3_s1", &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 1, 1).unwrap()),
        case("conv3x3_s2", &[&[2, 3, 6, 6], &[2, 3, 3, 3]], |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap()),
        case("conv1x1", &[&[2, 3, 2, 2], &[4, 3, 1, 1]], |t, v| t.conv2d(v[0], v[1], 1, 0).unwrap()),
        case("bn_train_4d", &[&[3, 2, 2, 3], &[2], &[2]], |t, v| {
            t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0
        }),
        case("bn_train_2d", &[&[6, 3], &[3], &[3]], |t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0),
        case("bn_eval", &[&[2, 3, 2, 2], &[3], &[3]], |t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5).unwrap()
        }),
        case("avg_pool2d", &[&[2, 2, 4, 4]], |t, v| t.avg_pool2d(v[0], 2, 2).unwrap()),
        case("avg_pool2d_global", &[&[2, 3, 3, 3]], |t, v| t.avg_pool2d(v[0], 3, 1).unwrap()),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap()),
        case("permute", &[&[2, 3, 4, 2]], |t, v| t.permute(v[0], &[0, 2, 1, 3]).unwrap()),
        case("gather_rows", &[&[5, 3]], |t, v| t.gather_rows(v[0], &[4, 0, 4, 2]).unwrap()),
        case("row_dot", &[&[4, 3], &[4, 3]], |t, v| t.row_dot(v[0], v[1]).unwrap()),
        case("sum", &[&[3, 3]], |t, v| t.sum(v[0]).unwrap()),
        case("mean", &[&[3, 3]], |t, v| t.mean(v[0]).unwrap()),
        // normalize, attention-like mixing with fan-out, hinge
        OpCase {
            tol: END_TO_END_TOL,
            ..case("composite", &[&[4, 6], &[6, 6]], |t, v| {
                let q = t.matmul(v[0], v[1]).unwrap();
                let qn = t.l2_normalize(q, 1e-6).unwrap();
                let q3 = t.reshape(qn, &[1, 4, 6]).unwrap();
                let s = t.bmm(q3, q3, true).unwrap();
                let s = t.scale(s, 5.0).unwrap();
                let a = t.softmax(s).unwrap();
                let x3 = t.reshape(v[0], &[1, 4, 6]).unwrap();
                let c = t.bmm(a, x3, false).unwrap();
                let c = t.reshape(c, &[4, 6]).unwrap();
                let d = t.row_dot(c, qn).unwrap();
                let h = t.add_scalar(d, 0.3).unwrap();
                t.relu(h).unwrap()
            })
        },
    ]
}
