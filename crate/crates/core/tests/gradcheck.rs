//! Finite-difference verification of every tape primitive.
//!
//! For each primitive, a random scalar loss is built as
//! `sum(weights * op(inputs))` and the reverse-mode gradient of every input
//! element is compared against central finite differences (step 1e-5,
//! double precision) at relative tolerance 1e-6.

use std::sync::Arc;

use leviathan_core::splines::SplineGrid;
use leviathan_core::tape::{Precision, Tape, Var};
use leviathan_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;
const ABS_FLOOR: f64 = 1e-9;

fn close(a: f64, b: f64, rel: f64) -> bool {
    let diff = (a - b).abs();
    diff <= ABS_FLOOR || diff <= rel * a.abs().max(b.abs())
}

/// Check reverse-mode gradients of `build` against central differences for
/// every element of every input.
fn fd_check(
    name: &str,
    inputs: &[Tensor],
    rel_tol: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Var,
) {
    let forward = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new(Precision::Double);
        let vars: Vec<Var> = tensors.iter().map(|t| tape.input(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.val(out).scalar_value().expect("loss must be scalar")
    };

    // analytic gradients
    let mut tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    for (ti, t) in inputs.iter().enumerate() {
        for e in 0..t.numel() {
            let mut up = inputs.to_vec();
            up[ti].data_mut()[e] += FD_STEP;
            let mut dn = inputs.to_vec();
            dn[ti].data_mut()[e] -= FD_STEP;
            let fd = (forward(&up) - forward(&dn)) / (2.0 * FD_STEP);
            let ad = analytic[ti][e];
            assert!(
                close(ad, fd, rel_tol),
                "{name}: input {ti} element {e}: analytic {ad} vs fd {fd} \
                 (rel err {})",
                (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-300)
            );
        }
    }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Wrap an op output into a scalar via a fixed random weighting.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.val(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(shape, &mut rng, -1.0, 1.0);
    let wv = tape.input(w);
    let prod = tape.mul(out, wv).unwrap();
    tape.sum_all(prod).unwrap()
}

#[test]
fn matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    // the pinned 4x5 * 5x3 case first, at the tighter documented tolerance
    let a = rand_tensor(vec![4, 5], &mut rng, -1.0, 1.0);
    let b = rand_tensor(vec![5, 3], &mut rng, -1.0, 1.0);
    fd_check("matmul 4x5x3", &[a, b], 1e-7, &|t, v| {
        let c = t.matmul(v[0], v[1]).unwrap();
        t.sum_all(c).unwrap()
    });

    for case in 0..20 {
        let m = rng.gen_range(1..5);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(1..5);
        let a = rand_tensor(vec![m, k], &mut rng, -1.5, 1.5);
        let b = rand_tensor(vec![k, n], &mut rng, -1.5, 1.5);
        fd_check(&format!("matmul #{case}"), &[a, b], REL_TOL, &|t, v| {
            let c = t.matmul(v[0], v[1]).unwrap();
            weighted_sum(t, c, 7000 + case)
        });
    }
}

#[test]
fn transpose_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for case in 0..20 {
        let m = rng.gen_range(1..5);
        let n = rng.gen_range(1..5);
        let a = rand_tensor(vec![m, n], &mut rng, -1.0, 1.0);
        fd_check(&format!("transpose #{case}"), &[a], REL_TOL, &|t, v| {
            let c = t.transpose2d(v[0]).unwrap();
            weighted_sum(t, c, 7100 + case)
        });
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    type BuildFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let suite: Vec<(&str, bool, f64, f64, BuildFn)> = vec![
        ("add", true, -2.0, 2.0, Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1]).unwrap())),
        ("sub", true, -2.0, 2.0, Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1]).unwrap())),
        ("mul", true, -2.0, 2.0, Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1]).unwrap())),
        ("scale", false, -2.0, 2.0, Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7).unwrap())),
        ("sigmoid", false, -3.0, 3.0, Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0]).unwrap())),
        ("silu", false, -3.0, 3.0, Box::new(|t: &mut Tape, v: &[Var]| t.silu(v[0]).unwrap())),
        ("exp", false, -2.0, 1.5, Box::new(|t: &mut Tape, v: &[Var]| t.exp(v[0]).unwrap())),
        ("log", false, 0.3, 3.0, Box::new(|t: &mut Tape, v: &[Var]| t.log(v[0]).unwrap())),
        ("power^2", false, -2.0, 2.0, Box::new(|t: &mut Tape, v: &[Var]| t.power(v[0], 2.0).unwrap())),
        ("power^0.5", false, 0.2, 3.0, Box::new(|t: &mut Tape, v: &[Var]| t.power(v[0], 0.5).unwrap())),
        ("power^-1", false, 0.4, 3.0, Box::new(|t: &mut Tape, v: &[Var]| t.power(v[0], -1.0).unwrap())),
    ];
    for (name, binary, lo, hi, build) in &suite {
        for case in 0..20 {
            let rank = rng.gen_range(1..4usize);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..4)).collect();
            let mut inputs = vec![rand_tensor(shape.clone(), &mut rng, *lo, *hi)];
            if *binary {
                // exercise the scalar broadcast path every few cases
                if case % 4 == 3 {
                    inputs.push(rand_tensor(vec![1], &mut rng, *lo, *hi));
                } else {
                    inputs.push(rand_tensor(shape, &mut rng, *lo, *hi));
                }
            }
            fd_check(&format!("{name} #{case}"), &inputs, REL_TOL, &|t, v| {
                let out = build(t, v);
                weighted_sum(t, out, 7200 + case)
            });
        }
    }
    // documented oracle point: sigmoid gradient at x = 1.3
    let x = Tensor::from_vec(vec![1], vec![1.3]).unwrap();
    fd_check("sigmoid@1.3", &[x], 1e-7, &|t, v| t.sigmoid(v[0]).unwrap());
}

#[test]
fn add_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    for case in 0..20 {
        let n = rng.gen_range(1..5);
        let d = rng.gen_range(1..5);
        let a = rand_tensor(vec![n, d], &mut rng, -1.0, 1.0);
        let b = rand_tensor(vec![d], &mut rng, -1.0, 1.0);
        fd_check(&format!("add_bias #{case}"), &[a, b], REL_TOL, &|t, v| {
            let c = t.add_bias(v[0], v[1]).unwrap();
            weighted_sum(t, c, 7300 + case)
        });
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    for case in 0..20 {
        let n = rng.gen_range(1..4);
        let d = rng.gen_range(2..6);
        let x = rand_tensor(vec![n, d], &mut rng, -2.0, 2.0);
        let gain = rand_tensor(vec![d], &mut rng, 0.5, 1.5);
        let bias = rand_tensor(vec![d], &mut rng, -0.5, 0.5);
        fd_check(&format!("layer_norm #{case}"), &[x, gain, bias], REL_TOL, &|t, v| {
            let c = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            weighted_sum(t, c, 7400 + case)
        });
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for case in 0..20 {
        let rows = rng.gen_range(1..4);
        let v = rng.gen_range(2..7);
        let logits = rand_tensor(vec![rows, v], &mut rng, -2.0, 2.0);
        let targets: Vec<u32> = (0..rows).map(|_| rng.gen_range(0..v as u32)).collect();
        let targets2 = targets.clone();
        fd_check(&format!("softmax_ce #{case}"), &[logits], REL_TOL, &move |t, vars| {
            t.softmax_cross_entropy(vars[0], &targets2).unwrap()
        });
    }
}

#[test]
fn gather_rows_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for case in 0..20 {
        let rows = rng.gen_range(2..6);
        let d = rng.gen_range(1..4);
        let n = rng.gen_range(1..7);
        let table = rand_tensor(vec![rows, d], &mut rng, -1.0, 1.0);
        // repeats exercise scatter-add accumulation
        let idx: Vec<u32> = (0..n).map(|_| rng.gen_range(0..rows as u32)).collect();
        let idx2 = idx.clone();
        fd_check(&format!("gather_rows #{case}"), &[table], REL_TOL, &move |t, v| {
            let g = t.gather_rows(v[0], &idx2).unwrap();
            weighted_sum(t, g, 7500 + case)
        });
    }
}

#[test]
fn spline_expand_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    for case in 0..20 {
        let segs = rng.gen_range(2..8);
        let deg = rng.gen_range(1..4);
        let grid = Arc::new(SplineGrid::new(segs, deg).unwrap());
        let n = rng.gen_range(1..4);
        let d = rng.gen_range(1..4);
        // keep FD probes inside [0,1]
        let x = rand_tensor(vec![n, d], &mut rng, 0.05, 0.95);
        let g2 = Arc::clone(&grid);
        fd_check(&format!("spline_expand #{case}"), &[x], REL_TOL, &move |t, v| {
            let b = t.spline_expand(v[0], &g2).unwrap();
            weighted_sum(t, b, 7600 + case)
        });
    }
}

#[test]
fn spline_phi_and_prod_modes_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for case in 0..20 {
        let n = rng.gen_range(1..3);
        let d = rng.gen_range(1..4);
        let nb = rng.gen_range(2..5);
        let m = rng.gen_range(1..4);
        let c = rng.gen_range(1..3);
        let basis = rand_tensor(vec![n, d, nb], &mut rng, -1.0, 1.0);
        let theta = rand_tensor(vec![d, m, nb, c], &mut rng, 0.5, 1.5);
        fd_check(&format!("spline_phi #{case}"), &[basis, theta], REL_TOL, &|t, v| {
            let phi = t.spline_phi(v[0], v[1]).unwrap();
            weighted_sum(t, phi, 7700 + case)
        });

        let mut phi = rand_tensor(vec![n, d, m, c], &mut rng, -1.2, 1.2);
        if case % 5 == 0 {
            // exact zero crossing: leave-one-out products must stay correct
            phi.data_mut()[0] = 0.0;
        }
        fd_check(&format!("prod_modes #{case}"), &[phi], REL_TOL, &|t, v| {
            let p = t.prod_modes(v[0]).unwrap();
            weighted_sum(t, p, 7800 + case)
        });
    }
}

#[test]
fn reshape_and_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    for case in 0..20 {
        let m = rng.gen_range(1..5);
        let n = rng.gen_range(1..5);
        let a = rand_tensor(vec![m, n], &mut rng, -1.0, 1.0);
        fd_check(&format!("reshape+sum #{case}"), &[a], REL_TOL, &|t, v| {
            let r = t.reshape(v[0], vec![t.val(v[0]).numel()]).unwrap();
            let s = t.sigmoid(r).unwrap();
            t.sum_all(s).unwrap()
        });
    }
}

#[test]
fn causal_attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    for case in 0..20 {
        let batch = rng.gen_range(1..3);
        let seq = rng.gen_range(1..4);
        let heads = rng.gen_range(1..3);
        let hd = 2 * rng.gen_range(1..3);
        let dim = heads * hd;
        let n = batch * seq;
        let q = rand_tensor(vec![n, dim], &mut rng, -1.0, 1.0);
        let k = rand_tensor(vec![n, dim], &mut rng, -1.0, 1.0);
        let v = rand_tensor(vec![n, dim], &mut rng, -1.0, 1.0);
        fd_check(&format!("attention #{case}"), &[q, k, v], REL_TOL, &move |t, vars| {
            let out = t
                .causal_attention(vars[0], vars[1], vars[2], batch, seq, heads, 10_000.0)
                .unwrap();
            weighted_sum(t, out, 7900 + case)
        });
    }
}
