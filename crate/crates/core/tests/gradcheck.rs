//! Finite-difference verification of every differentiable operator.
//!
//! Each op's analytic gradient (reverse-mode tape) is compared against a
//! central-difference oracle that only ever calls the forward pass, in f64,
//! over at least 20 random instances per op. Non-scalar ops are reduced to
//! a scalar through sq_l2_norm(add(op(x), r)) with a fixed random offset r,
//! which weights every output element differently.

use dfbf_core::gradcheck::max_rel_error;
use dfbf_core::kernels::bn::BnMode;
use dfbf_core::rng::{next_gaussian, rng_from_seed, SeededRng};
use dfbf_core::tape::{Tape, Var};
use dfbf_core::tensor::Tensor;

const TOL: f64 = 1e-5;
const CONV_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const CASES: usize = 20;

fn randn(shape: &[usize], rng: &mut SeededRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| next_gaussian(rng)).collect()).unwrap()
}

/// Nudge values away from zero so kinked ops (relu, |.|) see no crossings
/// within the finite-difference step.
fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v >= 0.0 { margin } else { -margin };
        }
    }
}

/// Check d(scalar loss)/d(one input tensor) for a generic composition.
///
/// `build` receives a tape plus the current values of every input tensor
/// and returns the scalar loss var together with the leaf var of every
/// input (in input order). Input `target` is the one being checked; the
/// rest stay fixed.
fn check_input(
    inputs: &[Tensor<f64>],
    target: usize,
    tol: f64,
    build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> (Var, Vec<Var>),
) {
    let mut owned: Vec<Tensor<f64>> = inputs.to_vec();
    owned[target].set_requires_grad(true);

    let mut tape = Tape::new();
    let (loss, leaves) = build(&mut tape, &owned);
    tape.backward(loss).unwrap();
    let analytic = tape.grad(leaves[target]).expect("target leaf must have a gradient").to_vec();

    let err = max_rel_error(owned[target].data(), &analytic, STEP, |buf| {
        let mut probe = owned.clone();
        let shape = probe[target].shape().to_vec();
        probe[target] = Tensor::from_vec(shape, buf.to_vec()).unwrap();
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, &probe);
        tape.scalar(loss)
    });
    assert!(err < tol, "max rel error {err} exceeds {tol}");
}

/// Reduce an op output to a scalar with distinct per-element weights.
fn reduce(tape: &mut Tape<f64>, out: Var, offset: &Tensor<f64>) -> Var {
    let r = tape.constant(offset.shape().to_vec(), offset.data().to_vec());
    let shifted = tape.add(out, r).unwrap();
    tape.sq_l2_norm(shifted)
}

#[test]
fn conv2d_gradients() {
    let mut rng = rng_from_seed(100);
    for case in 0..CASES {
        let stride = 1 + case % 2;
        let padding = case % 2;
        let x = randn(&[2, 3, 6, 6], &mut rng);
        let w = randn(&[4, 3, 3, 3], &mut rng);
        let b = randn(&[4], &mut rng);
        let h_out = (6 + 2 * padding - 3) / stride + 1;
        let offset = randn(&[2, 4, h_out, h_out], &mut rng);
        for target in 0..3 {
            check_input(&[x.clone(), w.clone(), b.clone()], target, CONV_TOL, |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let wv = tape.leaf(&ins[1]);
                let bv = tape.leaf(&ins[2]);
                let out = tape.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
                (reduce(tape, out, &offset), vec![xv, wv, bv])
            });
        }
    }
}

#[test]
fn batchnorm_train_mode_gradients() {
    let mut rng = rng_from_seed(101);
    for _ in 0..CASES {
        let x = randn(&[3, 2, 4, 4], &mut rng);
        let gamma = randn(&[2], &mut rng);
        let beta = randn(&[2], &mut rng);
        let offset = randn(&[3, 2, 4, 4], &mut rng);
        let running_mean = vec![0.1, -0.2];
        let running_var = vec![1.5, 0.7];
        for target in 0..3 {
            let (rm, rv) = (running_mean.clone(), running_var.clone());
            let offset = offset.clone();
            check_input(&[x.clone(), gamma.clone(), beta.clone()], target, TOL, move |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let gv = tape.leaf(&ins[1]);
                let bv = tape.leaf(&ins[2]);
                let (out, _) = tape
                    .batchnorm2d(xv, gv, bv, &rm, &rv, BnMode::Train, 0.1, 1e-5)
                    .unwrap();
                (reduce(tape, out, &offset), vec![xv, gv, bv])
            });
        }
    }
}

#[test]
fn batchnorm_eval_mode_gradients() {
    let mut rng = rng_from_seed(102);
    for _ in 0..CASES {
        let x = randn(&[2, 3, 3, 3], &mut rng);
        let gamma = randn(&[3], &mut rng);
        let beta = randn(&[3], &mut rng);
        let offset = randn(&[2, 3, 3, 3], &mut rng);
        let running_mean = vec![0.3, -0.1, 0.8];
        let running_var = vec![2.0, 0.5, 1.1];
        for target in 0..3 {
            let (rm, rv) = (running_mean.clone(), running_var.clone());
            let offset = offset.clone();
            check_input(&[x.clone(), gamma.clone(), beta.clone()], target, TOL, move |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let gv = tape.leaf(&ins[1]);
                let bv = tape.leaf(&ins[2]);
                let (out, _) = tape
                    .batchnorm2d(xv, gv, bv, &rm, &rv, BnMode::Eval, 0.1, 1e-5)
                    .unwrap();
                (reduce(tape, out, &offset), vec![xv, gv, bv])
            });
        }
    }
}

#[test]
fn relu_gradients() {
    let mut rng = rng_from_seed(103);
    for _ in 0..CASES {
        let mut x = randn(&[4, 5], &mut rng);
        away_from_zero(&mut x, 0.05);
        let offset = randn(&[4, 5], &mut rng);
        check_input(&[x], 0, TOL, |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            let out = tape.relu(xv);
            (reduce(tape, out, &offset), vec![xv])
        });
    }
}

#[test]
fn add_gradients() {
    let mut rng = rng_from_seed(104);
    for _ in 0..CASES {
        let a = randn(&[3, 4], &mut rng);
        let b = randn(&[3, 4], &mut rng);
        let offset = randn(&[3, 4], &mut rng);
        for target in 0..2 {
            check_input(&[a.clone(), b.clone()], target, TOL, |tape, ins| {
                let av = tape.leaf(&ins[0]);
                let bv = tape.leaf(&ins[1]);
                let out = tape.add(av, bv).unwrap();
                (reduce(tape, out, &offset), vec![av, bv])
            });
        }
    }
}

#[test]
fn maxpool_gradients() {
    let mut rng = rng_from_seed(105);
    for case in 0..CASES {
        let (k, s) = if case % 2 == 0 { (2, 2) } else { (3, 1) };
        let x = randn(&[2, 2, 6, 6], &mut rng);
        let out_hw = (6 - k) / s + 1;
        let offset = randn(&[2, 2, out_hw, out_hw], &mut rng);
        check_input(&[x], 0, TOL, move |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            let out = tape.maxpool2d(xv, k, s).unwrap();
            (reduce(tape, out, &offset), vec![xv])
        });
    }
}

#[test]
fn global_avg_pool_gradients() {
    let mut rng = rng_from_seed(106);
    for _ in 0..CASES {
        let x = randn(&[2, 3, 4, 5], &mut rng);
        let offset = randn(&[2, 3], &mut rng);
        check_input(&[x], 0, TOL, |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            let out = tape.global_avg_pool(xv).unwrap();
            (reduce(tape, out, &offset), vec![xv])
        });
    }
}

#[test]
fn linear_gradients() {
    let mut rng = rng_from_seed(107);
    for _ in 0..CASES {
        let x = randn(&[3, 5], &mut rng);
        let w = randn(&[4, 5], &mut rng);
        let b = randn(&[4], &mut rng);
        let offset = randn(&[3, 4], &mut rng);
        for target in 0..3 {
            check_input(&[x.clone(), w.clone(), b.clone()], target, TOL, |tape, ins| {
                let xv = tape.leaf(&ins[0]);
                let wv = tape.leaf(&ins[1]);
                let bv = tape.leaf(&ins[2]);
                let out = tape.linear(xv, wv, Some(bv)).unwrap();
                (reduce(tape, out, &offset), vec![xv, wv, bv])
            });
        }
    }
}

#[test]
fn softmax_cross_entropy_gradients() {
    let mut rng = rng_from_seed(108);
    for case in 0..CASES {
        let logits = randn(&[4, 5], &mut rng);
        let labels: Vec<usize> = (0..4).map(|i| (i + case) % 5).collect();
        let l = labels.clone();
        check_input(&[logits], 0, TOL, move |tape, ins| {
            let lv = tape.leaf(&ins[0]);
            (tape.softmax_cross_entropy(lv, &l).unwrap(), vec![lv])
        });
    }
}

#[test]
fn l1_distance_sum_gradients() {
    let mut rng = rng_from_seed(109);
    for _ in 0..CASES {
        let a = randn(&[3, 4], &mut rng);
        // keep |a - b| bounded away from the kink
        let mut diff = randn(&[3, 4], &mut rng);
        away_from_zero(&mut diff, 0.05);
        let b = Tensor::from_vec(
            vec![3, 4],
            a.data().iter().zip(diff.data()).map(|(x, d)| x - d).collect(),
        )
        .unwrap();
        for target in 0..2 {
            check_input(&[a.clone(), b.clone()], target, TOL, |tape, ins| {
                let av = tape.leaf(&ins[0]);
                let bv = tape.leaf(&ins[1]);
                (tape.l1_distance_sum(av, bv).unwrap(), vec![av, bv])
            });
        }
    }
}

#[test]
fn sq_l2_norm_gradients() {
    let mut rng = rng_from_seed(110);
    for _ in 0..CASES {
        let x = randn(&[6], &mut rng);
        check_input(&[x], 0, TOL, |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            (tape.sq_l2_norm(xv), vec![xv])
        });
    }
}

#[test]
fn sum_gradients() {
    let mut rng = rng_from_seed(111);
    for _ in 0..CASES {
        let x = randn(&[2, 7], &mut rng);
        check_input(&[x], 0, TOL, |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            (tape.sum(xv), vec![xv])
        });
    }
}

#[test]
fn scale_gradients() {
    let mut rng = rng_from_seed(112);
    for case in 0..CASES {
        let x = randn(&[5], &mut rng);
        let c = 0.5 + case as f64 * 0.3;
        check_input(&[x], 0, TOL, move |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            let s = tape.scale(xv, c);
            (tape.sq_l2_norm(s), vec![xv])
        });
    }
}

#[test]
fn tv_loss_gradients() {
    let mut rng = rng_from_seed(113);
    for _ in 0..CASES {
        let x = randn(&[2, 3, 5, 4], &mut rng);
        check_input(&[x], 0, TOL, |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            (tape.tv_loss(xv).unwrap(), vec![xv])
        });
    }
}

#[test]
fn bn_stats_loss_gradients() {
    let mut rng = rng_from_seed(114);
    for _ in 0..CASES {
        let x = randn(&[3, 2, 4, 4], &mut rng);
        let tm = vec![next_gaussian(&mut rng), next_gaussian(&mut rng)];
        let tv = vec![next_gaussian(&mut rng).abs() + 0.5, next_gaussian(&mut rng).abs() + 0.5];
        let (tm2, tv2) = (tm.clone(), tv.clone());
        check_input(&[x], 0, TOL, move |tape, ins| {
            let xv = tape.leaf(&ins[0]);
            (tape.bn_stats_loss(xv, &tm2, &tv2).unwrap(), vec![xv])
        });
    }
}
