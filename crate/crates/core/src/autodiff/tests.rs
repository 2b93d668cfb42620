use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::rng;
use crate::{Error, Result, Tensor};

fn random_tensor(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::normal(r)).collect()).unwrap()
}

/// Contract an arbitrary-shaped node against fixed random weights so the
/// finite-difference check sees every output coordinate.
fn contract_with(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::seeded(seed);
    let w = random_tensor(&mut r, g.value(y).shape());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn l2_normalize_three_four_five() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[3.0, 4.0]]).unwrap());
    let y = g.l2_normalize_rows(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
}

#[test]
fn l2_normalize_rejects_zero_row() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap());
    assert!(matches!(g.l2_normalize_rows(x), Err(Error::Degenerate(_))));
}

#[test]
fn log_sum_exp_symmetric() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[0.0, 0.0]]).unwrap());
    let y = g.log_sum_exp_rows(x, None).unwrap();
    assert!((g.value(y).data()[0] - core::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn log_sum_exp_survives_large_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[800.0, 800.0, -5.0]]).unwrap());
    let y = g.log_sum_exp_rows(x, Some(&[true, true, false])).unwrap();
    assert!((g.value(y).data()[0] - (800.0 + core::f64::consts::LN_2)).abs() < 1e-12);
}

#[test]
fn fully_masked_row_is_rejected() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    assert!(matches!(g.log_sum_exp_rows(x, Some(&[false, false])), Err(Error::Contract(_))));
}

#[test]
fn shape_mismatch_is_contract_violation() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(Error::Contract(_))));
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, c), Err(Error::Contract(_))));
}

#[cfg(debug_assertions)]
#[test]
fn non_finite_results_are_caught_in_debug_builds() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[-1.0]]).unwrap());
    assert!(matches!(g.log(x), Err(Error::NonFinite(_))));
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut r = rng::seeded(11);
    let a = random_tensor(&mut r, &[3, 4]);
    let b = random_tensor(&mut r, &[4, 2]);
    let bb = b.clone();
    let err = grad_check(
        |g, x| {
            let b = g.constant(bb.clone());
            let y = g.matmul(x, b)?;
            contract_with(g, y, 5)
        },
        &a,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
    let aa = a.clone();
    let err = grad_check(
        |g, x| {
            let a = g.constant(aa.clone());
            let y = g.matmul(a, x)?;
            contract_with(g, y, 6)
        },
        &b,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "err {err}");
}

#[test]
fn stop_gradient_forward_is_identity() {
    let mut g = Graph::new();
    let t = Tensor::from_rows(&[[1.5, -2.0], [0.25, 4.0]]).unwrap();
    let x = g.param(t.clone());
    let s = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(s), &t);
}

#[test]
fn stop_gradient_blocks_all_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
    let s = g.stop_gradient(x).unwrap();
    let y = g.sum(s).unwrap();
    g.backward(y).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn stop_gradient_keeps_live_branch() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[2.0]]).unwrap());
    let s = g.stop_gradient(x).unwrap();
    let p = g.mul(x, s).unwrap();
    let y = g.sum(p).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
}

#[test]
fn grad_check_on_square() {
    let err = grad_check(
        |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        },
        &Tensor::from_rows(&[[3.0]]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9);
}

#[test]
fn grad_check_rejects_non_scalar_output() {
    let res = grad_check(|g, x| g.relu(x), &Tensor::zeros(&[2, 2]), 1e-5);
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[1.0, -1.0]]).unwrap());
    let s = g.scale(x, 3.0).unwrap();
    let y = g.sum(s).unwrap();
    g.backward(y).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0, 6.0]);
    g.zero_grad();
    assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn fan_out_gradients_add() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
    let a = g.add(x, x).unwrap();
    let b = g.mul(a, x).unwrap(); // 2x^2
    let y = g.sum(b).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap());
    let gamma = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let beta = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let rm = [1.0, 2.0];
    let rv = [4.0, 1.0];
    let (y, stats) = g
        .batch_norm(x, gamma, beta, BatchNormMode::Eval { running_mean: &rm, running_var: &rv, eps: 0.0 })
        .unwrap();
    assert!(stats.is_none());
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 1.0, 9.0]);

    let (_, stats) = g.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: 1e-5 }).unwrap();
    let stats = stats.unwrap();
    assert_eq!(stats.mean, vec![2.0, 4.0]);
    assert_eq!(stats.var, vec![1.0, 4.0]);
}

/// One scalar-valued probe per primitive, parameterised by the input point.
type Probe = fn(&mut Graph, Var) -> Result<Var>;

fn primitive_probes() -> Vec<(&'static str, Vec<usize>, bool, Probe)> {
    // (name, input shape, needs positive input, probe)
    vec![
        ("matmul", vec![3, 4], false, |g, x| {
            let w = g.constant(Tensor::matrix(4, 2, vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.4, 0.9, -0.6]).unwrap());
            let y = g.matmul(x, w)?;
            contract_with(g, y, 1)
        }),
        ("add", vec![3, 4], false, |g, x| {
            let y = g.add(x, x)?;
            contract_with(g, y, 2)
        }),
        ("add_row", vec![1, 4], false, |g, x| {
            let a = g.constant(Tensor::full(&[3, 4], 0.5));
            let y = g.add(a, x)?;
            contract_with(g, y, 3)
        }),
        ("sub", vec![3, 4], false, |g, x| {
            let c = g.constant(Tensor::full(&[3, 4], 0.2));
            let y = g.sub(c, x)?;
            contract_with(g, y, 4)
        }),
        ("mul", vec![3, 4], false, |g, x| {
            let y = g.mul(x, x)?;
            contract_with(g, y, 5)
        }),
        ("scale", vec![3, 4], false, |g, x| {
            let y = g.scale(x, -1.7)?;
            contract_with(g, y, 6)
        }),
        ("relu", vec![3, 4], false, |g, x| {
            let y = g.relu(x)?;
            contract_with(g, y, 7)
        }),
        ("exp", vec![3, 4], false, |g, x| {
            let y = g.exp(x)?;
            contract_with(g, y, 8)
        }),
        ("log", vec![3, 4], true, |g, x| {
            let y = g.log(x)?;
            contract_with(g, y, 9)
        }),
        ("sum", vec![3, 4], false, |g, x| {
            let y = g.mul(x, x)?;
            g.sum(y)
        }),
        ("mean", vec![3, 4], false, |g, x| {
            let y = g.mul(x, x)?;
            g.mean(y)
        }),
        ("log_sum_exp_rows", vec![3, 4], false, |g, x| {
            let y = g.log_sum_exp_rows(x, Some(&[true, false, true, true, true, true, false, true, true, true, true, true]))?;
            contract_with(g, y, 10)
        }),
        ("softmax_cross_entropy", vec![3, 4], false, |g, x| g.softmax_cross_entropy(x, &[0, 3, 1])),
        ("l2_normalize_rows", vec![3, 4], false, |g, x| {
            let y = g.l2_normalize_rows(x)?;
            contract_with(g, y, 11)
        }),
        ("batch_norm_train", vec![5, 3], false, |g, x| {
            let gamma = g.constant(Tensor::new(vec![3], vec![1.2, 0.8, -0.5]).unwrap());
            let beta = g.constant(Tensor::new(vec![3], vec![0.1, 0.0, 0.3]).unwrap());
            let (y, _) = g.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: 1e-5 })?;
            contract_with(g, y, 12)
        }),
        ("batch_norm_gamma", vec![3], false, |g, gamma| {
            let x = g.constant(Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap());
            let beta = g.constant(Tensor::zeros(&[3]));
            let (y, _) = g.batch_norm(x, gamma, beta, BatchNormMode::Train { eps: 1e-5 })?;
            contract_with(g, y, 13)
        }),
        ("batch_norm_eval", vec![4, 3], false, |g, x| {
            let gamma = g.constant(Tensor::new(vec![3], vec![1.2, 0.8, -0.5]).unwrap());
            let beta = g.constant(Tensor::new(vec![3], vec![0.1, 0.0, 0.3]).unwrap());
            let mode = BatchNormMode::Eval { running_mean: &[0.1, -0.2, 0.3], running_var: &[1.5, 0.7, 2.0], eps: 1e-5 };
            let (y, _) = g.batch_norm(x, gamma, beta, mode)?;
            contract_with(g, y, 14)
        }),
        ("transpose", vec![3, 4], false, |g, x| {
            let y = g.transpose(x)?;
            contract_with(g, y, 15)
        }),
        ("concat_rows", vec![3, 4], false, |g, x| {
            let c = g.constant(Tensor::full(&[2, 4], 1.0));
            let y = g.concat_rows(&[c, x, x])?;
            contract_with(g, y, 16)
        }),
        ("slice_rows", vec![3, 4], false, |g, x| {
            let y = g.slice_rows(x, 1..3)?;
            contract_with(g, y, 17)
        }),
    ]
}

#[test]
fn every_primitive_passes_gradient_check_at_random_points() {
    for (name, shape, positive, probe) in primitive_probes() {
        let mut r = rng::seeded(0xC0FFEE);
        for trial in 0..20 {
            let mut p = random_tensor(&mut r, &shape);
            if positive {
                p = p.map(|v| 0.2 + v.abs());
            }
            let err = grad_check(probe, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "{name} trial {trial}: relative error {err:e}");
        }
    }
}

#[test]
fn gradient_is_linear_in_the_objective() {
    let mut r = rng::seeded(3);
    let point = random_tensor(&mut r, &[4, 3]);
    let grad_of = |alpha: f64, beta: f64| {
        let mut g = Graph::new();
        let x = g.param(point.clone());
        let e = g.exp(x).unwrap();
        let f = g.sum(e).unwrap();
        let n = g.l2_normalize_rows(x).unwrap();
        let s = g.mul(n, x).unwrap();
        let h = g.sum(s).unwrap();
        let fa = g.scale(f, alpha).unwrap();
        let hb = g.scale(h, beta).unwrap();
        let y = g.add(fa, hb).unwrap();
        g.backward(y).unwrap();
        g.grad(x).unwrap().clone()
    };
    let (a, b) = (0.7, -2.3);
    let combined = grad_of(a, b);
    let gf = grad_of(1.0, 0.0);
    let gh = grad_of(0.0, 1.0);
    for i in 0..combined.len() {
        let expect = a * gf.data()[i] + b * gh.data()[i];
        assert!((combined.data()[i] - expect).abs() < 1e-10);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut r = rng::seeded(99);
        let a = random_tensor(&mut r, &[6, 5]);
        let w = random_tensor(&mut r, &[5, 4]);
        let mut g = Graph::new();
        let a = g.param(a);
        let w = g.param(w);
        let h = g.matmul(a, w).unwrap();
        let h = g.relu(h).unwrap();
        let z = g.l2_normalize_rows(h).unwrap();
        let l = g.log_sum_exp_rows(z, None).unwrap();
        let y = g.mean(l).unwrap();
        g.backward(y).unwrap();
        (g.value(y).clone(), g.grad(a).unwrap().clone(), g.grad(w).unwrap().clone())
    };
    let (v1, ga1, gw1) = run();
    let (v2, ga2, gw2) = run();
    assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
    assert!(ga1.data().iter().zip(ga2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(gw1.data().iter().zip(gw2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Builds a random composite graph over `x` where one operand path is routed
/// through stop-gradient. Returns the output and the stopped branch's input.
fn random_graph_with_stop(g: &mut Graph, x: Var, ops: &[u8], r: &mut rng::Rng) -> Result<(Var, Var)> {
    let frozen_src = g.param(random_tensor(r, g.value(x).shape()));
    let frozen = g.stop_gradient(frozen_src)?;
    let mut live = x;
    let mut dead = frozen;
    for &op in ops {
        match op % 6 {
            0 => live = g.mul(live, dead)?,
            1 => live = g.add(live, dead)?,
            2 => {
                let d = g.scale(dead, 0.3)?;
                dead = g.exp(d)?;
            }
            3 => live = g.relu(live)?,
            4 => {
                let s = g.sub(dead, live)?;
                live = g.scale(s, 0.5)?;
            }
            _ => dead = g.scale(dead, r.random_range(-1.0..1.0))?,
        }
    }
    let y = g.mul(live, dead)?;
    let y = g.sum(y)?;
    Ok((y, frozen_src))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn stop_gradient_contributes_zero_in_random_graphs(ops in prop::collection::vec(any::<u8>(), 1..12), seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let mut g = Graph::new();
        let x = g.param(random_tensor(&mut r, &[2, 3]));
        let (y, frozen_src) = random_graph_with_stop(&mut g, x, &ops, &mut r).unwrap();
        g.backward(y).unwrap();
        prop_assert!(g.grad(frozen_src).unwrap().data().iter().all(|&v| v == 0.0));
        let direct = g.gradient(y, frozen_src).unwrap();
        prop_assert!(direct.data().iter().all(|&v| v == 0.0));
    }
}
