mod common;

use common::gradcheck::{run_suite, TOLERANCE};
use semcom::rng::seeded;
use semcom::tensor::{Graph, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    let reports = run_suite(20, 11);
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| format!("{} ({:.2e})", r.op, r.max_rel_err))
        .collect();
    assert!(failed.is_empty(), "ops over {TOLERANCE}: {failed:?}");
}

#[test]
fn backward_is_linear_in_the_loss() {
    // grad(a f + b g) == a grad(f) + b grad(g) on a shared leaf
    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut seeded(3));
    let w = Tensor::randn(&[2, 3, 3, 3], 0.5, &mut seeded(4));
    let grad_of = |a: f64, b: f64| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.constant(w.clone());
        let conv = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let f = g.silu(conv);
        let f = g.sum(f);
        let sq = g.mul(xv, xv).unwrap();
        let h = g.mean(sq);
        let fa = g.scale(f, a);
        let hb = g.scale(h, b);
        let l = g.add(fa, hb).unwrap();
        g.backward(l).unwrap();
        g.grad(xv).unwrap().to_vec()
    };
    let (f, h, mix) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.75));
    for i in 0..f.len() {
        let want = 2.5 * f[i] - 0.75 * h[i];
        assert!((mix[i] - want).abs() <= 1e-12 * (1.0 + want.abs()), "{i}: {} vs {want}", mix[i]);
    }
}

#[test]
fn forward_and_backward_are_bit_reproducible() {
    let run = || {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::randn(&[2, 4, 4, 4], 1.0, &mut seeded(8)));
        let gamma = g.leaf(Tensor::full(&[4], 1.0));
        let n = g.group_norm(x, Some(gamma), None, 2, 1e-5).unwrap();
        let p = g.avg_pool2d(n, 2).unwrap();
        let u = g.upsample_nearest2d(p, 2).unwrap();
        let l = g.mse(u, x).unwrap();
        g.backward(l).unwrap();
        (g.value(l).item().to_bits(), g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
