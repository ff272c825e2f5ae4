mod common;

use common::criteria::ot_oracle;
use common::{exact_transport, seeded, simplex, uniform};
use ctta::align::solve_transport;
use ctta::numerics::Tensor;
use rand::Rng as _;

#[test]
fn sinkhorn_matches_exact_transport() {
    let r = ot_oracle(50);
    assert!(r.worst_rel_gap < 0.01, "objective gap {:.4}", r.worst_rel_gap);
    assert!(r.worst_residual < 1e-6, "marginal residual {:.3e}", r.worst_residual);
}

#[test]
fn per_class_mode_is_mass_weighted_mean_cost() {
    let r = ot_oracle(50);
    assert!(r.per_class_gap < 1e-12, "gap {:.3e}", r.per_class_gap);
}

#[test]
fn exact_oracle_on_hand_instances() {
    let cost = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    assert!(exact_transport(&cost, &[0.5, 0.5], &[0.5, 0.5]).abs() < 1e-15);
    assert!((exact_transport(&cost, &[1.0, 0.0], &[0.5, 0.5]) - 0.5).abs() < 1e-15);
    let cost = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![3.0, 1.0, 2.0]]).unwrap();
    let v = exact_transport(&cost, &[0.5, 0.5], &[0.4, 0.3, 0.3]);
    assert!((v - (0.4 + 0.1 * 3.0 + 0.3 + 0.2 * 2.0)).abs() < 1e-12, "got {v}");
}

#[test]
fn sinkhorn_never_beats_the_exact_optimum() {
    let mut g = seeded("ot-lower-bound");
    for _ in 0..30 {
        let (n, m) = (g.gen_range(2..=5), g.gen_range(2..=5));
        let cost = uniform(&mut g, n, m, 0.0, 1.0);
        let a = simplex(&mut g, n);
        let b = simplex(&mut g, m);
        let plan = solve_transport(&cost, &a, &b, 0.05, 100_000, 1e-9).unwrap();
        assert!(plan.objective(&cost) >= exact_transport(&cost, &a, &b) - 1e-8);
    }
}
