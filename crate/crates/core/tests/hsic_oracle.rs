mod common;

use common::criteria::hsic_oracle;
use common::{hsic_transcription, normal, seeded};
use ctta::adapter::{hsic, DisentangledFeatures, Kernel};
use ctta::numerics::{Tape, Tensor};

#[test]
fn library_matches_transcription_on_random_instances() {
    let r = hsic_oracle(100);
    assert!(r.worst_abs < 1e-10, "max deviation {:.3e}", r.worst_abs);
}

#[test]
fn two_point_hand_case() {
    let r = hsic_oracle(0);
    assert!((r.two_point - 0.25).abs() < 1e-12, "got {}", r.two_point);
}

#[test]
fn transcription_agrees_with_hand_case() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    assert!((hsic_transcription(&x, &x) - 0.25).abs() < 1e-15);
}

#[test]
fn row_shifts_do_not_change_the_statistic() {
    let mut g = seeded("hsic-shift");
    let inv = normal(&mut g, 7, 3, 1.0);
    let sp = normal(&mut g, 7, 3, 1.0);
    let shift = [0.4, -2.0, 1.1];
    let shifted = Tensor::matrix(7, 3, inv.data().iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect()).unwrap();
    let tape = Tape::new();
    let eval = |a: &Tensor| {
        hsic(&DisentangledFeatures { inv: tape.constant(a.clone()), sp: tape.constant(sp.clone()) }, Kernel::Linear)
            .unwrap()
            .item()
    };
    assert!((eval(&inv) - eval(&shifted)).abs() < 1e-10);
}
