use ctta::adapter::{hsic, orth_loss, AdapterSite, DisentangledFeatures, Kernel};
use ctta::align::solve_transport;
use ctta::harness::ExperimentConfig;
use ctta::numerics::{Tape, Tensor};
use ctta::paramgen::{q_sample, DiffusionSchedule, ParamVector};
use ctta::rng;
use ctta::stream::{corrupt, make_source, Corruption, DomainSpec};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn weights(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05..1.0f64, n).prop_map(|w| {
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    })
}

fn feature_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..8, 1usize..5).prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn linear_hsic_and_orth_are_nonnegative((inv, sp) in feature_pair()) {
        let tape = Tape::new();
        let f = DisentangledFeatures { inv: tape.constant(inv), sp: tape.constant(sp) };
        prop_assert!(hsic(&f, Kernel::Linear).unwrap().item() >= -1e-12);
        prop_assert!(orth_loss(&f).unwrap().item() >= 0.0);
    }

    #[test]
    fn zero_specific_features_are_independent((inv, sp) in feature_pair()) {
        let tape = Tape::new();
        let zeros = Tensor::zeros(sp.shape());
        let f = DisentangledFeatures { inv: tape.constant(inv), sp: tape.constant(zeros) };
        prop_assert_eq!(hsic(&f, Kernel::Linear).unwrap().item(), 0.0);
        prop_assert_eq!(orth_loss(&f).unwrap().item(), 0.0);
    }

    #[test]
    fn sinkhorn_plans_respect_marginals(
        (cost, a, b) in (1usize..6, 1usize..6).prop_flat_map(|(n, m)| (matrix(n, m), weights(n), weights(m))),
    ) {
        let cost = cost.map(f64::abs);
        let plan = solve_transport(&cost, &a, &b, 0.1, 50_000, 1e-9).unwrap();
        prop_assert!(plan.plan.data().iter().all(|v| *v >= 0.0));
        prop_assert!(plan.residual < 1e-9);
        prop_assert!((plan.total_mass() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn noiseless_forward_marginal_scales_the_input(z in matrix(2, 3), t in 1usize..=100) {
        let s = DiffusionSchedule::scaled_linear(100).unwrap();
        let out = q_sample(&z, t, &s, &Tensor::zeros(&[2, 3])).unwrap();
        let k = s.alpha_bar(t).sqrt();
        for (o, v) in out.data().iter().zip(z.data()) {
            prop_assert!((o - k * v).abs() < 1e-12);
        }
    }

    #[test]
    fn param_vectors_round_trip(seed in any::<u64>(), d in 2usize..6, r1 in 1usize..3, r2 in 1usize..3) {
        let mut g = rng::stream(seed, "site");
        let site = AdapterSite::new(Tensor::eye(d), r1, Some(r2), &mut g).unwrap();
        let packed = ParamVector::pack(3, &site);
        prop_assert_eq!(packed.len(), site.parameter_count());
        let mut other = AdapterSite::new(Tensor::eye(d), r1, Some(r2), &mut rng::stream(seed ^ 1, "site")).unwrap();
        packed.unpack_into(&mut other).unwrap();
        prop_assert_eq!(ParamVector::pack(3, &other), packed);
    }

    #[test]
    fn corruption_keeps_labels_and_grows_with_severity(seed in any::<u64>(), which in 1usize..6) {
        let (_, test) = make_source(seed, 8, 40, 4, 8).unwrap();
        let kind = Corruption::ALL[which];
        let mut last = 0.0;
        for sev in 1..=5u8 {
            let out = corrupt(&test, &DomainSpec::new(kind, sev, seed)).unwrap();
            prop_assert_eq!(&out.labels, &test.labels);
            let dist = out.features.zip_map(&test.features, |a, b| (a - b) * (a - b)).unwrap().sum();
            prop_assert!(sev == 1 || dist > last, "{:?} severity {} distance {} not above {}", kind, sev, dist, last);
            last = dist;
        }
    }

    #[test]
    fn configs_round_trip_through_toml(
        lo in 0.0..5.0f64, lh in 0.0..5.0f64, lca in 0.0..2.0f64, lr in 1e-6..1.0f64, blend in 0.0..=1.0f64, seed in 0..=ctta::harness::MAX_SEED,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.losses.lambda_orth = lo;
        cfg.losses.lambda_hsic = lh;
        cfg.losses.lambda_ca = lca;
        cfg.optimizer.lr = lr;
        cfg.generator.blend = blend;
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        prop_assert_eq!(back, cfg);
    }
}
