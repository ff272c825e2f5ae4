//! One measurement per acceptance criterion.

use std::time::Instant;

use ctta::adapter::{adapter_forward, hsic, orth_loss, AdapterKind, BoundSite, DisentangledFeatures, Kernel};
use ctta::align::{compute_class_centers, ot_loss, solve_transport, transport_cost, AlignMode, OtOptions};
use ctta::harness::{
    build_stream, kl_align_loss, metrics_csv, offline_train, run_continual, run_with_model, AlignChoice,
    ArtifactCache, ExperimentConfig,
};
use ctta::model::source_loss;
use ctta::numerics::{Tape, Tensor};
use ctta::paramgen::{
    diffusion_loss_on, q_sample, q_step, reverse_diffusion, train_denoiser, Denoiser, DiffusionSchedule,
    ParamAutoencoder,
};
use ctta::rng;
use rand::Rng as _;

use super::*;

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

pub const GRADIENT_INSTANCES: usize = 20;
pub const GRADIENT_TOL: f64 = 1e-4;

/// Worst relative gradient error of one operation over its instances.
pub struct GradientReport {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

fn worst_over(op: &'static str, instances: usize, mut one: impl FnMut(&mut Rng) -> f64) -> GradientReport {
    let mut g = seeded(op);
    let worst = (0..instances).map(|_| one(&mut g)).fold(0.0, f64::max);
    GradientReport { op, instances, worst }
}

pub fn grad_adapter_forward(instances: usize) -> GradientReport {
    worst_over("adapter_forward", instances, |g| {
        let (n, d) = (g.gen_range(2..6), g.gen_range(2..6));
        let (r1, r2) = (g.gen_range(1..3), g.gen_range(1..3));
        let weights = normal(g, n, d, 1.0);
        let inputs = vec![
            normal(g, n, d, 1.0),
            normal(g, d, d, 0.5),
            normal(g, d, r1, 0.5),
            normal(g, r1, d, 0.5),
            normal(g, d, r2, 0.5),
            normal(g, r2, d, 0.5),
        ];
        gradient_error(
            &|tape: &Tape, v| {
                let site = BoundSite { base: v[1], a_inv: v[2], b_inv: v[3], specific: Some((v[4], v[5])) };
                let (y, feats) = adapter_forward(v[0], &site)?;
                let feats = feats.expect("dual site");
                let w = tape.constant(weights.clone());
                y.mul(w)?.sum().add(feats.inv.square().sum())?.add(feats.sp.tanh().sum())
            },
            &inputs,
        )
    })
}

pub fn grad_orth(instances: usize) -> GradientReport {
    worst_over("orth_loss", instances, |g| {
        let (n, d) = (g.gen_range(2..8), g.gen_range(1..6));
        let inputs = vec![normal(g, n, d, 1.0), normal(g, n, d, 1.0)];
        gradient_error(&|_: &Tape, v| orth_loss(&DisentangledFeatures { inv: v[0], sp: v[1] }), &inputs)
    })
}

pub fn grad_hsic(instances: usize) -> GradientReport {
    worst_over("hsic", instances, |g| {
        let (n, d) = (g.gen_range(2..9), g.gen_range(1..6));
        let kernel = if g.gen_bool(0.5) { Kernel::Linear } else { Kernel::Rbf { sigma: Some(g.gen_range(0.5..2.0)) } };
        let inputs = vec![normal(g, n, d, 1.0), normal(g, n, d, 1.0)];
        gradient_error(&|_: &Tape, v| hsic(&DisentangledFeatures { inv: v[0], sp: v[1] }, kernel), &inputs)
    })
}

pub fn grad_recon(instances: usize) -> GradientReport {
    worst_over("recon_loss", instances, |g| {
        let p = g.gen_range(3..8);
        let z = g.gen_range(1..p);
        let hidden = g.gen_range(2..6);
        let mut ae = ParamAutoencoder::new(p, hidden, z, g).unwrap();
        let n = g.gen_range(1..5);
        ae.offset = normal(g, 1, p, 0.3);
        ae.scale = g.gen_range(0.5..2.0);
        let mut inputs = vec![normal(g, n, p, 1.0)];
        inputs.extend(ae.encoder.params().into_iter().chain(ae.decoder.params()).map(|q| q.value.clone()));
        gradient_error(&|_: &Tape, v| ae.recon_loss_on(&v[1..], v[0]), &inputs)
    })
}

pub fn grad_diffusion(instances: usize) -> GradientReport {
    let schedule = DiffusionSchedule::scaled_linear(50).unwrap();
    worst_over("diffusion_loss", instances, |g| {
        let (z, c, hidden) = (g.gen_range(1..4), g.gen_range(1..4), g.gen_range(2..6));
        let den = Denoiser::new(z, c, hidden, g);
        let n = g.gen_range(1..5);
        let z0 = normal(g, n, z, 1.0);
        let cond = normal(g, n, c, 1.0);
        let noise_seed: u64 = g.gen();
        let inputs: Vec<Tensor> = den.net.params().into_iter().map(|q| q.value.clone()).collect();
        gradient_error(
            &|_: &Tape, v| {
                let mut r = rng::stream(noise_seed, "noise");
                diffusion_loss_on(&den, v, &z0, &cond, &schedule, &mut r)
            },
            &inputs,
        )
    })
}

fn random_centers(g: &mut Rng, k: usize, d: usize) -> ctta::align::ClassCenters {
    let per = 4;
    let feats = normal(g, k * per, d, 1.0);
    let labels: Vec<usize> = (0..k * per).map(|i| i / per).collect();
    compute_class_centers(&feats, &labels, k).unwrap()
}

pub fn grad_ot(instances: usize) -> GradientReport {
    worst_over("ot_loss", instances, |g| {
        let (k, d, n) = (g.gen_range(2..5), g.gen_range(1..5), g.gen_range(2..8));
        let centers = random_centers(g, k, d);
        let pseudo: Vec<usize> = (0..n).map(|_| g.gen_range(0..k)).collect();
        let mut conf: Vec<f64> = (0..n).map(|_| g.gen_range(0.0..1.0)).collect();
        conf[0] = 1.0;
        let opts = OtOptions { tau_conf: 0.5, ..OtOptions::default() };
        let inputs = vec![normal(g, n, d, 1.0)];
        gradient_error(&|_: &Tape, v| Ok(ot_loss(v[0], &pseudo, &conf, &centers, &opts)?.loss), &inputs)
    })
}

pub fn grad_kl(instances: usize) -> GradientReport {
    worst_over("kl_align_loss", instances, |g| {
        let (k, d) = (g.gen_range(2..4), g.gen_range(1..5));
        let centers = random_centers(g, k, d);
        let per = g.gen_range(2..4);
        let n = k * per;
        let pseudo: Vec<usize> = (0..n).map(|i| i % k).collect();
        let conf = vec![1.0; n];
        let inputs = vec![normal(g, n, d, 1.0)];
        gradient_error(&|_: &Tape, v| kl_align_loss(v[0], &pseudo, &conf, &centers, 0.5), &inputs)
    })
}

pub fn grad_source(instances: usize) -> GradientReport {
    worst_over("source_loss", instances, |g| {
        let (n, c) = (g.gen_range(1..8), g.gen_range(2..6));
        let labels: Vec<usize> = (0..n).map(|_| g.gen_range(0..c)).collect();
        let inputs = vec![normal(g, n, c, 2.0)];
        gradient_error(&|_: &Tape, v| source_loss(v[0], &labels), &inputs)
    })
}

pub fn gradient_suite() -> (Vec<GradientReport>, f64) {
    let start = Instant::now();
    let n = GRADIENT_INSTANCES;
    let reports = vec![
        grad_adapter_forward(n),
        grad_orth(n),
        grad_hsic(n),
        grad_recon(n),
        grad_diffusion(n),
        grad_ot(n),
        grad_kl(n),
        grad_source(n),
    ];
    (reports, start.elapsed().as_secs_f64())
}

pub fn criterion_1() -> Outcome {
    let (reports, secs) = gradient_suite();
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    let pass = reports.iter().all(|r| r.instances >= 20 && r.worst < GRADIENT_TOL) && secs < 30.0;
    let per: Vec<String> = reports.iter().map(|r| format!("{}={:.1e}", r.op, r.worst)).collect();
    Outcome::new(pass, format!("worst rel err {worst:.2e} (tol 1e-4), {secs:.1}s (limit 30s); {}", per.join(" ")))
}

pub struct HsicReport {
    pub worst_abs: f64,
    pub two_point: f64,
}

pub fn hsic_oracle(instances: usize) -> HsicReport {
    let mut g = seeded("hsic-oracle");
    let mut worst_abs: f64 = 0.0;
    for _ in 0..instances {
        let (n, d) = (g.gen_range(2..=16), g.gen_range(1..=8));
        let inv = normal(&mut g, n, d, 1.0);
        let sp = normal(&mut g, n, d, 1.0);
        let tape = Tape::new();
        let f = DisentangledFeatures { inv: tape.constant(inv.clone()), sp: tape.constant(sp.clone()) };
        let lib = hsic(&f, Kernel::Linear).unwrap().item();
        worst_abs = worst_abs.max((lib - hsic_transcription(&inv, &sp)).abs());
    }
    let tape = Tape::new();
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
    let f = DisentangledFeatures { inv: tape.constant(x.clone()), sp: tape.constant(x) };
    HsicReport { worst_abs, two_point: hsic(&f, Kernel::Linear).unwrap().item() }
}

pub fn criterion_2() -> Outcome {
    let r = hsic_oracle(100);
    let pass = r.worst_abs < 1e-10 && (r.two_point - 0.25).abs() < 1e-12;
    Outcome::new(
        pass,
        format!("100 instances, max |lib - transcription| {:.2e} (tol 1e-10); n=2 case {:.15}", r.worst_abs, r.two_point),
    )
}

/// Largest deviation, in standard errors, of the Monte-Carlo mean and
/// variance of `z_t` from the closed-form marginal.
pub struct MarginalCheck {
    pub t: usize,
    pub method: &'static str,
    pub mean_z: f64,
    pub var_z: f64,
}

pub const MARGINAL_DRAWS: usize = 10_000;

pub fn marginal_checks(steps: usize) -> Vec<MarginalCheck> {
    let schedule = DiffusionSchedule::scaled_linear(steps).unwrap();
    let z0 = Tensor::row(vec![1.5, -0.7, 0.0]);
    let dims = z0.cols();
    let mut out = Vec::new();
    for t in [1, steps / 2, steps] {
        let ab = schedule.alpha_bar(t);
        for method in ["closed_form", "composed"] {
            let mut g = seeded(&format!("marginal-{method}-{t}"));
            let mut samples = vec![Vec::with_capacity(MARGINAL_DRAWS); dims];
            for _ in 0..MARGINAL_DRAWS {
                let zt = if method == "closed_form" {
                    let e = Tensor::row(rng::normal_vec(&mut g, dims));
                    q_sample(&z0, t, &schedule, &e).unwrap()
                } else {
                    let mut z = z0.clone();
                    for s in 1..=t {
                        let e = Tensor::row(rng::normal_vec(&mut g, dims));
                        z = q_step(&z, s, &schedule, &e).unwrap();
                    }
                    z
                };
                for (k, v) in zt.data().iter().enumerate() {
                    samples[k].push(*v);
                }
            }
            let nd = MARGINAL_DRAWS as f64;
            let (mut mean_z, mut var_z): (f64, f64) = (0.0, 0.0);
            for (k, s) in samples.iter().enumerate() {
                let (m, v) = moments(s);
                let want_var = 1.0 - ab;
                let se_mean = (want_var / nd).sqrt();
                let se_var = want_var * (2.0 / (nd - 1.0)).sqrt();
                mean_z = mean_z.max((m - ab.sqrt() * z0.data()[k]).abs() / se_mean);
                var_z = var_z.max((v - want_var).abs() / se_var);
            }
            out.push(MarginalCheck { t, method, mean_z, var_z });
        }
    }
    out
}

pub fn criterion_3() -> Outcome {
    let start = Instant::now();
    let checks = marginal_checks(100);
    let secs = start.elapsed().as_secs_f64();
    let pass = checks.iter().all(|c| c.mean_z < 3.0 && c.var_z < 3.0) && secs < 60.0;
    let per: Vec<String> = checks
        .iter()
        .map(|c| format!("t={} {} mean {:.2}se var {:.2}se", c.t, c.method, c.mean_z, c.var_z))
        .collect();
    Outcome::new(pass, format!("{secs:.1}s; {}", per.join("; ")))
}

pub struct MixtureReport {
    /// Per-mode distance between the mean of the samples nearest to the mode and the mode.
    pub mode_errors: [f64; 2],
    pub mode_shares: [f64; 2],
    /// Distance between the sample mean and the mixture mean.
    pub mixture_mean_error: f64,
}

pub const MIXTURE_MODES: [[f64; 2]; 2] = [[-1.5, 1.0], [1.5, -1.0]];

pub fn mixture_sanity() -> MixtureReport {
    let mut g = seeded("mixture");
    let steps = 100;
    let schedule = DiffusionSchedule::scaled_linear(steps).unwrap();
    let n = 512;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let m = MIXTURE_MODES[i % 2];
        let e = rng::normal_vec(&mut g, 2);
        rows.push(vec![m[0] + 0.2 * e[0], m[1] + 0.2 * e[1]]);
    }
    let z0 = Tensor::from_rows(&rows).unwrap();
    let cond = Tensor::zeros(&[n, 1]);
    let mut den = Denoiser::new(2, 1, 64, &mut g);
    train_denoiser(&mut den, &z0, &cond, &schedule, 4000, 128, 2e-3, &mut g).unwrap();

    let draws = 2000;
    let start = normal(&mut g, draws, 2, 1.0);
    let t0 = (1.0 * steps as f64).ceil() as usize;
    let samples = reverse_diffusion(&den, &start, &Tensor::zeros(&[draws, 1]), t0, &schedule, Some(&mut g)).unwrap();

    let mut sums = [[0.0; 2]; 2];
    let mut counts = [0usize; 2];
    let mut total = [0.0; 2];
    for i in 0..draws {
        let x = samples.row_slice(i);
        let k = if transport_cost(x, &MIXTURE_MODES[0]).unwrap() <= transport_cost(x, &MIXTURE_MODES[1]).unwrap() {
            0
        } else {
            1
        };
        counts[k] += 1;
        for c in 0..2 {
            sums[k][c] += x[c];
            total[c] += x[c];
        }
    }
    let mut mode_errors = [f64::INFINITY; 2];
    for k in 0..2 {
        if counts[k] > 0 {
            let m: Vec<f64> = sums[k].iter().map(|s| s / counts[k] as f64).collect();
            mode_errors[k] = transport_cost(&m, &MIXTURE_MODES[k]).unwrap().sqrt();
        }
    }
    let overall: Vec<f64> = total.iter().map(|s| s / draws as f64).collect();
    MixtureReport {
        mode_errors,
        mode_shares: [counts[0] as f64 / draws as f64, counts[1] as f64 / draws as f64],
        mixture_mean_error: transport_cost(&overall, &[0.0, 0.0]).unwrap().sqrt(),
    }
}

pub fn criterion_4(recon_errors: &[f64]) -> Outcome {
    let r = mixture_sanity();
    let recon = recon_errors.iter().cloned().fold(0.0, f64::max);
    let pass = r.mode_errors.iter().all(|e| *e < 0.1)
        && r.mode_shares.iter().all(|s| (0.35..=0.65).contains(s))
        && !recon_errors.is_empty()
        && recon < 1e-3;
    Outcome::new(
        pass,
        format!(
            "component mean errors {:.3}/{:.3} (tol 0.1), shares {:.2}/{:.2} (need 0.35..0.65), pooled mean error {:.3}; AE recon {:.2e} (tol 1e-3)",
            r.mode_errors[0], r.mode_errors[1], r.mode_shares[0], r.mode_shares[1], r.mixture_mean_error, recon
        ),
    )
}

pub struct OtOracleReport {
    pub worst_rel_gap: f64,
    pub worst_residual: f64,
    pub per_class_gap: f64,
}

pub fn ot_oracle(instances: usize) -> OtOracleReport {
    let mut g = seeded("ot-oracle");
    let mut worst_rel_gap: f64 = 0.0;
    let mut worst_residual: f64 = 0.0;
    for _ in 0..instances {
        let (n, m) = (g.gen_range(2..=5), g.gen_range(2..=5));
        let cost = uniform(&mut g, n, m, 0.0, 1.0);
        let a = simplex(&mut g, n);
        let b = simplex(&mut g, m);
        let plan = solve_transport(&cost, &a, &b, 1e-3, 500_000, 1e-8).unwrap();
        let exact = exact_transport(&cost, &a, &b);
        worst_rel_gap = worst_rel_gap.max((plan.objective(&cost) - exact).abs() / exact.abs().max(1e-12));
        let p = &plan.plan;
        let mut res: f64 = 0.0;
        for i in 0..n {
            res += ((0..m).map(|j| p.get(i, j)).sum::<f64>() - a[i]).abs();
        }
        for j in 0..m {
            res += ((0..n).map(|i| p.get(i, j)).sum::<f64>() - b[j]).abs();
        }
        worst_residual = worst_residual.max(res);
    }

    let mut per_class_gap: f64 = 0.0;
    for _ in 0..instances {
        let (k, d, n) = (g.gen_range(2..5), g.gen_range(1..5), g.gen_range(1..9));
        let centers = random_centers(&mut g, k, d);
        let x = normal(&mut g, n, d, 1.0);
        let pseudo: Vec<usize> = (0..n).map(|_| g.gen_range(0..k)).collect();
        let conf: Vec<f64> = (0..n).map(|_| g.gen_range(0.0..1.0)).collect();
        let opts = OtOptions { mode: AlignMode::PerClass, tau_conf: 0.3, ..OtOptions::default() };
        let tape = Tape::new();
        let out = ot_loss(tape.constant(x.clone()), &pseudo, &conf, &centers, &opts).unwrap();
        let rows: Vec<usize> = (0..n).filter(|&i| conf[i] >= 0.3).collect();
        let expected = if rows.is_empty() {
            0.0
        } else {
            rows.iter()
                .map(|&i| transport_cost(x.row_slice(i), centers.center(pseudo[i]).unwrap()).unwrap())
                .sum::<f64>()
                / rows.len() as f64
        };
        per_class_gap = per_class_gap.max((out.loss.item() - expected).abs());
    }
    OtOracleReport { worst_rel_gap, worst_residual, per_class_gap }
}

pub fn criterion_5() -> Outcome {
    let r = ot_oracle(50);
    let pass = r.worst_rel_gap < 0.01 && r.worst_residual < 1e-6 && r.per_class_gap < 1e-12;
    Outcome::new(
        pass,
        format!(
            "50 instances at eps=1e-3: worst objective gap {:.3}% (tol 1%), worst residual {:.1e} (tol 1e-6); per-class mean-cost gap {:.1e} (tol 1e-12)",
            100.0 * r.worst_rel_gap,
            r.worst_residual,
            r.per_class_gap
        ),
    )
}

pub const ADAPTATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Per-seed results of the default config and its ablations.
pub struct SeedRuns {
    pub seed: u64,
    pub full: f64,
    pub direct: f64,
    pub plain: f64,
    pub full_drop: f64,
    pub off_drop: f64,
}

pub struct AdaptationStudy {
    pub runs: Vec<SeedRuns>,
    pub secs: f64,
    /// Per-site autoencoder reconstruction errors of the seed-0 dual generator.
    pub recon_errors: Vec<f64>,
}

pub fn adaptation_study(base: &ExperimentConfig) -> AdaptationStudy {
    let start = Instant::now();
    let mut cache = ArtifactCache::new(base, None);
    let mut runs = Vec::new();
    for &seed in &ADAPTATION_SEEDS {
        let mut full = base.clone();
        full.seed = seed;
        let direct = full.direct_test();
        let mut plain = full.clone();
        plain.ablation.use_adapter = AdapterKind::PlainLora;
        let mut off = full.clone();
        off.ablation.align = AlignChoice::Off;
        let f = cache.run(&full).unwrap();
        let d = cache.run(&direct).unwrap();
        let p = cache.run(&plain).unwrap();
        let o = cache.run(&off).unwrap();
        runs.push(SeedRuns {
            seed,
            full: f.mean_shifted_accuracy,
            direct: d.mean_shifted_accuracy,
            plain: p.mean_shifted_accuracy,
            full_drop: f.source_drop,
            off_drop: o.source_drop,
        });
    }
    let recon_errors = cache.get(AdapterKind::Dual, 0).unwrap().report.recon_error.clone();
    AdaptationStudy { runs, secs: start.elapsed().as_secs_f64(), recon_errors }
}

pub fn criterion_6(s: &AdaptationStudy) -> Outcome {
    let n = s.runs.len() as f64;
    let gain = s.runs.iter().map(|r| r.full - r.direct).sum::<f64>() / n;
    let wins = s.runs.iter().filter(|r| r.full > r.plain).count();
    let pass = gain >= 0.03 && wins >= 4 && s.secs < 600.0;
    let per: Vec<String> = s
        .runs
        .iter()
        .map(|r| format!("s{} full {:.4} direct {:.4} plain {:.4}", r.seed, r.full, r.direct, r.plain))
        .collect();
    Outcome::new(
        pass,
        format!(
            "mean gain over direct-test {:+.4} (need >= +0.03), beats plain-LoRA on {wins}/5 seeds (need 4), {:.0}s; {}",
            gain,
            s.secs,
            per.join("; ")
        ),
    )
}

pub fn criterion_7(s: &AdaptationStudy) -> Outcome {
    let wins = s.runs.iter().filter(|r| r.full_drop <= r.off_drop).count();
    let worst = s.runs.iter().map(|r| r.full_drop).fold(f64::NEG_INFINITY, f64::max);
    let pass = wins >= 4 && worst <= 0.05;
    let per: Vec<String> =
        s.runs.iter().map(|r| format!("s{} full {:+.4} off {:+.4}", r.seed, r.full_drop, r.off_drop)).collect();
    Outcome::new(
        pass,
        format!(
            "full drop <= align-off drop on {wins}/5 seeds (need 4), worst full drop {:+.4} (limit 0.05); {}",
            worst,
            per.join("; ")
        ),
    )
}

pub struct DeterminismReport {
    pub csv_identical: bool,
    pub frozen_base: bool,
    pub frozen_generator: bool,
    pub label_blind: bool,
}

pub fn determinism(cfg: &ExperimentConfig) -> DeterminismReport {
    let first = offline_train(cfg).unwrap();
    let second = offline_train(cfg).unwrap();
    let a = run_continual(cfg, &first).unwrap();
    let b = run_continual(cfg, &second).unwrap();
    let csv_identical = metrics_csv(&[a]).unwrap().into_bytes() == metrics_csv(&[b]).unwrap().into_bytes();

    let stream = build_stream(cfg).unwrap();
    let digest = first.model.frozen_digest();
    let gen_before = serde_json::to_string(&first.generator).unwrap();
    let (record, adapted) = run_with_model(cfg, &first, &stream).unwrap();
    let frozen_base = adapted.frozen_digest() == digest;
    let frozen_generator = serde_json::to_string(&first.generator).unwrap() == gen_before;

    let mut shuffled = stream.clone();
    shuffled.hidden = stream.hidden.shuffled(cfg.seed.wrapping_add(99));
    let (blind, blind_model) = run_with_model(cfg, &first, &shuffled).unwrap();
    let label_blind = serde_json::to_string(&record.steps).unwrap() == serde_json::to_string(&blind.steps).unwrap()
        && serde_json::to_string(&adapted).unwrap() == serde_json::to_string(&blind_model).unwrap()
        && shuffled.hidden != stream.hidden;
    DeterminismReport { csv_identical, frozen_base, frozen_generator, label_blind }
}

pub fn criterion_8(cfg: &ExperimentConfig) -> Outcome {
    let r = determinism(cfg);
    let pass = r.csv_identical && r.frozen_base && r.frozen_generator && r.label_blind;
    Outcome::new(
        pass,
        format!(
            "metrics.csv byte-identical {}, base weights frozen {}, generator frozen {}, shuffled labels leave trajectory unchanged {}",
            r.csv_identical, r.frozen_base, r.frozen_generator, r.label_blind
        ),
    )
}
