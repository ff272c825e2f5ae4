use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use super::schedule::{q_sample, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::numerics::{collect_grads, Adam, Tape, Tensor, Var};
use crate::rng::{self, Rng};

pub const TIME_EMBED_DIM: usize = 16;

/// Sinusoidal embedding of diffusion steps, one row per entry of `t`.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos());
        }
        data.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::matrix(t.len(), dim, data).expect("sized")
}

/// Anything that predicts the injected noise of a noisy latent.
pub trait NoisePredictor {
    fn predict_on<'t>(&self, z_t: Var<'t>, cond: Var<'t>, t: &[usize]) -> Result<Var<'t>>;

    /// Inference without gradients.
    fn predict(&self, z_t: &Tensor, cond: &Tensor, t: &[usize]) -> Result<Tensor> {
        let tape = Tape::new();
        let out = self.predict_on(tape.constant(z_t.clone()), tape.constant(cond.clone()), t)?;
        let v = out.value();
        Ok(v.as_ref().clone())
    }
}

/// Conditional noise predictor: an MLP over `[z_t | cond | embed(t)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub z_dim: usize,
    pub c_dim: usize,
    pub net: Mlp,
}

impl Denoiser {
    /// Three fully connected layers of width `hidden`.
    pub fn new(z_dim: usize, c_dim: usize, hidden: usize, g: &mut Rng) -> Self {
        Denoiser {
            z_dim,
            c_dim,
            net: Mlp::new(&[z_dim + c_dim + TIME_EMBED_DIM, hidden, hidden, z_dim], g),
        }
    }

    /// Forward with explicitly bound weights (for training).
    pub fn forward_with<'t>(&self, vars: &[Var<'t>], z_t: Var<'t>, cond: Var<'t>, t: &[usize]) -> Result<Var<'t>> {
        let tape = z_t.tape();
        let (zv, cv) = (z_t.value(), cond.value());
        if zv.cols() != self.z_dim || cv.cols() != self.c_dim || zv.rows() != cv.rows() || t.len() != zv.rows() {
            return Err(Error::shape("denoiser input", zv.shape(), cv.shape()));
        }
        let emb = tape.constant(time_embedding(t, TIME_EMBED_DIM));
        let x = tape.concat_cols(&[z_t, cond, emb])?;
        self.net.forward(vars, x)
    }
}

impl NoisePredictor for Denoiser {
    fn predict_on<'t>(&self, z_t: Var<'t>, cond: Var<'t>, t: &[usize]) -> Result<Var<'t>> {
        let vars = self.net.bind(z_t.tape(), false);
        self.forward_with(&vars, z_t, cond, t)
    }
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per row of `z0`.
pub fn sample_training_noise(z0: &Tensor, schedule: &DiffusionSchedule, g: &mut Rng) -> (Vec<usize>, Tensor) {
    let (n, z) = z0.dims2();
    let t = (0..n).map(|_| g.gen_range(1..=schedule.steps())).collect();
    let eps = Tensor::matrix(n, z, rng::normal_vec(g, n * z)).expect("sized");
    (t, eps)
}

/// Noisy latents `z_t` for per-row steps.
pub fn noisy_latents(z0: &Tensor, t: &[usize], eps: &Tensor, schedule: &DiffusionSchedule) -> Result<Tensor> {
    let rows: Vec<Tensor> = (0..z0.rows())
        .map(|i| {
            let zi = z0.select_rows(&[i]);
            let ei = eps.select_rows(&[i]);
            q_sample(&zi, t[i], schedule, &ei)
        })
        .collect::<Result<_>>()?;
    Tensor::vstack(&rows)
}

fn noise_regression<'t>(eps: Tensor, pred: Var<'t>) -> Result<Var<'t>> {
    let n = eps.rows() as f64;
    Ok(pred.tape().constant(eps).sub(pred)?.frobenius_sq().scale(1.0 / n))
}

/// Denoising loss averaged over rows: `mean_i ‖ε_i − ε̂(z_t,i, c_i, t_i)‖²`.
pub fn diffusion_loss<'t, P: NoisePredictor>(
    predictor: &P,
    tape: &'t Tape,
    z0: &Tensor,
    cond: &Tensor,
    schedule: &DiffusionSchedule,
    g: &mut Rng,
) -> Result<Var<'t>> {
    let (t, eps) = sample_training_noise(z0, schedule, g);
    let zt = noisy_latents(z0, &t, &eps, schedule)?;
    let pred = predictor.predict_on(tape.constant(zt), tape.constant(cond.clone()), &t)?;
    noise_regression(eps, pred)
}

/// [`diffusion_loss`] for a [`Denoiser`] whose weights are the bound `vars`.
pub fn diffusion_loss_on<'t>(
    denoiser: &Denoiser,
    vars: &[Var<'t>],
    z0: &Tensor,
    cond: &Tensor,
    schedule: &DiffusionSchedule,
    g: &mut Rng,
) -> Result<Var<'t>> {
    let tape = vars
        .first()
        .ok_or_else(|| Error::InvalidArgument("denoiser has no bound weights".into()))?
        .tape();
    let (t, eps) = sample_training_noise(z0, schedule, g);
    let zt = noisy_latents(z0, &t, &eps, schedule)?;
    let pred = denoiser.forward_with(vars, tape.constant(zt), tape.constant(cond.clone()), &t)?;
    noise_regression(eps, pred)
}

/// Minibatch Adam training of `denoiser` on latent rows `z0` with
/// conditions `cond`. Returns the loss of every step.
pub fn train_denoiser(
    denoiser: &mut Denoiser,
    z0: &Tensor,
    cond: &Tensor,
    schedule: &DiffusionSchedule,
    steps: usize,
    batch: usize,
    lr: f64,
    g: &mut Rng,
) -> Result<Vec<f64>> {
    let n = z0.rows();
    if n == 0 || cond.rows() != n || batch == 0 {
        return Err(Error::shape("train_denoiser", z0.shape(), cond.shape()));
    }
    let mut opt = Adam::new(lr);
    let mut curve = Vec::with_capacity(steps);
    for _ in 0..steps {
        let idx: Vec<usize> = if batch >= n {
            (0..n).collect()
        } else {
            (0..batch).map(|_| g.gen_range(0..n)).collect()
        };
        let zb = z0.select_rows(&idx);
        let cb = cond.select_rows(&idx);
        let tape = Tape::new();
        let vars = denoiser.net.bind(&tape, true);
        let loss = diffusion_loss_on(denoiser, &vars, &zb, &cb, schedule, g)?;
        curve.push(loss.item());
        let grads = tape.backward(loss)?;
        let mut params = denoiser.net.params_mut();
        collect_grads(&mut params, &vars, &grads)?;
        opt.step(&mut params)?;
    }
    Ok(curve)
}

/// Ancestral DDPM reverse recursion from step `t_start` down to 1.
///
/// With `noise = None` the posterior noise is dropped (deterministic mean
/// path). `t_start = 0` returns `z` unchanged.
pub fn reverse_diffusion<P: NoisePredictor>(
    predictor: &P,
    z: &Tensor,
    cond: &Tensor,
    t_start: usize,
    schedule: &DiffusionSchedule,
    mut noise: Option<&mut Rng>,
) -> Result<Tensor> {
    if t_start > schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "start step {t_start} beyond {} steps",
            schedule.steps()
        )));
    }
    let (n, zd) = z.dims2();
    let mut z = z.clone();
    for t in (1..=t_start).rev() {
        let eps = predictor.predict(&z, cond, &vec![t; n])?;
        let beta = schedule.beta(t);
        let coef = beta / (1.0 - schedule.alpha_bar(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t).sqrt();
        let mut next = z.zip_map(&eps, |zi, ei| inv_sqrt_alpha * (zi - coef * ei))?;
        if t > 1 {
            if let Some(g) = noise.as_deref_mut() {
                let sigma = schedule.posterior_variance(t).sqrt();
                let e = rng::normal_vec(g, n * zd);
                next.data_mut().iter_mut().zip(e).for_each(|(v, e)| *v += sigma * e);
            }
        }
        z = next;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Knows the clean latent and returns the exact injected noise.
    struct Oracle {
        z0: Tensor,
        schedule: DiffusionSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_on<'t>(&self, z_t: Var<'t>, _cond: Var<'t>, t: &[usize]) -> Result<Var<'t>> {
            let zt = z_t.value();
            let mut out = Vec::new();
            for (i, &step) in t.iter().enumerate() {
                let ab = self.schedule.alpha_bar(step);
                let z0 = self.z0.row_slice(i % self.z0.rows());
                out.extend(zt.row_slice(i).iter().zip(z0).map(|(a, b)| (a - ab.sqrt() * b) / (1.0 - ab).sqrt()));
            }
            Ok(z_t.tape().constant(Tensor::matrix(zt.rows(), zt.cols(), out)?))
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_on<'t>(&self, z_t: Var<'t>, _cond: Var<'t>, _t: &[usize]) -> Result<Var<'t>> {
            Ok(z_t.tape().constant(Tensor::zeros(&z_t.shape())))
        }
    }

    #[test]
    fn embedding_shape_and_range() {
        let e = time_embedding(&[1, 50, 100], TIME_EMBED_DIM);
        assert_eq!(e.shape(), &[3, 16]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row_slice(0), e.row_slice(1));
    }

    #[test]
    fn denoiser_output_shape_and_determinism() {
        let d = Denoiser::new(4, 3, 8, &mut rng::stream(1, "den"));
        let z = Tensor::matrix(2, 4, rng::normal_vec(&mut rng::stream(2, "z"), 8)).unwrap();
        let c = Tensor::matrix(2, 3, rng::normal_vec(&mut rng::stream(3, "c"), 6)).unwrap();
        let a = d.predict(&z, &c, &[5, 17]).unwrap();
        assert_eq!(a.shape(), &[2, 4]);
        assert_eq!(a, d.predict(&z, &c, &[5, 17]).unwrap());
        assert!(d.predict(&z, &c, &[5]).is_err());
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let schedule = DiffusionSchedule::scaled_linear(50).unwrap();
        let z0 = Tensor::matrix(3, 4, rng::normal_vec(&mut rng::stream(4, "z"), 12)).unwrap();
        let oracle = Oracle { z0: z0.clone(), schedule: schedule.clone() };
        let tape = Tape::new();
        let cond = Tensor::zeros(&[3, 1]);
        let loss = diffusion_loss(&oracle, &tape, &z0, &cond, &schedule, &mut rng::stream(5, "t")).unwrap();
        assert!(loss.item() < 1e-18);
        let loss = diffusion_loss(&Zero, &tape, &z0, &cond, &schedule, &mut rng::stream(5, "t")).unwrap();
        assert!(loss.item() >= 0.0);
    }

    #[test]
    fn perfect_predictor_recovers_single_point() {
        let schedule = DiffusionSchedule::scaled_linear(100).unwrap();
        let z0 = Tensor::row(vec![1.2, -0.7, 0.3]);
        let oracle = Oracle { z0: z0.clone(), schedule: schedule.clone() };
        let mut g = rng::stream(6, "noise");
        let start = Tensor::row(rng::normal_vec(&mut g, 3));
        let cond = Tensor::zeros(&[1, 1]);
        for stochastic in [false, true] {
            let noise = if stochastic { Some(&mut g) } else { None };
            let out = reverse_diffusion(&oracle, &start, &cond, 100, &schedule, noise).unwrap();
            for (a, b) in out.data().iter().zip(z0.data()) {
                assert!((a - b).abs() < 1e-2);
            }
        }
    }

    #[test]
    fn zero_start_is_identity() {
        let schedule = DiffusionSchedule::scaled_linear(10).unwrap();
        let z = Tensor::row(vec![0.5, 0.25]);
        let out = reverse_diffusion(&Zero, &z, &Tensor::zeros(&[1, 1]), 0, &schedule, None).unwrap();
        assert_eq!(out, z);
        assert!(reverse_diffusion(&Zero, &z, &Tensor::zeros(&[1, 1]), 11, &schedule, None).is_err());
    }
}
