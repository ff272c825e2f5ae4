use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::error::{Error, Result};
use crate::numerics::{collect_grads, Adam, Tape, Tensor, Var};
use crate::rng::Rng;

/// Compresses flat adapter parameters (`[n × p]`) to latent codes
/// (`[n × z_dim]`) and back.
///
/// Inputs are shifted by `offset` and divided by `scale` before the
/// encoder; the decoder output is mapped back the same way. A fresh
/// autoencoder has zero offset, unit scale and zero biases, so it maps the
/// zero vector to itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamAutoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub offset: Tensor,
    pub scale: f64,
}

impl ParamAutoencoder {
    pub fn new(p: usize, hidden: usize, z_dim: usize, g: &mut Rng) -> Result<Self> {
        if z_dim == 0 || z_dim >= p {
            return Err(Error::InvalidArgument(format!(
                "latent width {z_dim} must be in 1..{p}"
            )));
        }
        Ok(ParamAutoencoder {
            encoder: Mlp::new(&[p, hidden, z_dim], g),
            decoder: Mlp::new(&[z_dim, hidden, p], g),
            offset: Tensor::zeros(&[1, p]),
            scale: 1.0,
        })
    }

    pub fn p(&self) -> usize {
        self.encoder.input_width()
    }

    pub fn z_dim(&self) -> usize {
        self.encoder.output_width()
    }

    fn normalize(&self, w: &Tensor) -> Result<Tensor> {
        let (n, p) = w.dims2();
        if p != self.p() {
            return Err(Error::shape("autoencoder input", w.shape(), &[n, self.p()]));
        }
        let inv = 1.0 / self.scale;
        let data = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.offset.data()[i % p]) * inv)
            .collect();
        Tensor::matrix(n, p, data)
    }

    fn denormalize(&self, x: &Tensor) -> Tensor {
        let p = self.p();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale + self.offset.data()[i % p];
        }
        out
    }

    pub fn encode(&self, w: &Tensor) -> Result<Tensor> {
        self.encoder.apply(&self.normalize(w)?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.denormalize(&self.decoder.apply(z)?))
    }

    /// `‖w − D(E(w))‖²` summed over all rows, on a tape whose autoencoder
    /// weights are `vars` (as returned by [`ParamAutoencoder::bind`]).
    pub fn recon_loss_on<'t>(&self, vars: &[Var<'t>], w: Var<'t>) -> Result<Var<'t>> {
        let tape = w.tape();
        let (enc, dec) = vars.split_at(self.encoder.layers.len() * 2);
        let wv = w.value();
        let (n, p) = wv.dims2();
        if p != self.p() {
            return Err(Error::shape("recon_loss", wv.shape(), &[n, self.p()]));
        }
        let offset_rows = Tensor::matrix(n, p, (0..n).flat_map(|_| self.offset.data().iter().copied()).collect())?;
        let offset = tape.constant(offset_rows);
        let x = w.sub(offset)?.scale(1.0 / self.scale);
        let z = self.encoder.forward(enc, x)?;
        let recon = self.decoder.forward(dec, z)?.scale(self.scale).add(offset)?;
        Ok(w.sub(recon)?.frobenius_sq())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, train: bool) -> Vec<Var<'t>> {
        let mut v = self.encoder.bind(tape, train);
        v.extend(self.decoder.bind(tape, train));
        v
    }

    /// Reconstruction loss with frozen weights.
    pub fn recon_loss<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Result<Var<'t>> {
        let vars = self.bind(tape, false);
        self.recon_loss_on(&vars, w)
    }

    /// Mean per-entry squared reconstruction error over the rows of `w`.
    pub fn mean_recon_error(&self, w: &Tensor) -> Result<f64> {
        let r = self.decode(&self.encode(w)?)?;
        Ok(w.zip_map(&r, |a, b| (a - b) * (a - b))?.sum() / w.numel() as f64)
    }

    /// Fits the autoencoder to the rows of `w` with full-batch Adam.
    ///
    /// The normalization is refit from the data first. Returns the mean
    /// per-entry reconstruction error after every epoch.
    pub fn fit(&mut self, w: &Tensor, epochs: usize, lr: f64) -> Result<Vec<f64>> {
        let (n, p) = w.dims2();
        if p != self.p() || n == 0 {
            return Err(Error::shape("autoencoder fit", w.shape(), &[n, self.p()]));
        }
        self.offset = w.mean_rows();
        let spread = w
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.offset.data()[i % p]).powi(2))
            .sum::<f64>()
            / w.numel() as f64;
        self.scale = spread.sqrt().max(1e-8);

        let mut opt = Adam::new(lr);
        let mut curve = Vec::with_capacity(epochs);
        let denom = w.numel() as f64;
        for _ in 0..epochs {
            let tape = Tape::new();
            let vars = self.bind(&tape, true);
            let loss = self.recon_loss_on(&vars, tape.constant(w.clone()))?;
            let mean_loss = loss.scale(1.0 / denom / (self.scale * self.scale));
            let grads = tape.backward(mean_loss)?;
            let mut params = self.encoder.params_mut();
            params.extend(self.decoder.params_mut());
            collect_grads(&mut params, &vars, &grads)?;
            opt.step(&mut params)?;
            curve.push(loss.item() / denom);
        }
        Ok(curve)
    }
}
