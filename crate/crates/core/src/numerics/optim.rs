use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Trainable tensor with a gradient accumulator. Serializes as its value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Tensor", into = "Tensor")]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl From<Tensor> for Param {
    fn from(value: Tensor) -> Self {
        Param::new(value)
    }
}

impl From<Param> for Tensor {
    fn from(p: Param) -> Self {
        p.value
    }
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Param { value, grad: None }
    }

    /// Registers the parameter on `tape` as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.leaf(self.value.clone())
    }

    /// Registers the parameter as a constant (frozen).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(self.value.clone())
    }

    /// Adds `g` into the accumulator.
    pub fn accumulate(&mut self, g: &Tensor) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::shape("accumulate", self.value.shape(), g.shape()));
        }
        match &mut self.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Copies the gradient of each bound variable into its parameter.
pub fn collect_grads(params: &mut [&mut Param], vars: &[Var<'_>], grads: &Gradients) -> Result<()> {
    if params.len() != vars.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} bound variables",
            params.len(),
            vars.len()
        )));
    }
    for (p, v) in params.iter_mut().zip(vars) {
        let g = grads
            .get(*v)
            .ok_or_else(|| Error::InvalidState("bound variable has no gradient".into()))?;
        p.accumulate(g)?;
    }
    Ok(())
}

/// Plain SGD with decoupled-from-loss L2 weight decay:
/// `p <- p - lr * (grad + weight_decay * p)`. Gradients are cleared.
pub fn sgd_step(params: &mut [&mut Param], lr: f64, weight_decay: f64) -> Result<()> {
    if params.iter().any(|p| p.grad.is_none()) {
        return Err(Error::InvalidState(
            "sgd_step called on a parameter without a gradient".into(),
        ));
    }
    for p in params.iter_mut() {
        let g = p.grad.take().expect("checked above");
        p.value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(w, gi)| *w -= lr * (gi + weight_decay * *w));
    }
    Ok(())
}

/// Adam, used for offline training of the backbone and the generator.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::InvalidState("adam parameter list changed".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let g = p
                .grad
                .take()
                .ok_or_else(|| Error::InvalidState("adam step without gradient".into()))?;
            for (((w, gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= self.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
