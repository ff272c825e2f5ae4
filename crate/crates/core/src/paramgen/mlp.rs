use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Param, Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// Fully connected layer `x·W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

/// Tanh multilayer perceptron with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`; weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(widths: &[usize], g: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let std = 1.0 / (w[0] as f64).sqrt();
                let data = rng::normal_vec(g, w[0] * w[1]).into_iter().map(|v| v * std).collect();
                Linear {
                    weight: Param::new(Tensor::matrix(w[0], w[1], data).expect("sized")),
                    bias: Param::new(Tensor::zeros(&[1, w[1]])),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.value.rows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").weight.value.cols()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    /// Binds the weights (trainable or frozen) and returns their variables
    /// in [`Mlp::params_mut`] order.
    pub fn bind<'t>(&self, tape: &'t Tape, train: bool) -> Vec<Var<'t>> {
        self.params()
            .into_iter()
            .map(|p| if train { p.bind(tape) } else { p.bind_frozen(tape) })
            .collect()
    }

    /// Forward pass through weights previously returned by [`Mlp::bind`].
    pub fn forward<'t>(&self, vars: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let xv = x.value();
        if xv.shape().len() != 2 || xv.cols() != self.input_width() {
            return Err(Error::shape("mlp forward", xv.shape(), &[xv.rows(), self.input_width()]));
        }
        let ones = tape.constant(Tensor::filled(&[xv.rows(), 1], 1.0));
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            h = h.matmul(pair[0])?.add(ones.matmul(pair[1])?)?;
            if i < last {
                h = h.tanh();
            }
        }
        Ok(h)
    }

    /// Evaluation without gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = self.forward(&vars, tape.constant(x.clone()))?;
        let v = out.value();
        Ok(v.as_ref().clone())
    }
}
