//! Small feed-forward instance classifier with adapter insertion sites.
//!
//! `x → tanh(x·W_in) → [tanh(h·W_l) | tanh(site_l(h))]* → features → logits`.
//! Sites wrap the weight of the layers they are attached to.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{adapter_forward, AdapterKind, AdapterSite, BoundSite, DisentangledFeatures};
use crate::error::{Error, Result};
use crate::numerics::{Param, Tape, Tensor, Var};
use crate::rng::{self, Rng};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub classes: usize,
    /// Zero-based hidden-layer indices that receive an adapter.
    pub adapter_layers: Vec<usize>,
    pub r1: usize,
    pub r2: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_in: 16,
            width: 32,
            hidden_layers: 3,
            classes: 4,
            adapter_layers: vec![0, 1],
            r1: 4,
            r2: 4,
        }
    }
}

/// A hidden layer: plain weight or adapter-wrapped weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Block {
    Plain { weight: Param },
    Adapted { site: AdapterSite },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub input: Param,
    pub blocks: Vec<Block>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceHead {
    pub weight: Param,
}

/// Backbone plus classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub kind: AdapterKind,
    pub dims: ModelDims,
    pub backbone: ToyBackbone,
    pub head: InstanceHead,
}

/// Which tensors become differentiable when the model is bound to a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    /// Everything (offline source training).
    All,
    /// Only adapter factors (test-time adaptation).
    Adapters,
    /// Nothing (evaluation).
    Frozen,
}

fn gaussian(rows: usize, cols: usize, std: f64, g: &mut Rng) -> Tensor {
    let data = rng::normal_vec(g, rows * cols).into_iter().map(|v| v * std).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

impl ToyModel {
    /// Fresh model with `1/√fan_in`-scaled Gaussian weights.
    pub fn new(dims: &ModelDims, kind: AdapterKind, seed: u64) -> Result<Self> {
        if dims.classes < 2 || dims.width == 0 || dims.d_in == 0 {
            return Err(Error::InvalidArgument(format!("degenerate model dims {dims:?}")));
        }
        if let Some(&bad) = dims.adapter_layers.iter().find(|&&l| l >= dims.hidden_layers) {
            return Err(Error::InvalidArgument(format!(
                "adapter layer {bad} beyond {} hidden layers",
                dims.hidden_layers
            )));
        }
        let mut g = rng::stream(seed, "model-init");
        let mut ga = rng::stream(seed, "adapter-init");
        let d = dims.width;
        let input = Param::new(gaussian(dims.d_in, d, 1.0 / (dims.d_in as f64).sqrt(), &mut g));
        let mut blocks = Vec::with_capacity(dims.hidden_layers);
        for l in 0..dims.hidden_layers {
            let w = gaussian(d, d, 1.0 / (d as f64).sqrt(), &mut g);
            let block = match kind {
                AdapterKind::Off => Block::Plain { weight: Param::new(w) },
                _ if !dims.adapter_layers.contains(&l) => Block::Plain { weight: Param::new(w) },
                AdapterKind::Dual => Block::Adapted {
                    site: AdapterSite::new(w, dims.r1, Some(dims.r2), &mut ga)?,
                },
                AdapterKind::PlainLora => Block::Adapted {
                    site: AdapterSite::new(w, dims.r1, None, &mut ga)?,
                },
            };
            blocks.push(block);
        }
        let head = InstanceHead {
            weight: Param::new(gaussian(d, dims.classes, 1.0 / (d as f64).sqrt(), &mut g)),
        };
        Ok(ToyModel {
            kind,
            dims: dims.clone(),
            backbone: ToyBackbone { input, blocks },
            head,
        })
    }

    pub fn classes(&self) -> usize {
        self.dims.classes
    }

    pub fn sites(&self) -> Vec<&AdapterSite> {
        self.backbone
            .blocks
            .iter()
            .filter_map(|b| match b {
                Block::Adapted { site } => Some(site),
                Block::Plain { .. } => None,
            })
            .collect()
    }

    pub fn sites_mut(&mut self) -> Vec<&mut AdapterSite> {
        self.backbone
            .blocks
            .iter_mut()
            .filter_map(|b| match b {
                Block::Adapted { site } => Some(site),
                Block::Plain { .. } => None,
            })
            .collect()
    }

    /// Parameters that are trainable under `scope`, in binding order.
    pub fn params_mut(&mut self, scope: Scope) -> Vec<&mut Param> {
        match scope {
            Scope::Frozen => Vec::new(),
            Scope::Adapters => self
                .sites_mut()
                .into_iter()
                .flat_map(AdapterSite::factors_mut)
                .collect(),
            Scope::All => {
                let mut out = vec![&mut self.backbone.input];
                for b in &mut self.backbone.blocks {
                    match b {
                        Block::Plain { weight } => out.push(weight),
                        Block::Adapted { site } => {
                            let AdapterSite { base, invariant, specific } = site;
                            out.extend([base, &mut invariant.a, &mut invariant.b]);
                            if let Some(sp) = specific {
                                out.extend([&mut sp.a, &mut sp.b]);
                            }
                        }
                    }
                }
                out.push(&mut self.head.weight);
                out
            }
        }
    }

    /// Places the model on `tape`; trainable leaves are returned in the same
    /// order as [`ToyModel::params_mut`].
    pub fn bind<'t>(&self, tape: &'t Tape, scope: Scope) -> BoundModel<'t> {
        let all = scope == Scope::All;
        let adapters = scope != Scope::Frozen;
        let bind = |p: &Param, train: bool| if train { p.bind(tape) } else { p.bind_frozen(tape) };
        let mut trainable = Vec::new();
        let input = bind(&self.backbone.input, all);
        if all {
            trainable.push(input);
        }
        let mut blocks = Vec::with_capacity(self.backbone.blocks.len());
        for b in &self.backbone.blocks {
            match b {
                Block::Plain { weight } => {
                    let w = bind(weight, all);
                    if all {
                        trainable.push(w);
                    }
                    blocks.push(BoundBlock::Plain(w));
                }
                Block::Adapted { site } => {
                    let bs = site.bind(tape, adapters, all);
                    if all {
                        trainable.push(bs.base);
                    }
                    if adapters {
                        trainable.extend(bs.factor_vars());
                    }
                    blocks.push(BoundBlock::Adapted(bs));
                }
            }
        }
        let head = bind(&self.head.weight, all);
        if all {
            trainable.push(head);
        }
        BoundModel {
            input,
            blocks,
            head,
            trainable,
        }
    }

    /// Evaluation-only forward: logits and final features as plain tensors.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let out = self.bind(&tape, Scope::Frozen).forward(tape.constant(x.clone()))?;
        let logits = out.logits.value().as_ref().clone();
        let feats = out.feats.value().as_ref().clone();
        Ok((logits, feats))
    }

    /// Fraction of rows of `x` whose argmax prediction equals `labels`.
    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let (logits, _) = self.predict(x)?;
        let (pred, _) = predict_with_confidence(&logits);
        let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// SHA-256 over the bit patterns of everything that must stay frozen at
    /// test time: input projection, base layer weights and head.
    pub fn frozen_digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        feed(&self.backbone.input.value);
        for b in &self.backbone.blocks {
            match b {
                Block::Plain { weight } => feed(&weight.value),
                Block::Adapted { site } => feed(&site.base.value),
            }
        }
        feed(&self.head.weight.value);
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, Debug)]
pub enum BoundBlock<'t> {
    Plain(Var<'t>),
    Adapted(BoundSite<'t>),
}

/// A model placed on a tape.
pub struct BoundModel<'t> {
    pub input: Var<'t>,
    pub blocks: Vec<BoundBlock<'t>>,
    pub head: Var<'t>,
    pub trainable: Vec<Var<'t>>,
}

/// Everything downstream losses need from one pass.
pub struct ForwardOutput<'t> {
    pub logits: Var<'t>,
    /// Final backbone features `[n × width]`.
    pub feats: Var<'t>,
    /// Batch mean of `feats`, used as the generator's condition.
    pub pooled: Tensor,
    /// One entry per dual adapter site.
    pub adapter_feats: Vec<DisentangledFeatures<'t>>,
}

impl<'t> BoundModel<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<ForwardOutput<'t>> {
        let d_in = self.input.value().rows();
        let xv = x.value();
        if xv.shape().len() != 2 || xv.cols() != d_in {
            return Err(Error::shape("model forward", xv.shape(), &[xv.rows(), d_in]));
        }
        let mut h = x.matmul(self.input)?.tanh();
        let mut adapter_feats = Vec::new();
        for b in &self.blocks {
            let z = match b {
                BoundBlock::Plain(w) => h.matmul(*w)?,
                BoundBlock::Adapted(site) => {
                    let (y, feats) = adapter_forward(h, site)?;
                    adapter_feats.extend(feats);
                    y
                }
            };
            h = z.tanh();
        }
        let logits = h.matmul(self.head)?;
        let pooled = h.value().mean_rows();
        Ok(ForwardOutput {
            logits,
            feats: h,
            pooled,
            adapter_feats,
        })
    }
}

/// Mean cross-entropy of the logits against labels.
pub fn source_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels)
}

/// Row-wise softmax with max shifting.
pub fn softmax(logits: &Tensor) -> Tensor {
    let (n, c) = logits.dims2();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let row = logits.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / z));
    }
    Tensor::matrix(n, c, out).expect("sized")
}

/// Argmax label and its softmax probability per row. Ties go to the lowest
/// class index.
pub fn predict_with_confidence(logits: &Tensor) -> (Vec<usize>, Vec<f64>) {
    let probs = softmax(logits);
    (0..probs.rows())
        .map(|i| {
            let row = probs.row_slice(i);
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            (best, row[best])
        })
        .unzip()
}
