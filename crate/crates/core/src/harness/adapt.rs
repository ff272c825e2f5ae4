use serde::{Deserialize, Serialize};

use super::config::{AlignChoice, ExperimentConfig};
use super::kl::kl_align_loss;
use crate::adapter::{hsic, orth_loss, AdapterKind, AdapterSite, Kernel};
use crate::align::{ot_loss, ClassCenters, OtOptions};
use crate::error::{Error, Result};
use crate::model::{predict_with_confidence, Scope, ToyModel};
use crate::numerics::{collect_grads, sgd_step, Param, Tape, Var};
use crate::paramgen::{Condition, ParamVector, ParameterGenerator};
use crate::rng::{self, Rng};
use crate::stream::UnlabeledBatch;

/// Test-time settings derived from an [`ExperimentConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSettings {
    pub lambda_orth: f64,
    pub lambda_hsic: f64,
    pub lambda_a: f64,
    pub lambda_ca: f64,
    pub kernel: Kernel,
    pub lr: f64,
    pub weight_decay: f64,
    pub align: AlignChoice,
    pub ot: OtOptions,
    pub use_generator: bool,
    pub blend: f64,
}

impl AdaptSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        AdaptSettings {
            lambda_orth: cfg.losses.lambda_orth,
            lambda_hsic: cfg.losses.lambda_hsic,
            lambda_a: cfg.losses.lambda_a,
            lambda_ca: cfg.losses.lambda_ca,
            kernel: cfg.losses.kernel,
            lr: cfg.optimizer.lr,
            weight_decay: cfg.optimizer.weight_decay,
            align: cfg.ablation.align,
            ot: cfg.align.options(),
            use_generator: cfg.ablation.use_generator && cfg.ablation.use_adapter != AdapterKind::Off,
            blend: cfg.generator.blend,
        }
    }

    fn adapter_terms_active(&self) -> bool {
        self.lambda_a > 0.0 && (self.lambda_orth > 0.0 || self.lambda_hsic > 0.0)
    }

    fn align_active(&self) -> bool {
        self.align != AlignChoice::Off && self.lambda_ca > 0.0
    }
}

/// Everything the adaptation loop mutates or reads.
pub struct AdaptState<'a> {
    pub model: ToyModel,
    pub generator: Option<&'a ParameterGenerator>,
    pub centers: &'a ClassCenters,
    pub settings: AdaptSettings,
    pub rng: Rng,
    pub step: usize,
    /// Human-readable notes about skipped or rolled-back steps.
    pub events: Vec<String>,
}

impl<'a> AdaptState<'a> {
    pub fn new(
        model: ToyModel,
        generator: Option<&'a ParameterGenerator>,
        centers: &'a ClassCenters,
        settings: AdaptSettings,
        seed: u64,
    ) -> Result<Self> {
        if settings.use_generator && !model.sites().is_empty() {
            match generator {
                Some(g) if g.is_trained() => {}
                _ => return Err(Error::InvalidState("generator enabled but no trained generator loaded".into())),
            }
        }
        Ok(AdaptState {
            model,
            generator,
            centers,
            settings,
            rng: rng::stream(seed, "adapt"),
            step: 0,
            events: Vec::new(),
        })
    }
}

/// Loss values and bookkeeping for one adaptation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub domain_index: usize,
    pub l_orth: f64,
    pub l_hsic: f64,
    /// Alignment loss (transport or KL, whichever is active).
    pub l_ot: f64,
    pub l_total: f64,
    pub confident: usize,
    pub regenerated: bool,
    pub rolled_back: bool,
    /// Predictions of the updated model on the batch.
    pub predictions: Vec<usize>,
}

fn snapshot_factors(model: &ToyModel) -> Vec<Vec<Param>> {
    model
        .sites()
        .iter()
        .map(|s| s.factors().into_iter().cloned().collect())
        .collect()
}

fn restore_factors(model: &mut ToyModel, saved: &[Vec<Param>]) {
    for (site, params) in model.sites_mut().into_iter().zip(saved) {
        for (p, s) in site.factors_mut().into_iter().zip(params) {
            *p = s.clone();
        }
    }
}

fn factors_finite(sites: &[&AdapterSite]) -> bool {
    sites.iter().all(|s| s.factors().iter().all(|p| p.value.all_finite()))
}

/// One online step: losses, one SGD update of the adapter factors,
/// regeneration, and predictions from the updated model.
///
/// Any failure restores the factors to their state on entry. A non-finite
/// loss or update, or a transport solve that does not converge, is recorded
/// as an event rather than returned as an error.
pub fn adapt_step(batch: &UnlabeledBatch, state: &mut AdaptState<'_>) -> Result<StepMetrics> {
    state.step += 1;
    let saved = snapshot_factors(&state.model);
    let mut metrics = StepMetrics {
        step: state.step,
        domain_index: batch.domain_index,
        l_orth: 0.0,
        l_hsic: 0.0,
        l_ot: 0.0,
        l_total: 0.0,
        confident: 0,
        regenerated: false,
        rolled_back: false,
        predictions: Vec::new(),
    };
    match update(batch, state, &mut metrics) {
        Ok(()) => {}
        Err(e @ (Error::NonFinite(_) | Error::NoConvergence { .. })) => {
            restore_factors(&mut state.model, &saved);
            metrics.rolled_back = true;
            metrics.regenerated = false;
            state.events.push(format!("step {}: {e}; rolled back", state.step));
        }
        Err(e) => {
            restore_factors(&mut state.model, &saved);
            return Err(e);
        }
    }
    let (logits, _) = state.model.predict(&batch.features)?;
    metrics.predictions = predict_with_confidence(&logits).0;
    Ok(metrics)
}

fn accumulate<'t>(total: &mut Option<Var<'t>>, term: Var<'t>, weight: f64) -> Result<()> {
    let t = term.scale(weight);
    *total = Some(match total.take() {
        Some(acc) => acc.add(t)?,
        None => t,
    });
    Ok(())
}

fn update(batch: &UnlabeledBatch, state: &mut AdaptState<'_>, metrics: &mut StepMetrics) -> Result<()> {
    let s = state.settings.clone();
    let tape = Tape::new();
    let bound = state.model.bind(&tape, Scope::Adapters);
    let out = bound.forward(tape.constant(batch.features.clone()))?;
    let logits = out.logits.value();
    if !logits.all_finite() {
        return Err(Error::NonFinite("forward pass".into()));
    }
    let (pseudo, conf) = predict_with_confidence(&logits);
    let n = batch.features.rows();

    let mut total: Option<Var<'_>> = None;

    if s.adapter_terms_active() {
        for f in &out.adapter_feats {
            if s.lambda_orth > 0.0 {
                let lo = orth_loss(f)?;
                metrics.l_orth += lo.item();
                accumulate(&mut total, lo, s.lambda_a * s.lambda_orth)?;
            }
            if s.lambda_hsic > 0.0 && n >= 2 {
                let lh = hsic(f, s.kernel)?;
                metrics.l_hsic += lh.item();
                accumulate(&mut total, lh, s.lambda_a * s.lambda_hsic)?;
            }
        }
    }
    if s.align_active() {
        let term = match s.align {
            AlignChoice::Ot => {
                let o = ot_loss(out.feats, &pseudo, &conf, state.centers, &s.ot)?;
                metrics.confident = o.confident;
                o.loss
            }
            AlignChoice::Kl => {
                metrics.confident = crate::align::confident_rows(&pseudo, &conf, state.centers, s.ot.tau_conf).len();
                kl_align_loss(out.feats, &pseudo, &conf, state.centers, s.ot.tau_conf)?
            }
            AlignChoice::Off => unreachable!("inactive alignment"),
        };
        metrics.l_ot = term.item();
        accumulate(&mut total, term, s.lambda_ca)?;
    }

    if let Some(loss) = total {
        metrics.l_total = loss.item();
        if !metrics.l_total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !bound.trainable.is_empty() {
            let grads = tape.backward(loss)?;
            let mut params = state.model.params_mut(Scope::Adapters);
            collect_grads(&mut params, &bound.trainable, &grads)?;
            sgd_step(&mut params, s.lr, s.weight_decay)?;
            if !factors_finite(&state.model.sites()) {
                return Err(Error::NonFinite("adapter update".into()));
            }
        }
    }

    if s.use_generator {
        if let Some(gen) = state.generator {
            let cond = Condition::from_pooled(&out.pooled)?;
            let blend = s.blend;
            for (site_id, site) in state.model.sites_mut().into_iter().enumerate() {
                let w_opt = ParamVector::pack(site_id, site);
                let w_gen = gen.generate_parameters(&w_opt, &cond, &mut state.rng)?;
                let mixed = ParamVector {
                    site_id,
                    values: w_gen
                        .values
                        .iter()
                        .zip(&w_opt.values)
                        .map(|(g, o)| if blend == 1.0 { *g } else if blend == 0.0 { *o } else { blend * g + (1.0 - blend) * o })
                        .collect(),
                };
                mixed.unpack_into(site)?;
            }
            metrics.regenerated = true;
        }
    }
    Ok(())
}
