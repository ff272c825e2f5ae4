use serde::{Deserialize, Serialize};

use super::centers::{transport_cost, ClassCenters};
use super::sinkhorn::{solve_transport, TransportPlan};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// How confident target instances are coupled to source centers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    /// Each pseudo-class is transported to its own center only.
    #[default]
    PerClass,
    /// One coupling between all confident instances and all present centers.
    Joint,
}

/// Column mass of the joint coupling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMass {
    /// Centers of pseudo-classes present in the batch, weighted by frequency.
    #[default]
    PseudoLabel,
    /// Every retained center with equal mass.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OtOptions {
    pub mode: AlignMode,
    /// Ignored in per-class mode.
    pub center_mass: CenterMass,
    pub eps: f64,
    pub tau_conf: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for OtOptions {
    fn default() -> Self {
        OtOptions {
            mode: AlignMode::PerClass,
            center_mass: CenterMass::PseudoLabel,
            eps: 0.05,
            tau_conf: 0.8,
            max_iter: 200,
            tol: 1e-6,
        }
    }
}

/// Result of one alignment evaluation.
pub struct OtOutcome<'t> {
    pub loss: Var<'t>,
    /// Coupling over all `n` batch rows (rows of skipped instances are zero)
    /// and the retained centers.
    pub plan: Option<TransportPlan>,
    pub confident: usize,
    /// No confident instance: the loss is a literal zero.
    pub skipped: bool,
}

/// Rows that take part in alignment: confident and with a known center.
pub fn confident_rows(pseudo: &[usize], conf: &[f64], centers: &ClassCenters, tau: f64) -> Vec<usize> {
    (0..pseudo.len())
        .filter(|&i| conf[i] >= tau && centers.index_of(pseudo[i]).is_some())
        .collect()
}

/// Class-centered transport loss `Σ_j Σ_k P_jk ‖x_j − μ_k‖²`.
///
/// The plan is computed from the current feature values and then held
/// constant, so the gradient with respect to row `j` is
/// `2·Σ_k P_jk·(x_j − μ_k)`. Every confident instance carries mass `1/N`.
pub fn ot_loss<'t>(
    target: Var<'t>,
    pseudo: &[usize],
    conf: &[f64],
    centers: &ClassCenters,
    opts: &OtOptions,
) -> Result<OtOutcome<'t>> {
    let x = target.value();
    let (n, d) = x.dims2();
    if pseudo.len() != n || conf.len() != n {
        return Err(Error::shape("ot_loss", x.shape(), &[pseudo.len(), conf.len()]));
    }
    if d != centers.d_feat() {
        return Err(Error::shape("ot_loss", x.shape(), centers.centers.shape()));
    }
    let tape = target.tape();
    let rows = confident_rows(pseudo, conf, centers, opts.tau_conf);
    if rows.is_empty() {
        return Ok(OtOutcome {
            loss: tape.scalar(0.0),
            plan: None,
            confident: 0,
            skipped: true,
        });
    }
    let k = centers.class_ids.len();
    let total = rows.len() as f64;
    let mut plan = vec![0.0; n * k];
    match opts.mode {
        AlignMode::PerClass => {
            for (kc, &class) in centers.class_ids.iter().enumerate() {
                let members: Vec<usize> = rows.iter().copied().filter(|&i| pseudo[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                let mu = centers.centers.row_slice(kc);
                let cost: Vec<f64> = members
                    .iter()
                    .map(|&i| transport_cost(x.row_slice(i), mu))
                    .collect::<Result<_>>()?;
                let nc = members.len();
                let sub = solve_transport(
                    &Tensor::matrix(nc, 1, cost)?,
                    &vec![1.0 / nc as f64; nc],
                    &[1.0],
                    opts.eps,
                    opts.max_iter,
                    opts.tol,
                )?;
                let class_mass = nc as f64 / total;
                for (r, &i) in members.iter().enumerate() {
                    plan[i * k + kc] = sub.plan.data()[r] * class_mass;
                }
            }
        }
        AlignMode::Joint => {
            let present: Vec<usize> = match opts.center_mass {
                CenterMass::PseudoLabel => (0..k)
                    .filter(|&kc| rows.iter().any(|&i| pseudo[i] == centers.class_ids[kc]))
                    .collect(),
                CenterMass::Uniform => (0..k).collect(),
            };
            let mut cost = Vec::with_capacity(rows.len() * present.len());
            for &i in &rows {
                for &kc in &present {
                    cost.push(transport_cost(x.row_slice(i), centers.centers.row_slice(kc))?);
                }
            }
            let scale = cost.iter().cloned().fold(0.0_f64, f64::max).max(1e-12);
            let cost = Tensor::matrix(rows.len(), present.len(), cost)?.scale(1.0 / scale);
            let a = vec![1.0 / total; rows.len()];
            let b: Vec<f64> = match opts.center_mass {
                CenterMass::PseudoLabel => present
                    .iter()
                    .map(|&kc| rows.iter().filter(|&&i| pseudo[i] == centers.class_ids[kc]).count() as f64 / total)
                    .collect(),
                CenterMass::Uniform => vec![1.0 / present.len() as f64; present.len()],
            };
            let sub = solve_transport(&cost, &a, &b, opts.eps, opts.max_iter, opts.tol)?;
            for (r, &i) in rows.iter().enumerate() {
                for (c, &kc) in present.iter().enumerate() {
                    plan[i * k + kc] = sub.plan.get(r, c);
                }
            }
        }
    }

    let mut loss = tape.scalar(0.0);
    for kc in 0..k {
        if (0..n).all(|i| plan[i * k + kc] == 0.0) {
            continue;
        }
        let mu = centers.centers.row_slice(kc);
        let mu_rows = Tensor::matrix(n, d, (0..n).flat_map(|_| mu.iter().copied()).collect())?;
        let weights = Tensor::matrix(n, d, (0..n).flat_map(|i| std::iter::repeat_n(plan[i * k + kc], d)).collect())?;
        let term = target
            .sub(tape.constant(mu_rows))?
            .square()
            .mul(tape.constant(weights))?
            .sum();
        loss = loss.add(term)?;
    }
    let row_marginals = (0..n).map(|i| plan[i * k..(i + 1) * k].iter().sum()).collect();
    let col_marginals = (0..k).map(|kc| (0..n).map(|i| plan[i * k + kc]).sum()).collect();
    Ok(OtOutcome {
        loss,
        plan: Some(TransportPlan {
            plan: Tensor::matrix(n, k, plan)?,
            row_marginals,
            col_marginals,
            iterations: 0,
            residual: 0.0,
        }),
        confident: rows.len(),
        skipped: false,
    })
}
