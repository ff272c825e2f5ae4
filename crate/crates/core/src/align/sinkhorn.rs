use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Nonnegative coupling between row and column masses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
    pub iterations: usize,
    /// L1 marginal violation of the returned plan.
    pub residual: f64,
}

impl TransportPlan {
    /// `⟨P, C⟩`.
    pub fn objective(&self, cost: &Tensor) -> f64 {
        self.plan.data().iter().zip(cost.data()).map(|(p, c)| p * c).sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.plan.sum()
    }
}

fn marginal_residual(plan: &[f64], n: usize, m: usize, a: &[f64], b: &[f64]) -> f64 {
    let mut res = 0.0;
    for i in 0..n {
        res += (plan[i * m..(i + 1) * m].iter().sum::<f64>() - a[i]).abs();
    }
    for j in 0..m {
        res += ((0..n).map(|i| plan[i * m + j]).sum::<f64>() - b[j]).abs();
    }
    res
}

fn logsumexp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn validate_marginal(name: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("{name} marginal must be nonnegative and finite")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("{name} marginal sums to {s}, expected 1")));
    }
    Ok(())
}

/// Entropic optimal transport by log-domain Sinkhorn iterations.
///
/// The regularization is annealed geometrically from the cost scale down to
/// `eps`, warm-starting the dual potentials at each level; iterations at
/// every level count against `max_iter`. Rows or columns with zero mass are
/// excluded from the iteration and get zero plan entries. When either side
/// has a single point the plan is fixed by the marginals and returned
/// directly.
pub fn solve_transport(
    cost: &Tensor,
    a: &[f64],
    b: &[f64],
    eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (n, m) = cost.dims2();
    if a.len() != n || b.len() != m || cost.shape().len() != 2 {
        return Err(Error::shape("solve_transport", cost.shape(), &[a.len(), b.len()]));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidArgument(format!("regularization must be positive, got {eps}")));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("transport cost".into()));
    }
    validate_marginal("row", a)?;
    validate_marginal("column", b)?;

    if m == 1 || n == 1 {
        let plan: Vec<f64> = if m == 1 { a.to_vec() } else { b.to_vec() };
        let residual = marginal_residual(&plan, n, m, a, b);
        return Ok(TransportPlan {
            plan: Tensor::matrix(n, m, plan)?,
            row_marginals: a.to_vec(),
            col_marginals: b.to_vec(),
            iterations: 0,
            residual,
        });
    }

    let rows: Vec<usize> = (0..n).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m).filter(|&j| b[j] > 0.0).collect();
    let log_a: Vec<f64> = rows.iter().map(|&i| a[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| b[j].ln()).collect();
    let c = |ri: usize, cj: usize| cost.get(rows[ri], cols[cj]);
    let (nr, nc) = (rows.len(), cols.len());

    let scale = cost.data().iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(eps);
    let mut levels = Vec::new();
    let mut e = scale;
    while e > eps {
        levels.push(e);
        e *= 0.5;
    }
    levels.push(eps);

    let mut f = vec![0.0; nr];
    let mut g = vec![0.0; nc];
    let mut iterations = 0;
    let mut residual = f64::INFINITY;
    let build = |f: &[f64], g: &[f64], e: f64| -> Vec<f64> {
        let mut plan = vec![0.0; n * m];
        for ri in 0..nr {
            for cj in 0..nc {
                plan[rows[ri] * m + cols[cj]] = ((f[ri] + g[cj] - c(ri, cj)) / e).exp();
            }
        }
        plan
    };
    for (level, &e) in levels.iter().enumerate() {
        let last = level + 1 == levels.len();
        let level_tol = if last { tol } else { tol.sqrt().max(tol) };
        let mut level_iters = 0;
        loop {
            for ri in 0..nr {
                let lse = logsumexp((0..nc).map(|cj| (g[cj] - c(ri, cj)) / e));
                f[ri] = e * (log_a[ri] - lse);
            }
            for cj in 0..nc {
                let lse = logsumexp((0..nr).map(|ri| (f[ri] - c(ri, cj)) / e));
                g[cj] = e * (log_b[cj] - lse);
            }
            iterations += 1;
            level_iters += 1;
            // Columns are exact after the g-update; only rows can be off.
            residual = (0..nr)
                .map(|ri| {
                    let s: f64 = (0..nc).map(|cj| ((f[ri] + g[cj] - c(ri, cj)) / e).exp()).sum();
                    (s - a[rows[ri]]).abs()
                })
                .sum();
            if residual < level_tol || (!last && level_iters >= 100) {
                break;
            }
            if iterations >= max_iter {
                return Err(Error::NoConvergence { iterations, residual });
            }
        }
    }

    let plan = build(&f, &g, eps);
    let residual = marginal_residual(&plan, n, m, a, b).max(residual);
    if !(residual < tol) {
        return Err(Error::NoConvergence { iterations, residual });
    }
    Ok(TransportPlan {
        plan: Tensor::matrix(n, m, plan)?,
        row_marginals: a.to_vec(),
        col_marginals: b.to_vec(),
        iterations,
        residual,
    })
}
