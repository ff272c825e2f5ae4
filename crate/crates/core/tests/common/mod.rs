//! Oracles shared by the integration tests and the acceptance report.
#![allow(dead_code)]

pub mod criteria;

use ctta::numerics::{Tape, Tensor, Var};
use ctta::rng::{self, Rng};
use rand::Rng as _;

pub fn normal(g: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = rng::normal_vec(g, rows * cols).into_iter().map(|v| v * scale).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn uniform(g: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| g.gen_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Strictly positive weights summing to one.
pub fn simplex(g: &mut Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| g.gen_range(0.05..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Builds a scalar from leaves holding `inputs`.
pub type Builder<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> ctta::Result<Var<'t>> + 'a;

fn evaluate(build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    build(&tape, &leaves).unwrap().item()
}

/// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the tape gradient
/// and central finite differences, taken over every entry of every input.
pub fn gradient_error(build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &leaves).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
        .collect();

    let mut numeric = Vec::with_capacity(analytic.len());
    for k in 0..inputs.len() {
        for e in 0..inputs[k].numel() {
            let x = inputs[k].data()[e];
            let h = 1e-5 * x.abs().max(1.0);
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] = x + h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] = x - h;
            numeric.push((evaluate(build, &plus) - evaluate(build, &minus)) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Row Gram matrix under the linear kernel, written out entry by entry.
fn linear_gram(f: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = f.dims2();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            for c in 0..d {
                k[i][j] += f.get(i, c) * f.get(j, c);
            }
        }
    }
    k
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            for j in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// `tr(K·H·L·H) / (n−1)²` with linear kernels, evaluated with explicit
/// loops and an explicit centering matrix.
pub fn hsic_transcription(inv: &Tensor, sp: &Tensor) -> f64 {
    let n = inv.rows();
    let k = linear_gram(inv);
    let l = linear_gram(sp);
    let h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64).collect())
        .collect();
    let prod = matmul(&matmul(&matmul(&k, &h), &l), &h);
    let tr: f64 = (0..n).map(|i| prod[i][i]).sum();
    tr / ((n - 1) * (n - 1)) as f64
}

/// Exact optimal transport cost by successive shortest augmenting paths
/// on the bipartite residual graph.
pub fn exact_transport(cost: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let (n, m) = cost.dims2();
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![vec![0.0; m]; n];
    let tiny = 1e-15;
    // Nodes: 0..n rows, n..n+m columns. Distances from a virtual source that
    // feeds every row with remaining supply.
    loop {
        if supply.iter().all(|&s| s <= tiny) || demand.iter().all(|&d| d <= tiny) {
            break;
        }
        let total = n + m;
        let mut dist = vec![f64::INFINITY; total];
        let mut prev: Vec<Option<usize>> = vec![None; total];
        for i in 0..n {
            if supply[i] > tiny {
                dist[i] = 0.0;
            }
        }
        for _ in 0..total {
            let mut changed = false;
            for i in 0..n {
                if dist[i].is_finite() {
                    for j in 0..m {
                        let nd = dist[i] + cost.get(i, j);
                        if nd < dist[n + j] - 1e-15 {
                            dist[n + j] = nd;
                            prev[n + j] = Some(i);
                            changed = true;
                        }
                    }
                }
            }
            for j in 0..m {
                if dist[n + j].is_finite() {
                    for i in 0..n {
                        if flow[i][j] > tiny {
                            let nd = dist[n + j] - cost.get(i, j);
                            if nd < dist[i] - 1e-15 {
                                dist[i] = nd;
                                prev[i] = Some(n + j);
                                changed = true;
                            }
                        }
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let end = (0..m)
            .filter(|&j| demand[j] > tiny && dist[n + j].is_finite())
            .min_by(|&x, &y| dist[n + x].total_cmp(&dist[n + y]))
            .expect("feasible transport");
        let mut path = vec![n + end];
        let mut node = n + end;
        while let Some(p) = prev[node] {
            path.push(p);
            node = p;
            if node < n && prev[node].is_none() {
                break;
            }
        }
        path.reverse();
        let start = path[0];
        let mut amount = supply[start].min(demand[end]);
        for w in path.windows(2) {
            if w[0] >= n {
                amount = amount.min(flow[w[1]][w[0] - n]);
            }
        }
        for w in path.windows(2) {
            if w[0] < n {
                flow[w[0]][w[1] - n] += amount;
            } else {
                flow[w[1]][w[0] - n] -= amount;
            }
        }
        supply[start] -= amount;
        demand[end] -= amount;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            total += flow[i][j] * cost.get(i, j);
        }
    }
    total
}

/// Mean and variance of a sample.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

pub fn seeded(label: &str) -> Rng {
    rng::stream(20_240_917, label)
}
