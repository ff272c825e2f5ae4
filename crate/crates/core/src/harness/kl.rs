use crate::align::{confident_rows, ClassCenters};
use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

/// Variance floor for both the target fit and the source statistics.
pub const KL_VARIANCE_FLOOR: f64 = 1e-6;

/// Diagonal-Gaussian KL alignment baseline.
///
/// For every pseudo-class present among the confident rows, fits a diagonal
/// Gaussian to those rows and returns `KL(target ‖ source)` against the
/// class's source statistics, averaged over the present classes. A batch
/// without confident rows yields a literal zero.
pub fn kl_align_loss<'t>(
    target: Var<'t>,
    pseudo: &[usize],
    conf: &[f64],
    centers: &ClassCenters,
    tau: f64,
) -> Result<Var<'t>> {
    let x = target.value();
    let (n, d) = x.dims2();
    if pseudo.len() != n || conf.len() != n {
        return Err(Error::shape("kl_align_loss", x.shape(), &[pseudo.len(), conf.len()]));
    }
    if d != centers.d_feat() {
        return Err(Error::shape("kl_align_loss", x.shape(), centers.centers.shape()));
    }
    let tape = target.tape();
    let rows = confident_rows(pseudo, conf, centers, tau);
    let mut total = tape.scalar(0.0);
    let mut present = 0usize;
    let sq = target.square();
    for (kc, &class) in centers.class_ids.iter().enumerate() {
        let members: Vec<usize> = rows.iter().copied().filter(|&i| pseudo[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        present += 1;
        let mut w = vec![0.0; n];
        for &i in &members {
            w[i] = 1.0 / members.len() as f64;
        }
        let w = tape.constant(Tensor::matrix(1, n, w)?);
        let mean = w.matmul(target)?;
        let var = w.matmul(sq)?.sub(mean.square())?.clamp_min(KL_VARIANCE_FLOOR);

        let mu = centers.centers.row_slice(kc);
        let src_var: Vec<f64> = centers.variances.row_slice(kc).iter().map(|v| v.max(KL_VARIANCE_FLOOR)).collect();
        let half_inv = tape.constant(Tensor::row(src_var.iter().map(|v| 0.5 / v).collect()));
        let log_src: f64 = src_var.iter().map(|v| v.ln()).sum();
        let diff = mean.sub(tape.constant(Tensor::row(mu.to_vec())))?;
        // Σ_d ½[log σ_s² − log σ_t² + (σ_t² + (m_t − m_s)²)/σ_s² − 1]
        let quad = var.add(diff.square())?.mul(half_inv)?.sum();
        let term = quad
            .sub(var.log().sum().scale(0.5))?
            .add(tape.scalar(0.5 * log_src - 0.5 * d as f64))?;
        total = total.add(term)?;
    }
    if present == 0 {
        return Ok(total);
    }
    Ok(total.scale(1.0 / present as f64))
}
