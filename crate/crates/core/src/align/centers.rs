use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-class mean (and diagonal variance) of source features.
///
/// Classes without any source sample are dropped; `class_ids` maps each
/// retained row back to its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CentersRecord", into = "CentersRecord")]
pub struct ClassCenters {
    pub classes: usize,
    pub centers: Tensor,
    pub variances: Tensor,
    pub counts: Vec<usize>,
    pub class_ids: Vec<usize>,
    pub dropped: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct CentersRecord {
    C: usize,
    d_feat: usize,
    centers: Tensor,
    counts: Vec<usize>,
    class_ids: Vec<usize>,
    variances: Tensor,
    #[serde(default)]
    dropped: Vec<usize>,
}

impl From<ClassCenters> for CentersRecord {
    fn from(c: ClassCenters) -> Self {
        CentersRecord {
            C: c.classes,
            d_feat: c.d_feat(),
            centers: c.centers,
            counts: c.counts,
            class_ids: c.class_ids,
            variances: c.variances,
            dropped: c.dropped,
        }
    }
}

impl TryFrom<CentersRecord> for ClassCenters {
    type Error = Error;

    fn try_from(r: CentersRecord) -> Result<Self> {
        let k = r.class_ids.len();
        if r.centers.shape() != [k, r.d_feat]
            || r.variances.shape() != r.centers.shape()
            || r.counts.len() != k
            || r.counts.contains(&0)
            || r.class_ids.iter().any(|&c| c >= r.C)
        {
            return Err(Error::InvalidArgument("inconsistent class-centers record".into()));
        }
        Ok(ClassCenters {
            classes: r.C,
            centers: r.centers,
            variances: r.variances,
            counts: r.counts,
            class_ids: r.class_ids,
            dropped: r.dropped,
        })
    }
}

impl ClassCenters {
    pub fn d_feat(&self) -> usize {
        self.centers.cols()
    }

    /// Row of `class` in `centers`, if the class was retained.
    pub fn index_of(&self, class: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    pub fn center(&self, class: usize) -> Option<&[f64]> {
        self.index_of(class).map(|k| self.centers.row_slice(k))
    }

    pub fn variance(&self, class: usize) -> Option<&[f64]> {
        self.index_of(class).map(|k| self.variances.row_slice(k))
    }
}

/// Per-class means of `features` (`[N × d]`) grouped by `labels`.
pub fn compute_class_centers(features: &Tensor, labels: &[usize], classes: usize) -> Result<ClassCenters> {
    let (n, d) = features.dims2();
    if labels.len() != n {
        return Err(Error::shape("compute_class_centers", features.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{classes}")));
    }
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        sums[y].iter_mut().zip(features.row_slice(i)).for_each(|(s, v)| *s += v);
    }
    let mut means = vec![vec![0.0; d]; classes];
    for c in 0..classes {
        if counts[c] > 0 {
            means[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
        }
    }
    let mut sq = vec![vec![0.0; d]; classes];
    for (i, &y) in labels.iter().enumerate() {
        for ((s, v), m) in sq[y].iter_mut().zip(features.row_slice(i)).zip(&means[y]) {
            *s += (v - m) * (v - m);
        }
    }
    let kept: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let dropped = (0..classes).filter(|&c| counts[c] == 0).collect();
    let centers: Vec<Vec<f64>> = kept.iter().map(|&c| means[c].clone()).collect();
    let variances: Vec<Vec<f64>> = kept
        .iter()
        .map(|&c| sq[c].iter().map(|s| s / counts[c] as f64).collect())
        .collect();
    let empty = || Tensor::zeros(&[0, d]);
    Ok(ClassCenters {
        classes,
        centers: if kept.is_empty() { empty() } else { Tensor::from_rows(&centers)? },
        variances: if kept.is_empty() { empty() } else { Tensor::from_rows(&variances)? },
        counts: kept.iter().map(|&c| counts[c]).collect(),
        class_ids: kept,
        dropped,
    })
}

/// `‖x − μ‖²`.
pub fn transport_cost(x: &[f64], mu: &[f64]) -> Result<f64> {
    if x.len() != mu.len() {
        return Err(Error::shape("transport_cost", &[x.len()], &[mu.len()]));
    }
    Ok(x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum())
}
