use serde::{Deserialize, Serialize};

use crate::adapter::AdapterSite;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Minimum number of snapshots before a generator may be trained.
pub const MIN_SNAPSHOTS: usize = 64;

/// Flattened `[A_inv | B_inv | A_sp | B_sp]` of one adapter site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub site_id: usize,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn pack(site_id: usize, site: &AdapterSite) -> Self {
        let values = site
            .factors()
            .into_iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        ParamVector { site_id, values }
    }

    /// Writes the values back into the factors of `site`.
    pub fn unpack_into(&self, site: &mut AdapterSite) -> Result<()> {
        if self.values.len() != site.parameter_count() {
            return Err(Error::InvalidArgument(format!(
                "parameter vector of length {} does not fit a site with {} factor entries",
                self.values.len(),
                site.parameter_count()
            )));
        }
        let mut offset = 0;
        for p in site.factors_mut() {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&self.values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::row(self.values.clone())
    }
}

/// Pooled scene features of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub c: Vec<f64>,
}

impl Condition {
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("condition vector".into()));
        }
        Ok(Condition { c })
    }

    /// From a `[1 × c_dim]` pooled feature tensor.
    pub fn from_pooled(pooled: &Tensor) -> Result<Self> {
        Condition::new(pooled.data().to_vec())
    }

    pub fn as_row(&self) -> Tensor {
        Tensor::row(self.c.clone())
    }
}

/// Adapter state of every site at one training step, with its condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub params: Vec<ParamVector>,
    pub condition: Condition,
}

/// Records snapshots every `every_k` steps once `warmup` steps have passed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotCollector {
    pub every_k: usize,
    pub warmup: usize,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotCollector {
    pub fn new(every_k: usize, warmup: usize) -> Result<Self> {
        if every_k == 0 {
            return Err(Error::InvalidArgument("snapshot interval must be positive".into()));
        }
        Ok(SnapshotCollector { every_k, warmup, snapshots: Vec::new() })
    }

    /// Whether 1-indexed `step` is a recording step.
    pub fn due(&self, step: usize) -> bool {
        step > self.warmup && (step - self.warmup) % self.every_k == 0
    }

    /// Records the sites after `step` if due. Returns whether it recorded.
    pub fn observe(&mut self, step: usize, sites: &[&AdapterSite], condition: &Condition) -> bool {
        if !self.due(step) {
            return false;
        }
        let params = sites
            .iter()
            .enumerate()
            .map(|(i, s)| ParamVector::pack(i, s))
            .collect();
        self.snapshots.push(Snapshot { step, params, condition: condition.clone() });
        true
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn ensure_ready(&self) -> Result<()> {
        if self.snapshots.len() < MIN_SNAPSHOTS {
            return Err(Error::InvalidState(format!(
                "{} snapshots collected, at least {MIN_SNAPSHOTS} are needed",
                self.snapshots.len()
            )));
        }
        Ok(())
    }

    /// Site `site_id` parameters stacked as `[n × p]`, with conditions `[n × c]`.
    pub fn site_matrix(&self, site_id: usize) -> Result<(Tensor, Tensor)> {
        let mut rows = Vec::with_capacity(self.snapshots.len());
        let mut conds = Vec::with_capacity(self.snapshots.len());
        for s in &self.snapshots {
            let pv = s.params.get(site_id).ok_or_else(|| {
                Error::InvalidArgument(format!("snapshot at step {} has no site {site_id}", s.step))
            })?;
            rows.push(pv.values.clone());
            conds.push(s.condition.c.clone());
        }
        Ok((Tensor::from_rows(&rows)?, Tensor::from_rows(&conds)?))
    }

    pub fn sites(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.params.len())
    }
}
