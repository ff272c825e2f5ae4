//! Synthetic source data and continual domain-shift streams.
//!
//! Instances are feature vectors drawn from a class-conditional Gaussian
//! mixture. Target domains apply feature-space analogues of image
//! corruptions (noise, blur, brightness, contrast, occlusion) at a severity
//! between 1 and 5.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Rng};

/// Distance of every class mean from the origin. Pairwise separation is
/// `MEAN_SCALE·√2 ≈ 5.7σ`.
pub const MEAN_SCALE: f64 = 4.0;

/// Seed of the fixed rotation that places the class means; shared by every
/// experiment so the source distribution does not depend on the run seed.
const MEANS_SEED: u64 = 0x5EED_C1A5;

pub const MAX_SEVERITY: u8 = 5;

/// A batch of instances with labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub domain: String,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Consecutive batches of `size` rows; the last may be shorter.
    pub fn chunks(&self, size: usize) -> Vec<LabeledBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(size.max(1))
            .map(|rows| LabeledBatch {
                features: self.features.select_rows(rows),
                labels: rows.iter().map(|&i| self.labels[i]).collect(),
                domain: self.domain.clone(),
            })
            .collect()
    }
}

/// Class means: `MEAN_SCALE` times `classes` orthonormal directions in
/// `d_in` dimensions (a scaled simplex in a fixed random orientation).
pub fn class_means(classes: usize, d_in: usize) -> Result<Tensor> {
    if classes < 2 || classes > d_in {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= classes <= d_in, got {classes} classes in {d_in} dims"
        )));
    }
    let mut g = rng::stream(MEANS_SEED, "class-means");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while basis.len() < classes {
        let mut v = rng::normal_vec(&mut g, d_in);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.iter().map(|x| x / norm).collect());
        }
    }
    let rows: Vec<Vec<f64>> = basis
        .into_iter()
        .map(|b| b.into_iter().map(|x| x * MEAN_SCALE).collect())
        .collect();
    Tensor::from_rows(&rows)
}

fn sample_mixture(g: &mut Rng, n: usize, means: &Tensor, domain: &str) -> Result<LabeledBatch> {
    let (classes, d_in) = means.dims2();
    let mut data = Vec::with_capacity(n * d_in);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = g.gen_range(0..classes);
        labels.push(c);
        let noise = rng::normal_vec(g, d_in);
        data.extend(means.row_slice(c).iter().zip(noise).map(|(m, e)| m + e));
    }
    Ok(LabeledBatch {
        features: Tensor::matrix(n, d_in, data)?,
        labels,
        domain: domain.to_string(),
    })
}

/// Labeled source train and test sets with unit-covariance classes.
pub fn make_source(
    seed: u64,
    n_train: usize,
    n_test: usize,
    classes: usize,
    d_in: usize,
) -> Result<(LabeledBatch, LabeledBatch)> {
    let means = class_means(classes, d_in)?;
    let train = sample_mixture(&mut rng::stream(seed, "source-train"), n_train, &means, "source")?;
    let test = sample_mixture(&mut rng::stream(seed, "source-test"), n_test, &means, "source")?;
    Ok((train, test))
}

/// Feature-space corruption family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    Identity,
    AdditiveNoise,
    Smoothing,
    BrightnessShift,
    ContrastScale,
    FeatureDropout,
}

impl Corruption {
    pub const ALL: [Corruption; 6] = [
        Corruption::Identity,
        Corruption::AdditiveNoise,
        Corruption::Smoothing,
        Corruption::BrightnessShift,
        Corruption::ContrastScale,
        Corruption::FeatureDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Identity => "identity",
            Corruption::AdditiveNoise => "additive_noise",
            Corruption::Smoothing => "smoothing",
            Corruption::BrightnessShift => "brightness_shift",
            Corruption::ContrastScale => "contrast_scale",
            Corruption::FeatureDropout => "feature_dropout",
        }
    }
}

impl std::str::FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption '{s}'")))
    }
}

/// One target domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub corruption: Corruption,
    /// 1 to 5; 0 is accepted and means "no corruption".
    pub severity: u8,
    pub seed: u64,
}

impl DomainSpec {
    pub fn new(corruption: Corruption, severity: u8, seed: u64) -> Self {
        DomainSpec {
            name: corruption.name().to_string(),
            corruption,
            severity,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::InvalidArgument(format!(
                "severity {} outside 0..={MAX_SEVERITY}",
                self.severity
            )));
        }
        Ok(())
    }
}

/// Default shift sequence: noise, smoothing, brightness, contrast, dropout.
pub fn default_sequence(severity: u8, seed: u64) -> Vec<DomainSpec> {
    [
        Corruption::AdditiveNoise,
        Corruption::Smoothing,
        Corruption::BrightnessShift,
        Corruption::ContrastScale,
        Corruption::FeatureDropout,
    ]
    .into_iter()
    .enumerate()
    .map(|(i, c)| DomainSpec::new(c, severity, rng::derive_seed(seed, &format!("domain-{i}"))))
    .collect()
}

/// Applies a domain's corruption. Labels and row count are unchanged.
///
/// Random corruptions draw one uniform/normal value per entry from the
/// domain's seed, so for a fixed seed the perturbation grows monotonically
/// with severity.
pub fn corrupt(batch: &LabeledBatch, spec: &DomainSpec) -> Result<LabeledBatch> {
    spec.validate()?;
    let sev = spec.severity as f64;
    let x = &batch.features;
    let features = if spec.severity == 0 {
        x.clone()
    } else {
        match spec.corruption {
            Corruption::Identity => x.clone(),
            Corruption::AdditiveNoise => {
                let mut g = rng::stream(spec.seed, "additive-noise");
                let noise = rng::normal_vec(&mut g, x.numel());
                let mut out = x.clone();
                out.data_mut()
                    .iter_mut()
                    .zip(noise)
                    .for_each(|(v, e)| *v += 0.25 * sev * e);
                out
            }
            Corruption::Smoothing => box_smooth(x, spec.severity as usize)?,
            Corruption::BrightnessShift => x.map(|v| v + 0.3 * sev),
            Corruption::ContrastScale => x.map(|v| v * (1.0 + 0.2 * sev)),
            Corruption::FeatureDropout => {
                let mut g = rng::stream(spec.seed, "feature-dropout");
                let rate = 0.1 * sev;
                let mut out = x.clone();
                for v in out.data_mut() {
                    if g.gen::<f64>() < rate {
                        *v = 0.0;
                    }
                }
                out
            }
        }
    };
    Ok(LabeledBatch {
        features,
        labels: batch.labels.clone(),
        domain: spec.name.clone(),
    })
}

/// Moving average over feature dimensions with a window of `width`
/// entries, renormalized at the edges.
fn box_smooth(x: &Tensor, width: usize) -> Result<Tensor> {
    let (n, d) = x.dims2();
    let left = (width - 1) / 2;
    let right = width - 1 - left;
    let mut out = Vec::with_capacity(n * d);
    for r in 0..n {
        let row = x.row_slice(r);
        for j in 0..d {
            let lo = j.saturating_sub(left);
            let hi = (j + right).min(d - 1);
            let window = &row[lo..=hi];
            out.push(window.iter().sum::<f64>() / window.len() as f64);
        }
    }
    Tensor::matrix(n, d, out)
}

/// A target batch as the adaptation loop sees it: features only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledBatch {
    pub features: Tensor,
    pub domain_index: usize,
}

/// Labels of the stream's batches, kept apart from the features so the
/// adaptation loop cannot read them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLabels(pub Vec<Vec<usize>>);

impl HiddenLabels {
    pub fn for_batch(&self, i: usize) -> &[usize] {
        &self.0[i]
    }

    /// Same label multiset per batch in a random order; used to show the
    /// adaptation trajectory never depends on labels.
    pub fn shuffled(&self, seed: u64) -> HiddenLabels {
        use rand::seq::SliceRandom;
        let mut g = rng::stream(seed, "label-shuffle");
        HiddenLabels(
            self.0
                .iter()
                .map(|b| {
                    let mut b = b.clone();
                    b.shuffle(&mut g);
                    b
                })
                .collect(),
        )
    }
}

/// Ordered target batches plus a clean source tail for forgetting checks.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinualStream {
    pub domains: Vec<String>,
    pub batches: Vec<UnlabeledBatch>,
    pub hidden: HiddenLabels,
    /// Clean source batches evaluated after the stream, never adapted on.
    pub source_tail: Vec<LabeledBatch>,
}

/// Options for building a stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOptions {
    pub batch_size: usize,
    /// `None` covers the source test set exactly once per domain.
    pub batches_per_domain: Option<usize>,
    /// Ramp severity from 1 up to the domain's severity within each domain.
    pub gradual: bool,
}

/// Builds the continual stream domain by domain.
///
/// Each domain draws rows from the source test set in order (wrapping
/// around when more batches are requested than the set holds) and applies
/// its corruption with a per-batch seed.
pub fn make_continual_stream(
    source_test: &LabeledBatch,
    sequence: &[DomainSpec],
    opts: &StreamOptions,
) -> Result<ContinualStream> {
    if sequence.is_empty() {
        return Err(Error::InvalidArgument("domain sequence is empty".into()));
    }
    if source_test.is_empty() || opts.batch_size == 0 {
        return Err(Error::InvalidArgument("empty source test set or zero batch size".into()));
    }
    let n = source_test.len();
    let per_domain = opts
        .batches_per_domain
        .unwrap_or_else(|| n.div_ceil(opts.batch_size));
    let mut batches = Vec::new();
    let mut hidden = Vec::new();
    for (di, spec) in sequence.iter().enumerate() {
        spec.validate()?;
        for b in 0..per_domain {
            let rows: Vec<usize> = match opts.batches_per_domain {
                None => (b * opts.batch_size..((b + 1) * opts.batch_size).min(n)).collect(),
                Some(_) => (0..opts.batch_size).map(|k| (b * opts.batch_size + k) % n).collect(),
            };
            let clean = LabeledBatch {
                features: source_test.features.select_rows(&rows),
                labels: rows.iter().map(|&i| source_test.labels[i]).collect(),
                domain: "source".into(),
            };
            let severity = if opts.gradual && spec.severity > 0 {
                ramp_severity(b, per_domain, spec.severity)
            } else {
                spec.severity
            };
            let batch_spec = DomainSpec {
                name: spec.name.clone(),
                corruption: spec.corruption,
                severity,
                seed: rng::derive_seed(spec.seed, &format!("batch-{b}")),
            };
            let corrupted = corrupt(&clean, &batch_spec)?;
            batches.push(UnlabeledBatch {
                features: corrupted.features,
                domain_index: di,
            });
            hidden.push(corrupted.labels);
        }
    }
    Ok(ContinualStream {
        domains: sequence.iter().map(|s| s.name.clone()).collect(),
        batches,
        hidden: HiddenLabels(hidden),
        source_tail: source_test.chunks(opts.batch_size),
    })
}

fn ramp_severity(b: usize, per_domain: usize, top: u8) -> u8 {
    if per_domain <= 1 {
        return top;
    }
    let span = (top - 1) as usize;
    1 + (b * span / (per_domain - 1)) as u8
}

#[derive(Serialize, Deserialize)]
struct StreamLine {
    domain: String,
    domain_index: usize,
    features: Tensor,
    labels: Vec<usize>,
}

impl ContinualStream {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Writes the adaptation batches as line-delimited JSON for replay.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (b, labels) in self.batches.iter().zip(&self.hidden.0) {
            let line = StreamLine {
                domain: self.domains[b.domain_index].clone(),
                domain_index: b.domain_index,
                features: b.features.clone(),
                labels: labels.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads batches written by [`ContinualStream::write_jsonl`]; the source
    /// tail is supplied separately since it is not part of the dump.
    pub fn read_jsonl(path: &Path, source_tail: Vec<LabeledBatch>) -> Result<ContinualStream> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut domains: Vec<String> = Vec::new();
        let mut batches = Vec::new();
        let mut hidden = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: StreamLine = serde_json::from_str(&line)?;
            if rec.domain_index == domains.len() {
                domains.push(rec.domain.clone());
            }
            batches.push(UnlabeledBatch {
                features: rec.features,
                domain_index: rec.domain_index,
            });
            hidden.push(rec.labels);
        }
        Ok(ContinualStream {
            domains,
            batches,
            hidden: HiddenLabels(hidden),
            source_tail,
        })
    }
}
