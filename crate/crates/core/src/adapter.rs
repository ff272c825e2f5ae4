//! Dual-path low-rank domain-aware adapter and its disentanglement losses.
//!
//! A site wraps a frozen base weight `W_b` with two low-rank paths. The
//! domain-invariant path `A_inv·B_inv` is added and the domain-specific path
//! `A_sp·B_sp` is subtracted, so the effective weight is
//! `W_b + A_inv·B_inv − A_sp·B_sp`. The per-path features are returned so
//! the orthogonality and HSIC penalties can push the two paths apart.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Param, Tape, Tensor, Var};
use crate::rng::Rng;

/// Standard deviation of the initial `A` factors.
pub const FACTOR_INIT_STD: f64 = 0.02;

/// Which adapter wraps the backbone layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    /// Invariant and specific paths with disentanglement losses.
    Dual,
    /// A single low-rank path `W_b + A·B`.
    #[serde(alias = "plain")]
    PlainLora,
    /// No adapter sites at all.
    Off,
}

impl std::fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdapterKind::Dual => "dual",
            AdapterKind::PlainLora => "plain_lora",
            AdapterKind::Off => "off",
        })
    }
}

/// `A: [d × r]`, `B: [r × d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPair {
    pub a: Param,
    pub b: Param,
}

impl LowRankPair {
    fn init(d: usize, r: usize, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, FACTOR_INIT_STD).expect("valid std");
        let a = (0..d * r).map(|_| normal.sample(rng)).collect();
        LowRankPair {
            a: Param::new(Tensor::matrix(d, r, a).expect("sized")),
            b: Param::new(Tensor::zeros(&[r, d])),
        }
    }

    pub fn rank(&self) -> usize {
        self.a.value.cols()
    }

    /// Dense `A·B`.
    pub fn delta(&self) -> Tensor {
        self.a.value.matmul(&self.b.value).expect("consistent factors")
    }
}

/// One adapter insertion point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SiteRecord", into = "SiteRecord")]
pub struct AdapterSite {
    pub base: Param,
    pub invariant: LowRankPair,
    /// Absent for a plain low-rank adapter.
    pub specific: Option<LowRankPair>,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct SiteRecord {
    d: usize,
    r1: usize,
    r2: usize,
    W_b: Tensor,
    A_inv: Tensor,
    B_inv: Tensor,
    A_sp: Option<Tensor>,
    B_sp: Option<Tensor>,
}

impl From<AdapterSite> for SiteRecord {
    fn from(s: AdapterSite) -> Self {
        SiteRecord {
            d: s.d(),
            r1: s.r1(),
            r2: s.r2(),
            W_b: s.base.value,
            A_inv: s.invariant.a.value,
            B_inv: s.invariant.b.value,
            A_sp: s.specific.as_ref().map(|p| p.a.value.clone()),
            B_sp: s.specific.map(|p| p.b.value),
        }
    }
}

impl TryFrom<SiteRecord> for AdapterSite {
    type Error = Error;

    fn try_from(r: SiteRecord) -> Result<Self> {
        let specific = match (r.A_sp, r.B_sp) {
            (Some(a), Some(b)) => Some(LowRankPair {
                a: Param::new(a),
                b: Param::new(b),
            }),
            (None, None) => None,
            _ => {
                return Err(Error::InvalidArgument(
                    "adapter record has only one specific factor".into(),
                ))
            }
        };
        let site = AdapterSite {
            base: Param::new(r.W_b),
            invariant: LowRankPair {
                a: Param::new(r.A_inv),
                b: Param::new(r.B_inv),
            },
            specific,
        };
        site.validate()?;
        if site.d() != r.d || site.r1() != r.r1 || site.r2() != r.r2 {
            return Err(Error::InvalidArgument(format!(
                "adapter record header (d={}, r1={}, r2={}) disagrees with its tensors",
                r.d, r.r1, r.r2
            )));
        }
        Ok(site)
    }
}

impl AdapterSite {
    /// Wraps `base` (`[d × d]`) with freshly initialized factors.
    ///
    /// `r2 = None` builds a plain low-rank adapter. `A` factors are drawn
    /// from `N(0, 0.02²)` and `B` factors start at zero, so a new site is an
    /// exact identity perturbation of the base layer.
    pub fn new(base: Tensor, r1: usize, r2: Option<usize>, rng: &mut Rng) -> Result<Self> {
        let d = base.rows();
        if base.shape() != [d, d] {
            return Err(Error::InvalidArgument(format!(
                "adapter base weight must be square, got {:?}",
                base.shape()
            )));
        }
        let check = |r: usize| {
            if r == 0 || r > d {
                Err(Error::InvalidArgument(format!("rank {r} outside 1..={d}")))
            } else {
                Ok(())
            }
        };
        check(r1)?;
        if let Some(r2) = r2 {
            check(r2)?;
        }
        let invariant = LowRankPair::init(d, r1, rng);
        let specific = r2.map(|r2| LowRankPair::init(d, r2, rng));
        Ok(AdapterSite {
            base: Param::new(base),
            invariant,
            specific,
        })
    }

    fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.base.value.shape() != [d, d] {
            return Err(Error::shape("adapter base", self.base.value.shape(), &[d, d]));
        }
        let pairs = std::iter::once(&self.invariant).chain(self.specific.as_ref());
        for p in pairs {
            let r = p.rank();
            if r == 0 || r > d {
                return Err(Error::InvalidArgument(format!("rank {r} outside 1..={d}")));
            }
            if p.a.value.shape() != [d, r] || p.b.value.shape() != [r, d] {
                return Err(Error::shape("adapter factors", p.a.value.shape(), p.b.value.shape()));
            }
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.base.value.rows()
    }

    pub fn r1(&self) -> usize {
        self.invariant.rank()
    }

    /// Rank of the specific path; zero for a plain adapter.
    pub fn r2(&self) -> usize {
        self.specific.as_ref().map_or(0, LowRankPair::rank)
    }

    pub fn is_dual(&self) -> bool {
        self.specific.is_some()
    }

    /// Number of trainable factor entries, `2·d·(r1 + r2)`.
    pub fn parameter_count(&self) -> usize {
        2 * self.d() * (self.r1() + self.r2())
    }

    /// Factors in packing order `[A_inv, B_inv, A_sp, B_sp]`.
    pub fn factors(&self) -> Vec<&Param> {
        let mut out = vec![&self.invariant.a, &self.invariant.b];
        if let Some(sp) = &self.specific {
            out.extend([&sp.a, &sp.b]);
        }
        out
    }

    pub fn factors_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.invariant.a, &mut self.invariant.b];
        if let Some(sp) = &mut self.specific {
            out.extend([&mut sp.a, &mut sp.b]);
        }
        out
    }

    /// Dense `W_b + A_inv·B_inv − A_sp·B_sp`.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = self.base.value.clone();
        let inv = self.invariant.delta();
        let sp = self.specific.as_ref().map(LowRankPair::delta);
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v += inv.data()[i];
            if let Some(sp) = &sp {
                *v -= sp.data()[i];
            }
        }
        w
    }

    /// Places the site on a tape. Factors are differentiable leaves when
    /// `train_factors`; the base weight only when `train_base`.
    pub fn bind<'t>(&self, tape: &'t Tape, train_factors: bool, train_base: bool) -> BoundSite<'t> {
        let bind = |p: &Param, train: bool| if train { p.bind(tape) } else { p.bind_frozen(tape) };
        BoundSite {
            base: bind(&self.base, train_base),
            a_inv: bind(&self.invariant.a, train_factors),
            b_inv: bind(&self.invariant.b, train_factors),
            specific: self
                .specific
                .as_ref()
                .map(|sp| (bind(&sp.a, train_factors), bind(&sp.b, train_factors))),
        }
    }
}

/// A site's tensors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundSite<'t> {
    pub base: Var<'t>,
    pub a_inv: Var<'t>,
    pub b_inv: Var<'t>,
    pub specific: Option<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundSite<'t> {
    /// Factor variables in packing order.
    pub fn factor_vars(&self) -> Vec<Var<'t>> {
        let mut out = vec![self.a_inv, self.b_inv];
        if let Some((a, b)) = self.specific {
            out.extend([a, b]);
        }
        out
    }
}

/// Per-path features of one adapter site for a batch of `n` rows.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledFeatures<'t> {
    pub inv: Var<'t>,
    pub sp: Var<'t>,
}

impl DisentangledFeatures<'_> {
    pub fn rows(&self) -> usize {
        self.inv.value().rows()
    }
}

/// Applies a bound site to `x: [n × d]`.
///
/// Returns `x·W_b + F_inv − F_sp` together with the features of both paths
/// (the specific features are absent for a plain adapter).
pub fn adapter_forward<'t>(
    x: Var<'t>,
    site: &BoundSite<'t>,
) -> Result<(Var<'t>, Option<DisentangledFeatures<'t>>)> {
    let d = site.base.value().rows();
    let xv = x.value();
    if xv.shape().len() != 2 || xv.cols() != d {
        return Err(Error::shape("adapter_forward", xv.shape(), &[d, d]));
    }
    let base = x.matmul(site.base)?;
    let inv = x.matmul(site.a_inv)?.matmul(site.b_inv)?;
    match site.specific {
        Some((a_sp, b_sp)) => {
            let sp = x.matmul(a_sp)?.matmul(b_sp)?;
            let y = base.add(inv)?.sub(sp)?;
            Ok((y, Some(DisentangledFeatures { inv, sp })))
        }
        None => Ok((base.add(inv)?, None)),
    }
}

fn check_pair(feats: &DisentangledFeatures<'_>) -> Result<()> {
    let (a, b) = (feats.inv.value(), feats.sp.value());
    if a.shape() != b.shape() || a.shape().len() != 2 {
        return Err(Error::shape("disentangled features", a.shape(), b.shape()));
    }
    Ok(())
}

/// `‖F_invᵀ·F_sp‖_F²`.
pub fn orth_loss<'t>(feats: &DisentangledFeatures<'t>) -> Result<Var<'t>> {
    check_pair(feats)?;
    Ok(feats.inv.t()?.matmul(feats.sp)?.frobenius_sq())
}

/// `H = I_n − (1/n)·𝟙𝟙ᵀ`.
pub fn centering_matrix(n: usize) -> Result<Tensor> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "centering matrix needs n >= 2, got {n}"
        )));
    }
    let inv = 1.0 / n as f64;
    let data = (0..n * n)
        .map(|k| if k / n == k % n { 1.0 - inv } else { -inv })
        .collect();
    Tensor::matrix(n, n, data)
}

/// Kernel used to build Gram matrices for HSIC.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Kernel {
    #[default]
    Linear,
    /// Gaussian kernel `exp(−‖a−b‖²/(2σ²))`; `sigma = None` uses the median
    /// pairwise distance of the batch.
    Rbf { sigma: Option<f64> },
}

fn median_pairwise_distance(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x
                .row_slice(i)
                .iter()
                .zip(x.row_slice(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if s > 0.0 {
                d.push(s.sqrt());
            }
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Gram matrix of the rows of `f` under `kernel`.
pub fn gram<'t>(f: Var<'t>, kernel: Kernel) -> Result<Var<'t>> {
    let linear = f.matmul(f.t()?)?;
    match kernel {
        Kernel::Linear => Ok(linear),
        Kernel::Rbf { sigma } => {
            let sigma = match sigma {
                Some(s) if s > 0.0 && s.is_finite() => s,
                Some(s) => {
                    return Err(Error::InvalidArgument(format!(
                        "rbf bandwidth must be positive, got {s}"
                    )))
                }
                None => median_pairwise_distance(&f.value()),
            };
            let tape = f.tape();
            let (n, d) = f.value().dims2();
            let sq_norms = f.square().matmul(tape.constant(Tensor::filled(&[d, 1], 1.0)))?;
            let ones_row = tape.constant(Tensor::filled(&[1, n], 1.0));
            let ones_col = tape.constant(Tensor::filled(&[n, 1], 1.0));
            let dist = sq_norms
                .matmul(ones_row)?
                .add(ones_col.matmul(sq_norms.t()?)?)?
                .sub(linear.scale(2.0))?;
            Ok(dist.scale(-1.0 / (2.0 * sigma * sigma)).exp())
        }
    }
}

/// `(1/(n−1)²)·Tr(K_inv·H·K_sp·H)`.
pub fn hsic<'t>(feats: &DisentangledFeatures<'t>, kernel: Kernel) -> Result<Var<'t>> {
    check_pair(feats)?;
    let n = feats.rows();
    let h = feats.inv.tape().constant(centering_matrix(n)?);
    let k_inv = gram(feats.inv, kernel)?;
    let k_sp = gram(feats.sp, kernel)?;
    let tr = k_inv.matmul(h)?.matmul(k_sp)?.matmul(h)?.trace()?;
    Ok(tr.scale(1.0 / ((n - 1) * (n - 1)) as f64))
}

/// `λ_orth·L_orth + λ_HSIC·L_HSIC`; zero-weighted terms are not evaluated.
pub fn adapter_loss<'t>(
    feats: &DisentangledFeatures<'t>,
    lambda_orth: f64,
    lambda_hsic: f64,
    kernel: Kernel,
) -> Result<Var<'t>> {
    if !(lambda_orth >= 0.0 && lambda_hsic >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "adapter loss weights must be non-negative, got {lambda_orth}, {lambda_hsic}"
        )));
    }
    let tape = feats.inv.tape();
    let mut total = tape.scalar(0.0);
    if lambda_orth > 0.0 {
        total = total.add(orth_loss(feats)?.scale(lambda_orth))?;
    }
    if lambda_hsic > 0.0 {
        total = total.add(hsic(feats, kernel)?.scale(lambda_hsic))?;
    }
    Ok(total)
}
