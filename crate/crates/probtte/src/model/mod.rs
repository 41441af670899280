//! Learnable link representations and the batch joint Gaussian.
//!
//! Per time bucket the model holds `L` (|V| x r_L, day-level factor), `H`
//! (|V| x r_H, trip-level factor) and weight vectors `w_mu`, `w_d`. They
//! parameterize the global mean `mu = L w_mu`, the day-level covariance
//! `Sigma_d = L Lᵀ` and the trip-level covariance `Sigma_p = H Hᵀ + D` with
//! `diag(D) = softplus(H w_d)`.
//!
//! Targets may be standardized internally by an affine scale stored with the
//! parameters; likelihoods are always reported for the raw-seconds density so
//! they stay comparable across scales.

mod checkpoint;
mod gradients;
pub(crate) mod likelihood;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use gradients::{grad_nll, nll_and_grad, Gradients};
pub use likelihood::{batch_gaussian, nll, nll_dense, BatchGaussian, DENSE_ROW_GUARD};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::network::LinkId;
use crate::rng::substream;

/// Ridge added to every Lambda block diagonal before Cholesky, guarding
/// against round-off on degenerate but valid inputs.
pub const LAMBDA_FLOOR: f64 = 1e-9;

/// Overflow-safe softplus `ln(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Logistic sigmoid, the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine standardization of travel-time targets: `y = (t - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TargetScale {
    pub shift: f64,
    pub scale: f64,
}

impl Default for TargetScale {
    fn default() -> Self {
        Self { shift: 0.0, scale: 1.0 }
    }
}

impl TargetScale {
    pub fn validate(&self) -> Result<()> {
        if !self.shift.is_finite() || !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::validation(format!(
                "target scale must be finite with positive scale, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn standardize(&self, seconds: f64) -> f64 {
        (seconds - self.shift) / self.scale
    }

    pub fn mean_to_seconds(&self, y: f64) -> f64 {
        y * self.scale + self.shift
    }

    pub fn var_to_seconds(&self, v: f64) -> f64 {
        v * self.scale * self.scale
    }
}

/// Per-bucket learnable state.
#[derive(Debug, Clone, PartialEq)]
pub struct BucketParams {
    /// Day-level factor, |V| x r_L.
    pub l: DMatrix<f64>,
    /// Trip-level factor, |V| x r_H.
    pub h: DMatrix<f64>,
    pub w_mu: DVector<f64>,
    pub w_d: DVector<f64>,
    /// Set after contraction, where the aggregated diagonal is no longer a
    /// softplus image of `H w_d`.
    pub diag_override: Option<DVector<f64>>,
}

impl BucketParams {
    /// `diag(D)`: the override if present, else `softplus(H w_d)` elementwise.
    pub fn diag_d(&self) -> DVector<f64> {
        match &self.diag_override {
            Some(d) => d.clone(),
            None => (&self.h * &self.w_d).map(softplus),
        }
    }

    /// `mu = L w_mu`.
    pub fn mu(&self) -> DVector<f64> {
        &self.l * &self.w_mu
    }
}

/// All learnable state: one [`BucketParams`] per time bucket plus the target
/// standardization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    n_links: usize,
    r_l: usize,
    r_h: usize,
    scale: TargetScale,
    buckets: Vec<BucketParams>,
}

impl ModelParams {
    pub fn new(
        n_links: usize,
        r_l: usize,
        r_h: usize,
        scale: TargetScale,
        buckets: Vec<BucketParams>,
    ) -> Result<Self> {
        if n_links == 0 || r_l == 0 || r_h == 0 || buckets.is_empty() {
            return Err(Error::validation(
                "model needs n_links, r_l, r_h >= 1 and at least one bucket",
            ));
        }
        scale.validate()?;
        let has_override = buckets[0].diag_override.is_some();
        for (t, b) in buckets.iter().enumerate() {
            if b.l.nrows() != n_links
                || b.l.ncols() != r_l
                || b.h.nrows() != n_links
                || b.h.ncols() != r_h
                || b.w_mu.len() != r_l
                || b.w_d.len() != r_h
            {
                return Err(Error::dimension(format!("bucket {t}: shape mismatch")));
            }
            if b.diag_override.is_some() != has_override {
                return Err(Error::validation(
                    "diag override must be present in all buckets or none",
                ));
            }
            if let Some(d) = &b.diag_override {
                if d.len() != n_links {
                    return Err(Error::dimension(format!("bucket {t}: diag override length")));
                }
                if d.iter().any(|&x| !x.is_finite() || x < 0.0) {
                    return Err(Error::validation(format!(
                        "bucket {t}: diag override must be finite and non-negative"
                    )));
                }
            }
            let finite = b.l.iter().chain(b.h.iter()).chain(b.w_mu.iter()).chain(b.w_d.iter());
            if finite.into_iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!("bucket {t}: non-finite parameter")));
            }
        }
        Ok(Self { n_links, r_l, r_h, scale, buckets })
    }

    /// Random initialization: `L`, `H` entries i.i.d. normal with standard
    /// deviation `0.1/sqrt(r)`, `w_mu = w_d = 0` (so `diag(D) = ln 2`).
    pub fn init(
        n_links: usize,
        r_l: usize,
        r_h: usize,
        p: usize,
        seed: u64,
        scale: TargetScale,
    ) -> Result<Self> {
        let buckets = (0..p)
            .map(|t| {
                let mut rng = substream(seed, &format!("init-bucket-{t}"));
                let sd_l = 0.1 / (r_l as f64).sqrt();
                let sd_h = 0.1 / (r_h as f64).sqrt();
                let l = DMatrix::from_fn(n_links, r_l, |_, _| {
                    sd_l * rng.sample::<f64, _>(StandardNormal)
                });
                let h = DMatrix::from_fn(n_links, r_h, |_, _| {
                    sd_h * rng.sample::<f64, _>(StandardNormal)
                });
                BucketParams {
                    l,
                    h,
                    w_mu: DVector::zeros(r_l),
                    w_d: DVector::zeros(r_h),
                    diag_override: None,
                }
            })
            .collect();
        Self::new(n_links, r_l, r_h, scale, buckets)
    }

    pub fn link_count(&self) -> usize {
        self.n_links
    }

    pub fn r_l(&self) -> usize {
        self.r_l
    }

    pub fn r_h(&self) -> usize {
        self.r_h
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn scale(&self) -> TargetScale {
        self.scale
    }

    pub fn set_scale(&mut self, scale: TargetScale) -> Result<()> {
        scale.validate()?;
        self.scale = scale;
        Ok(())
    }

    pub fn bucket(&self, t: usize) -> Result<&BucketParams> {
        self.buckets
            .get(t)
            .ok_or_else(|| Error::validation(format!("bucket {t} out of range")))
    }

    pub fn bucket_mut(&mut self, t: usize) -> Result<&mut BucketParams> {
        let p = self.buckets.len();
        self.buckets
            .get_mut(t)
            .ok_or_else(|| Error::validation(format!("bucket {t} out of range 0..{p}")))
    }

    pub fn buckets(&self) -> &[BucketParams] {
        &self.buckets
    }

    /// Validate that every link id is in range.
    pub fn check_links<'a>(&self, links: impl IntoIterator<Item = &'a LinkId>) -> Result<()> {
        for &l in links {
            if l as usize >= self.n_links {
                return Err(Error::validation(format!(
                    "link {l} outside 0..{}",
                    self.n_links
                )));
            }
        }
        Ok(())
    }

    /// Sum the rows of `mat` selected by `links`.
    pub(crate) fn sum_rows(mat: &DMatrix<f64>, links: &[LinkId]) -> DVector<f64> {
        let mut acc = DVector::zeros(mat.ncols());
        for &l in links {
            acc += mat.row(l as usize).transpose();
        }
        acc
    }

    /// `mu = L w_mu` for one bucket (model units).
    pub fn mu_vector(&self, bucket: usize) -> Result<DVector<f64>> {
        Ok(self.bucket(bucket)?.mu())
    }

    /// `diag(D)` for one bucket (model units), strictly positive unless a
    /// contraction override carries zeros.
    pub fn diag_d(&self, bucket: usize) -> Result<DVector<f64>> {
        Ok(self.bucket(bucket)?.diag_d())
    }

    /// Day-level covariance between two trips, in seconds squared:
    /// `scale^2 * (a L)(a' L)ᵀ` where `a`, `a'` indicate the link sets.
    pub fn trip_cov(&self, trip_a: &[LinkId], trip_b: &[LinkId], bucket: usize) -> Result<f64> {
        self.check_links(trip_a.iter().chain(trip_b.iter()))?;
        let b = self.bucket(bucket)?;
        let va = Self::sum_rows(&b.l, trip_a);
        let vb = Self::sum_rows(&b.l, trip_b);
        Ok(self.scale.var_to_seconds(va.dot(&vb)))
    }

    /// Row-sum the factors onto contraction groups; the aggregated diagonal
    /// becomes an explicit override.
    pub(crate) fn contract_rows(&self, groups: &[Vec<LinkId>]) -> Result<ModelParams> {
        let n = groups.len();
        let buckets = self
            .buckets
            .iter()
            .map(|b| {
                let d = b.diag_d();
                let mut l = DMatrix::zeros(n, self.r_l);
                let mut h = DMatrix::zeros(n, self.r_h);
                let mut dc = DVector::zeros(n);
                for (g, members) in groups.iter().enumerate() {
                    for &m in members {
                        let mi = m as usize;
                        for c in 0..self.r_l {
                            l[(g, c)] += b.l[(mi, c)];
                        }
                        for c in 0..self.r_h {
                            h[(g, c)] += b.h[(mi, c)];
                        }
                        dc[g] += d[mi];
                    }
                }
                BucketParams {
                    l,
                    h,
                    w_mu: b.w_mu.clone(),
                    w_d: b.w_d.clone(),
                    diag_override: Some(dc),
                }
            })
            .collect();
        ModelParams::new(n, self.r_l, self.r_h, self.scale, buckets)
    }
}
