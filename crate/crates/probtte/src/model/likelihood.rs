//! Batch joint Gaussian and its negative log-likelihood.
//!
//! The covariance of an augmented batch is `V Vᵀ + Lambda` where `V = A L`
//! is the stacked trip representation and `Lambda` is block diagonal with one
//! `(k+1) x (k+1)` block per trip. The fast path inverts only the blocks and
//! an `r_L x r_L` core matrix (Woodbury identity / determinant lemma); the
//! `m x m` covariance is never materialized. [`nll_dense`] materializes it
//! and serves as the reference path for tests.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{ModelParams, LAMBDA_FLOOR};

/// Row-count guard for the dense reference path.
pub const DENSE_ROW_GUARD: usize = 2048;

/// The batch joint distribution in factored form (model units).
#[derive(Debug, Clone)]
pub struct BatchGaussian {
    /// Mean per row (`A mu`).
    pub mean: DVector<f64>,
    /// Low-rank factor (`A L`), `m x r_L`.
    pub v: DMatrix<f64>,
    /// One symmetric PD block per trip group.
    pub lambda_blocks: Vec<DMatrix<f64>>,
}

/// Everything the likelihood and gradient paths need from a batch.
pub(crate) struct Assembled {
    pub mean: DVector<f64>,
    pub v: DMatrix<f64>,
    /// `A H`, `m x r_H`.
    pub g: DMatrix<f64>,
    pub lambda_blocks: Vec<DMatrix<f64>>,
    pub chol: Vec<Cholesky<f64, Dyn>>,
    /// Standardized residual `y - mean`.
    pub resid: DVector<f64>,
}

impl Assembled {
    pub fn row_count(&self) -> usize {
        self.mean.len()
    }
}

/// Build mean, factors and Lambda blocks for `batch` under `params`.
///
/// Within a block the rows are nested ascending prefixes, so the pairwise
/// intersection of row link sets is the shorter prefix; the `D` part of a
/// block entry `(a, b)` is the cumulative `D` sum of row `min(a, b)`.
pub(crate) fn assemble(batch: &Batch, params: &ModelParams) -> Result<Assembled> {
    let bp = params.bucket(batch.bucket)?;
    let m = batch.row_count();
    if m == 0 {
        return Err(Error::validation("batch has no rows"));
    }
    for row in &batch.rows {
        params.check_links(row.iter())?;
    }

    let mu = bp.mu();
    let d = bp.diag_d();
    let r_l = params.r_l();
    let r_h = params.r_h();

    let mut mean = DVector::zeros(m);
    let mut v = DMatrix::zeros(m, r_l);
    let mut g = DMatrix::zeros(m, r_h);
    let mut dsum = vec![0.0; m];

    for block in &batch.blocks {
        // Rows are nested prefixes: accumulate incrementally over the block.
        let mut acc_mean = 0.0;
        let mut acc_v = DVector::zeros(r_l);
        let mut acc_g = DVector::zeros(r_h);
        let mut acc_d = 0.0;
        let mut prev_len = 0usize;
        for i in block.clone() {
            let row = &batch.rows[i];
            if i > block.start {
                let prev = &batch.rows[i - 1];
                debug_assert!(row.len() >= prev.len(), "block rows must be ascending");
                debug_assert_eq!(&row[..prev.len()], &prev[..], "block rows must be nested");
            }
            for &l in &row[prev_len..] {
                let li = l as usize;
                acc_mean += mu[li];
                acc_v += bp.l.row(li).transpose();
                acc_g += bp.h.row(li).transpose();
                acc_d += d[li];
            }
            prev_len = row.len();
            mean[i] = acc_mean;
            v.row_mut(i).copy_from(&acc_v.transpose());
            g.row_mut(i).copy_from(&acc_g.transpose());
            dsum[i] = acc_d;
        }
    }

    let mut lambda_blocks = Vec::with_capacity(batch.blocks.len());
    let mut chol = Vec::with_capacity(batch.blocks.len());
    for block in &batch.blocks {
        let n = block.len();
        let mut lam = DMatrix::zeros(n, n);
        for a in 0..n {
            let ga = g.row(block.start + a);
            for b in a..n {
                let gb = g.row(block.start + b);
                // Nested prefixes: the shared links are exactly row min(a, b).
                let val = ga.dot(&gb) + dsum[block.start + a.min(b)];
                lam[(a, b)] = val;
                lam[(b, a)] = val;
            }
            lam[(a, a)] += LAMBDA_FLOOR;
        }
        let factor = Cholesky::new(lam.clone()).ok_or_else(|| {
            Error::numerical(format!(
                "Lambda block for trip group starting at row {} is not positive definite \
                 (duplicate sub-trips?)",
                block.start
            ))
        })?;
        lambda_blocks.push(lam);
        chol.push(factor);
    }

    let scale = params.scale();
    let resid = DVector::from_fn(m, |i, _| scale.standardize(batch.targets[i]) - mean[i]);

    Ok(Assembled { mean, v, g, lambda_blocks, chol, resid })
}

/// The batch joint Gaussian in factored form.
pub fn batch_gaussian(batch: &Batch, params: &ModelParams) -> Result<BatchGaussian> {
    let a = assemble(batch, params)?;
    Ok(BatchGaussian { mean: a.mean, v: a.v, lambda_blocks: a.lambda_blocks })
}

fn ln_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Woodbury solve state shared by the likelihood and gradient paths.
pub(crate) struct Solves {
    /// `Lambda^-1 V`.
    pub w: DMatrix<f64>,
    /// `Lambda^-1 resid`.
    pub u: DVector<f64>,
    /// `I + Vᵀ Lambda^-1 V` and its Cholesky factor.
    pub core_chol: Cholesky<f64, Dyn>,
    /// `Vᵀ u`.
    pub vt_u: DVector<f64>,
    /// `core^-1 Vᵀ u`.
    pub core_solve_vt_u: DVector<f64>,
    pub ln_det_lambda: f64,
}

pub(crate) fn solve_woodbury(batch: &Batch, a: &Assembled, r_l: usize) -> Result<Solves> {
    let m = a.row_count();
    let mut w = DMatrix::zeros(m, r_l);
    let mut u = DVector::zeros(m);
    let mut core = DMatrix::identity(r_l, r_l);
    let mut ln_det_lambda = 0.0;
    for (q, block) in batch.blocks.iter().enumerate() {
        let chol = &a.chol[q];
        let vq = a.v.rows(block.start, block.len());
        let rq = a.resid.rows(block.start, block.len());
        let wq = chol.solve(&vq.clone_owned());
        let uq = chol.solve(&rq.clone_owned());
        core += vq.transpose() * &wq;
        w.rows_mut(block.start, block.len()).copy_from(&wq);
        u.rows_mut(block.start, block.len()).copy_from(&uq);
        ln_det_lambda += ln_det_from_cholesky(chol);
    }
    let core_chol = Cholesky::new(core).ok_or_else(|| {
        Error::numerical("Woodbury core matrix I + Vᵀ Lambda^-1 V is not positive definite")
    })?;
    let vt_u = a.v.transpose() * &u;
    let core_solve_vt_u = core_chol.solve(&vt_u);
    Ok(Solves { w, u, core_chol, vt_u, core_solve_vt_u, ln_det_lambda })
}

const LN_2PI: f64 = 1.8378770664093453;

/// Negative log-likelihood of the batch's raw-seconds targets, computed via
/// the Woodbury fast path. Cost is `O(sum block^3 + m r_L + r_L^3)`.
pub fn nll(batch: &Batch, params: &ModelParams) -> Result<f64> {
    let a = assemble(batch, params)?;
    let s = solve_woodbury(batch, &a, params.r_l())?;
    let m = a.row_count() as f64;
    let ln_det = s.ln_det_lambda + ln_det_from_cholesky(&s.core_chol);
    let quad = a.resid.dot(&s.u) - s.vt_u.dot(&s.core_solve_vt_u);
    let value =
        0.5 * (m * LN_2PI + ln_det + quad) + m * params.scale().scale.ln();
    if !value.is_finite() {
        return Err(Error::numerical(format!("non-finite NLL ({value})")));
    }
    Ok(value)
}

/// Reference negative log-likelihood through the materialized `m x m`
/// covariance. Guarded to small batches; used as the oracle for [`nll`].
pub fn nll_dense(batch: &Batch, params: &ModelParams) -> Result<f64> {
    let a = assemble(batch, params)?;
    let m = a.row_count();
    if m > DENSE_ROW_GUARD {
        return Err(Error::validation(format!(
            "dense path refuses m={m} > {DENSE_ROW_GUARD} rows"
        )));
    }
    let mut sigma = &a.v * a.v.transpose();
    for (q, block) in batch.blocks.iter().enumerate() {
        let lam = &a.lambda_blocks[q];
        for i in 0..block.len() {
            for j in 0..block.len() {
                sigma[(block.start + i, block.start + j)] += lam[(i, j)];
            }
        }
    }
    let chol = Cholesky::new(sigma)
        .ok_or_else(|| Error::numerical("dense covariance is not positive definite"))?;
    let ln_det = ln_det_from_cholesky(&chol);
    let quad = a.resid.dot(&chol.solve(&a.resid));
    let value = 0.5 * (m as f64 * LN_2PI + ln_det + quad)
        + m as f64 * params.scale().scale.ln();
    if !value.is_finite() {
        return Err(Error::numerical(format!("non-finite dense NLL ({value})")));
    }
    Ok(value)
}
