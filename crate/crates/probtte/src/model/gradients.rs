//! Exact batch-NLL gradients for one bucket's parameters.
//!
//! With `S = Sigma^-1` and `alpha = S r`, the matrix-normal derivative
//! `dNLL/dSigma = (S - alpha alphaᵀ) / 2` contracts against the factored
//! covariance `V Vᵀ + Lambda` without materializing anything `m x m`:
//! `S V` collapses to `W C^-1` (with `W = Lambda^-1 V`), and only the
//! block-diagonal part of `S` is ever needed for the `Lambda` path.

use nalgebra::{DMatrix, DVector};

use crate::data::Batch;
use crate::error::Result;
use crate::model::likelihood::{assemble, solve_woodbury};
use crate::model::{sigmoid, ModelParams};

/// Gradients with the same shapes as one bucket's learnable fields.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub l: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub w_mu: DVector<f64>,
    pub w_d: DVector<f64>,
}

impl Gradients {
    pub fn zeros(n_links: usize, r_l: usize, r_h: usize) -> Self {
        Self {
            l: DMatrix::zeros(n_links, r_l),
            h: DMatrix::zeros(n_links, r_h),
            w_mu: DVector::zeros(r_l),
            w_d: DVector::zeros(r_h),
        }
    }
}

/// Batch NLL (raw-seconds density, as [`super::nll`]) together with its exact
/// gradient for the batch's bucket.
pub fn nll_and_grad(batch: &Batch, params: &ModelParams) -> Result<(f64, Gradients)> {
    let bp = params.bucket(batch.bucket)?;
    let a = assemble(batch, params)?;
    let s = solve_woodbury(batch, &a, params.r_l())?;
    let m = a.row_count();

    let ln_det = s.ln_det_lambda
        + 2.0 * s.core_chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let quad = a.resid.dot(&s.u) - s.vt_u.dot(&s.core_solve_vt_u);
    let value = 0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + ln_det + quad)
        + m as f64 * params.scale().scale.ln();
    if !value.is_finite() {
        return Err(crate::error::Error::numerical(format!("non-finite NLL ({value})")));
    }

    let mut grad = Gradients::zeros(params.link_count(), params.r_l(), params.r_h());

    // alpha = Sigma^-1 r = u - W (C^-1 Vᵀ u).
    let alpha = &s.u - &s.w * &s.core_solve_vt_u;
    let core_inv = s.core_chol.inverse();

    // dNLL/dV = S V - alpha (alphaᵀ V) - alpha w_muᵀ, with S V = W C^-1.
    let vt_alpha = a.v.tr_mul(&alpha);
    let dv = &s.w * &core_inv - &alpha * (&vt_alpha + &bp.w_mu).transpose();
    for (i, row) in batch.rows.iter().enumerate() {
        for &l in row {
            let mut target = grad.l.row_mut(l as usize);
            target += dv.row(i);
        }
    }
    grad.w_mu = -vt_alpha;

    // Lambda path: per block, P = S_qq - alpha_q alpha_qᵀ (twice dNLL/dLambda_q).
    let mut d_diag: DVector<f64> = DVector::zeros(params.link_count());
    for (q, block) in batch.blocks.iter().enumerate() {
        let n = block.len();
        let wq = s.w.rows(block.start, n);
        let alpha_q = alpha.rows(block.start, n);
        let s_qq = a.chol[q].inverse() - &wq * &core_inv * wq.transpose();
        let p = s_qq - &alpha_q * alpha_q.transpose();

        // H factor part: Lambda_q = G_q G_qᵀ + D part.
        let gq = a.g.rows(block.start, n);
        let dg = &p * gq;
        for (bi, i) in block.clone().enumerate() {
            for &l in &batch.rows[i] {
                let mut target = grad.h.row_mut(l as usize);
                target += dg.row(bi);
            }
        }

        // D part: entry (a, b) accumulates the D sum of the shorter prefix,
        // so dNLL/dD_l sums g_Sigma over the trailing submatrix whose rows
        // all contain l. Suffix sums over P/2:
        let mut suffix = vec![0.0; n + 1];
        for j in (0..n).rev() {
            let mut row_tail = p[(j, j)];
            for b in j + 1..n {
                row_tail += 2.0 * p[(j, b)];
            }
            suffix[j] = suffix[j + 1] + 0.5 * row_tail;
        }
        let full_row = &batch.rows[block.end - 1];
        let mut prev_len = 0usize;
        for (j, i) in block.clone().enumerate() {
            let len = batch.rows[i].len();
            for &l in &full_row[prev_len..len] {
                d_diag[l as usize] += suffix[j];
            }
            prev_len = len;
        }
    }

    // Chain through diag(D) = softplus(H w_d) unless an override fixes D.
    if bp.diag_override.is_none() {
        for l in 0..params.link_count() {
            let dd = d_diag[l];
            if dd == 0.0 {
                continue;
            }
            let f = bp.h.row(l).transpose().dot(&bp.w_d);
            let df = dd * sigmoid(f);
            let mut target = grad.h.row_mut(l);
            target += df * bp.w_d.transpose();
            grad.w_d += df * bp.h.row(l).transpose();
        }
    }

    Ok((value, grad))
}

/// Exact gradient of [`super::nll`] for the batch's bucket.
pub fn grad_nll(batch: &Batch, params: &ModelParams) -> Result<Gradients> {
    nll_and_grad(batch, params).map(|(_, g)| g)
}
