//! Embedding export: per-link `L` / `H` rows plus a 2-D principal-direction
//! projection of the concatenated representation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Column header followed by one row per link with `r_L + r_H + 2` values:
/// the `L` row, the `H` row, and the projection onto the top two principal
/// directions of the centered `[L H]` matrix.
pub fn embedding_table(params: &ModelParams, bucket: usize) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bp = params.bucket(bucket)?;
    let n = params.link_count();
    let d = params.r_l() + params.r_h();
    let mut x = DMatrix::zeros(n, d);
    x.view_mut((0, 0), (n, params.r_l())).copy_from(&bp.l);
    x.view_mut((0, params.r_l()), (n, params.r_h())).copy_from(&bp.h);

    // Center columns and project onto the top-2 right singular directions.
    let mut centered = x.clone();
    for c in 0..d {
        let mean = centered.column(c).mean();
        for r in 0..n {
            centered[(r, c)] -= mean;
        }
    }
    let svd = centered.clone().svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::numerical("SVD failed to produce singular vectors"))?;
    let dirs = v_t.rows(0, 2.min(v_t.nrows()));
    let proj = &centered * dirs.transpose();

    let mut header = Vec::with_capacity(d + 2);
    for j in 0..params.r_l() {
        header.push(format!("l_{j}"));
    }
    for j in 0..params.r_h() {
        header.push(format!("h_{j}"));
    }
    header.push("pc1".into());
    header.push("pc2".into());

    let rows = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = x.row(i).iter().copied().collect();
            row.push(proj[(i, 0)]);
            row.push(if proj.ncols() > 1 { proj[(i, 1)] } else { 0.0 });
            row
        })
        .collect();
    Ok((header, rows))
}
