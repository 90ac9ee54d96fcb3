use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Weighted least squares with the CR0 cluster-robust sandwich
/// `B^-1 M B^-1`, `B = X'WX`, `M = sum_c (X_c' W_c r_c)(X_c' W_c r_c)'`.
pub fn fit_ols_sandwich(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    clusters: &[usize],
    weights: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    if y.len() != n || clusters.len() != n || weights.len() != n {
        return Err(Error::InvalidArgument("design, response, clusters and weights differ in length".into()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(format!("weights must be positive, got {w}")));
    }
    let mut xw = x.clone();
    for (i, &w) in weights.iter().enumerate() {
        xw.row_mut(i).scale_mut(w);
    }
    let b = xw.tr_mul(x);
    let chol = b
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("X'WX is not positive definite".into()))?;
    let beta = chol.solve(&xw.tr_mul(y));
    let resid = y - x * &beta;

    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut scores: Vec<DVector<f64>> = Vec::new();
    for i in 0..n {
        let k = *index.entry(clusters[i]).or_insert_with(|| {
            scores.push(DVector::zeros(p));
            scores.len() - 1
        });
        scores[k].axpy(resid[i], &xw.row(i).transpose(), 1.0);
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in &scores {
        meat.ger(1.0, s, s, 1.0);
    }
    let b_inv = chol.inverse();
    let cov = &b_inv * meat * &b_inv;
    Ok((beta, (&cov + cov.transpose()) * 0.5))
}
