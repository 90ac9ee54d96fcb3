use nalgebra::{DMatrix, DVector};

use super::{AnalysisRow, EffectModel, ModelSpec, Selection, TimeAdjust};
use crate::error::{Error, Result};
use crate::spline::SplineBasis;

pub const SPLINE_DF: usize = 3;

/// Model matrix and its bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// Cluster id per row: the row index for single-score methods, the person
    /// id for methods using all scores.
    pub clusters: Vec<usize>,
    pub weights: DVector<f64>,
    pub columns: Vec<String>,
    pub arm_col: usize,
    pub interaction_cols: Option<Vec<usize>>,
    pub basis: Option<SplineBasis>,
}

/// Spline basis on the follow-up times of `rows`, when `spec` needs one.
pub fn spline_basis_for(rows: &[AnalysisRow], spec: &ModelSpec) -> Result<Option<SplineBasis>> {
    if !spec.uses_splines() {
        return Ok(None);
    }
    let times: Vec<f64> = rows.iter().filter_map(|r| r.t).collect();
    if times.len() != rows.len() {
        return Err(Error::InvalidArgument(format!(
            "method `{}` needs follow-up times on every row",
            spec.key
        )));
    }
    SplineBasis::build(&times, SPLINE_DF).map(Some)
}

pub fn build_design(
    rows: &[AnalysisRow],
    spec: &ModelSpec,
    basis: Option<SplineBasis>,
) -> Result<Design> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no analysis rows".into()));
    }
    if spec.uses_splines() != basis.is_some() {
        return Err(Error::InvalidArgument(format!(
            "method `{}`: basis must be present exactly when splines are requested",
            spec.key
        )));
    }
    let mut columns: Vec<String> = vec!["intercept".into(), "baseline".into(), "site".into()];
    match spec.time_adjust {
        TimeAdjust::None => {}
        TimeAdjust::Linear => columns.push("t".into()),
        TimeAdjust::Splines3DF => columns.extend((1..=SPLINE_DF).map(|k| format!("B{k}(t)"))),
    }
    let arm_col = columns.len();
    columns.push("A".into());
    let interaction_cols = match spec.effect_model {
        EffectModel::Constant => None,
        EffectModel::TimeVaryingSplines3DF => {
            let start = columns.len();
            columns.extend((1..=SPLINE_DF).map(|k| format!("A:B{k}(t)")));
            Some((start..start + SPLINE_DF).collect::<Vec<_>>())
        }
    };
    let adjust_n = matches!(spec.selection, Selection::Mean | Selection::Best)
        && spec.mean_options.adjust_for_n;
    if adjust_n {
        columns.push("n_scores".into());
    }

    let p = columns.len();
    let mut x = DMatrix::zeros(rows.len(), p);
    let mut b = vec![0.0; SPLINE_DF];
    for (i, r) in rows.iter().enumerate() {
        let a = f64::from(r.arm);
        let mut col = 0;
        let mut put = |v: f64| {
            x[(i, col)] = v;
            col += 1;
        };
        put(1.0);
        put(r.baseline);
        put(f64::from(r.site));
        if let Some(basis) = &basis {
            let t = r.t.ok_or_else(|| Error::InvalidArgument("row without time".into()))?;
            basis.evaluate_into(t, &mut b)?;
        }
        match spec.time_adjust {
            TimeAdjust::None => {}
            TimeAdjust::Linear => {
                put(r.t.ok_or_else(|| Error::InvalidArgument("row without time".into()))?)
            }
            TimeAdjust::Splines3DF => b.iter().for_each(|&v| put(v)),
        }
        put(a);
        if interaction_cols.is_some() {
            b.iter().for_each(|&v| put(a * v));
        }
        if adjust_n {
            put(r.n_i as f64);
        }
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("design entry {bad}")));
    }
    check_rank(&x, &columns)?;

    let clusters = match spec.selection {
        Selection::All => rows.iter().map(|r| r.person_id).collect(),
        _ => (0..rows.len()).collect(),
    };
    Ok(Design {
        y: DVector::from_iterator(rows.len(), rows.iter().map(|r| r.y)),
        weights: DVector::from_iterator(rows.len(), rows.iter().map(|r| r.weight)),
        x,
        clusters,
        columns,
        arm_col,
        interaction_cols,
        basis,
    })
}

/// Modified Gram–Schmidt; reports the first column whose residual after
/// projecting out the earlier columns is negligible.
fn check_rank(x: &DMatrix<f64>, columns: &[String]) -> Result<()> {
    let mut q: Vec<DVector<f64>> = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut v = col;
        for u in &q {
            let proj = u.dot(&v);
            v.axpy(-proj, u, 1.0);
        }
        let resid = v.norm();
        if norm == 0.0 || resid <= 1e-9 * norm {
            return Err(Error::RankDeficient {
                column: columns[j].clone(),
            });
        }
        q.push(v / resid);
    }
    Ok(())
}
