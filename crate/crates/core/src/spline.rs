//! Natural cubic spline bases with knots at sample quantiles.
//!
//! The basis uses the truncated-power construction on a rescaled axis
//! `x = (t - lo) / (hi - lo)`: `N_1(x) = x` and, for the first `K - 2` knots,
//! `N_{k+2}(x) = d_k(x) - d_{K-2}(x)` with
//! `d_k(x) = ((x - ξ_k)_+^3 - (x - ξ_{K-1})_+^3) / (ξ_{K-1} - ξ_k)`.
//! Together with a constant this spans every natural cubic spline on the
//! `K = df + 1` knots, and every basis function is linear outside the
//! boundary knots.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    df: usize,
    boundary: (f64, f64),
    interior: Vec<f64>,
}

/// Sample quantile by linear interpolation between order statistics.
/// `sorted` must be nonempty and ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl SplineBasis {
    pub fn build(times: &[f64], df: usize) -> Result<Self> {
        if df < 2 {
            return Err(Error::InvalidArgument(format!("spline df must be >= 2, got {df}")));
        }
        if times.is_empty() {
            return Err(Error::DegenerateKnots("no time values".into()));
        }
        if let Some(bad) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::NonFinite(format!("spline time value {bad}")));
        }
        let mut sorted = times.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut distinct = 1;
        for w in sorted.windows(2) {
            if w[1] > w[0] {
                distinct += 1;
            }
        }
        if distinct < df + 1 {
            return Err(Error::DegenerateKnots(format!(
                "{distinct} distinct time values, need at least {}",
                df + 1
            )));
        }
        let boundary = (sorted[0], sorted[sorted.len() - 1]);
        let interior: Vec<f64> = (1..df)
            .map(|k| quantile_sorted(&sorted, k as f64 / df as f64))
            .collect();
        let mut knots = Vec::with_capacity(df + 1);
        knots.push(boundary.0);
        knots.extend_from_slice(&interior);
        knots.push(boundary.1);
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::DegenerateKnots(format!(
                "quantile knots are not strictly increasing: {knots:?}"
            )));
        }
        Ok(SplineBasis { df, boundary, interior })
    }

    pub fn df(&self) -> usize {
        self.df
    }

    pub fn boundary_knots(&self) -> (f64, f64) {
        self.boundary
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.interior
    }

    fn scaled_knots(&self) -> Vec<f64> {
        let (lo, hi) = self.boundary;
        let mut k = Vec::with_capacity(self.df + 1);
        k.push(0.0);
        k.extend(self.interior.iter().map(|&v| (v - lo) / (hi - lo)));
        k.push(1.0);
        k
    }

    pub fn evaluate(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.df];
        self.evaluate_into(t, &mut out)?;
        Ok(out)
    }

    /// Writes the `df` basis values at `t` into `out`.
    pub fn evaluate_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("spline evaluation point {t}")));
        }
        debug_assert_eq!(out.len(), self.df);
        let (lo, hi) = self.boundary;
        let x = (t - lo) / (hi - lo);
        let knots = self.scaled_knots();
        let last = knots[knots.len() - 1];
        let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |k: usize| (cube(x - knots[k]) - cube(x - last)) / (last - knots[k]);
        let d_ref = d(knots.len() - 2);
        out[0] = x;
        for k in 0..self.df - 1 {
            out[k + 1] = d(k) - d_ref;
        }
        Ok(())
    }
}
