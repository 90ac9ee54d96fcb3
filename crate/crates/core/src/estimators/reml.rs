//! REML for `V_i = sigma_b2 J + sigma2 R_i`, with `R_i` the identity
//! (exchangeable) or `exp(-|t_j - t_k| / range)` (CAR(1) with
//! `rho = exp(-1 / range)`).
//!
//! The fitting path profiles `sigma2` out: with `H_i = gamma J + R_i` and
//! `gamma = sigma_b2 / sigma2`, the criterion at `sigma2 = Q / (N - p)` is
//! `(N - p) ln(Q / (N - p)) + sum ln det H_i + ln det X'H^-1 X + (N - p)`.
//! Serial correlation is removed by the bidiagonal whitening of the
//! Ornstein–Uhlenbeck process and the random intercept by Sherman–Morrison.
//! Products of successive rows are pre-summed by time gap, so an evaluation
//! costs one update per distinct gap plus one pass over the rows.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::{marginal_covariance, CovarianceSpec};
use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMeadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Structure {
    Exchangeable,
    Car1,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma_b2: f64,
    pub sigma2: f64,
    /// `rho` for CAR(1), `range` for exponential, absent for exchangeable.
    pub corr_param: Option<f64>,
}

impl VarianceParams {
    fn covariance_spec(&self, structure: Structure) -> Option<CovarianceSpec> {
        let (sigma_b2, sigma2) = (self.sigma_b2, self.sigma2);
        if !(sigma_b2 >= 0.0 && sigma2 > 0.0 && sigma_b2.is_finite() && sigma2.is_finite()) {
            return None;
        }
        match (structure, self.corr_param) {
            (Structure::Exchangeable, _) => Some(CovarianceSpec::Exchangeable { sigma_b2, sigma2 }),
            (Structure::Car1, Some(rho)) if rho > 0.0 && rho < 1.0 => {
                Some(CovarianceSpec::Car1 { sigma_b2, sigma2, rho })
            }
            (Structure::Exponential, Some(range)) if range > 0.0 && range.is_finite() => {
                Some(CovarianceSpec::Exponential { sigma_b2, sigma2, range })
            }
            _ => None,
        }
    }

    /// Decay rate `lambda` with `corr = exp(-lambda d)`.
    fn decay(&self, structure: Structure) -> f64 {
        match (structure, self.corr_param) {
            (Structure::Car1, Some(rho)) => -rho.ln(),
            (Structure::Exponential, Some(range)) => 1.0 / range,
            _ => 0.0,
        }
    }
}

fn person_ranges(person_ids: &[usize]) -> Result<Vec<Range<usize>>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    for i in 1..=person_ids.len() {
        if i == person_ids.len() || person_ids[i] != person_ids[start] {
            out.push(start..i);
            start = i;
        }
    }
    let mut ids: Vec<usize> = out.iter().map(|r| person_ids[r.start]).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidArgument("rows of each person must be contiguous".into()));
    }
    Ok(out)
}

fn check_shapes(x: &DMatrix<f64>, y: &DVector<f64>, person_ids: &[usize], times: &[f64]) -> Result<()> {
    let n = x.nrows();
    if y.len() != n || person_ids.len() != n || times.len() != n {
        return Err(Error::InvalidArgument("design, response, ids and times differ in length".into()));
    }
    if n <= x.ncols() {
        return Err(Error::InvalidArgument("REML needs more rows than columns".into()));
    }
    Ok(())
}

/// `-2` times the restricted log-likelihood (without the `2 pi` constant),
/// evaluated with dense per-person covariance matrices. Rows must be grouped
/// by person. Parameters outside their domain or a covariance that is not
/// positive definite give `+inf`.
pub fn reml_objective(
    params: &VarianceParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    person_ids: &[usize],
    times: &[f64],
    structure: Structure,
) -> Result<f64> {
    check_shapes(x, y, person_ids, times)?;
    let ranges = person_ranges(person_ids)?;
    let Some(spec) = params.covariance_spec(structure) else {
        return Ok(f64::INFINITY);
    };
    let p = x.ncols();
    let mut logdet_v = 0.0;
    let mut xtvx = DMatrix::zeros(p, p);
    let mut xtvy = DVector::zeros(p);
    let mut cached = Vec::with_capacity(ranges.len());
    for r in &ranges {
        let v = marginal_covariance(&spec, &times[r.clone()]);
        let Some(chol) = v.cholesky() else {
            return Ok(f64::INFINITY);
        };
        logdet_v += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let xi = x.rows(r.start, r.len()).into_owned();
        let yi = y.rows(r.start, r.len()).into_owned();
        let vx = chol.solve(&xi);
        let vy = chol.solve(&yi);
        xtvx += xi.tr_mul(&vx);
        xtvy += xi.tr_mul(&vy);
        cached.push((xi, yi, vx, vy));
    }
    let Some(chol_a) = xtvx.cholesky() else {
        return Ok(f64::INFINITY);
    };
    let logdet_a = 2.0 * chol_a.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let beta = chol_a.solve(&xtvy);
    let mut quad = 0.0;
    for (xi, yi, vx, vy) in &cached {
        let r = yi - xi * &beta;
        let vr = vy - vx * &beta;
        quad += r.dot(&vr);
    }
    Ok(logdet_v + logdet_a + quad)
}

/// Data and per-structure summaries for fast evaluation. Symmetric `m x m`
/// matrices (`m = p + 1`, the columns of `[X y]`) are stored as packed upper
/// triangles, row by row.
struct Problem {
    n: usize,
    p: usize,
    /// `[X y]`, row-major with stride `m`.
    z: Vec<f64>,
    ranges: Vec<Range<usize>>,
    kind: Summary,
}

enum Summary {
    /// `Z'Z`, and per cluster size the count and sum of `s s'` over person
    /// column sums `s`.
    Exchangeable {
        total: Vec<f64>,
        by_size: Vec<(usize, usize, Vec<f64>)>,
    },
    /// Sum of `z z'` over first rows, plus successive-row pairs grouped by
    /// time gap. Each row after a person's first points at its gap group.
    Serial {
        first: Vec<f64>,
        groups: Vec<GapGroup>,
        row_group: Vec<usize>,
    },
}

/// Pairs `(z_prev, z_cur)` sharing one time gap:
/// `cur = sum z_cur z_cur'`, `cross = sum (z_cur z_prev' + z_prev z_cur')`,
/// `prev = sum z_prev z_prev'`.
struct GapGroup {
    gap: f64,
    count: usize,
    cur: Vec<f64>,
    cross: Vec<f64>,
    prev: Vec<f64>,
}

/// Per-group whitening coefficients at one decay rate.
#[derive(Clone, Copy, Default)]
struct GapCoef {
    a: f64,
    /// `1 / (1 + a)`, the weight of `z_cur - a z_prev` in `R^-1 1`.
    f: f64,
    /// `(1 - a) / (1 + a)`, the contribution to `1' R^-1 1`.
    uu: f64,
}

/// Scratch space reused across evaluations.
#[derive(Default)]
struct Workspace {
    gram: Vec<f64>,
    coef: Vec<GapCoef>,
    g: Vec<f64>,
}

fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

fn tri_index(m: usize, i: usize, j: usize) -> usize {
    let (i, j) = (i.min(j), i.max(j));
    // row i starts after sum_{k < i} (m - k) entries
    i * m - i * (i.max(1) - 1) / 2 + (j - i)
}

/// `acc += scale * v v'` on the packed upper triangle.
fn add_outer(acc: &mut [f64], m: usize, v: &[f64], scale: f64) {
    let mut rest = acc;
    for i in 0..m {
        let (row, tail) = rest.split_at_mut(m - i);
        let s = v[i] * scale;
        for (a, &vj) in row.iter_mut().zip(&v[i..]) {
            *a += s * vj;
        }
        rest = tail;
    }
}

/// `acc += v w' + w v'` on the packed upper triangle.
fn add_cross(acc: &mut [f64], m: usize, v: &[f64], w: &[f64]) {
    let mut rest = acc;
    for i in 0..m {
        let (row, tail) = rest.split_at_mut(m - i);
        let (vi, wi) = (v[i], w[i]);
        for ((a, &vj), &wj) in row.iter_mut().zip(&v[i..]).zip(&w[i..]) {
            *a += vi * wj + wi * vj;
        }
        rest = tail;
    }
}

fn axpy(acc: &mut [f64], scale: f64, v: &[f64]) {
    for (a, &x) in acc.iter_mut().zip(v) {
        *a += scale * x;
    }
}

/// Components of the profiled criterion at one parameter value.
struct Profiled {
    objective: f64,
    beta: DVector<f64>,
    a_inv: DMatrix<f64>,
    sigma2: f64,
}

/// Gaps equal to within this relative resolution share a group.
const GAP_RESOLUTION: f64 = 1e-12;

impl Problem {
    fn new(
        x: &DMatrix<f64>,
        y: &DVector<f64>,
        person_ids: &[usize],
        times: &[f64],
        structure: Structure,
    ) -> Result<Self> {
        check_shapes(x, y, person_ids, times)?;
        let ranges = person_ranges(person_ids)?;
        let (n, p) = x.shape();
        let m = p + 1;
        let mut z = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..p {
                z[i * m + j] = x[(i, j)];
            }
            z[i * m + p] = y[i];
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("REML design or response".into()));
        }
        let row = |i: usize| &z[i * m..(i + 1) * m];
        let kind = if structure == Structure::Exchangeable {
            let mut total = vec![0.0; tri_len(m)];
            for i in 0..n {
                add_outer(&mut total, m, row(i), 1.0);
            }
            let mut by_size: Vec<(usize, usize, Vec<f64>)> = Vec::new();
            let mut s = vec![0.0; m];
            for r in &ranges {
                s.fill(0.0);
                for i in r.clone() {
                    axpy(&mut s, 1.0, row(i));
                }
                let slot = match by_size.iter().position(|e| e.0 == r.len()) {
                    Some(k) => k,
                    None => {
                        by_size.push((r.len(), 0, vec![0.0; tri_len(m)]));
                        by_size.len() - 1
                    }
                };
                by_size[slot].1 += 1;
                add_outer(&mut by_size[slot].2, m, &s, 1.0);
            }
            by_size.sort_by_key(|e| e.0);
            Summary::Exchangeable { total, by_size }
        } else {
            let mut first = vec![0.0; tri_len(m)];
            let mut groups: Vec<GapGroup> = Vec::new();
            let mut index: std::collections::HashMap<i64, usize> = std::collections::HashMap::new();
            let mut row_group = vec![usize::MAX; n];
            for r in &ranges {
                add_outer(&mut first, m, row(r.start), 1.0);
                for i in r.start + 1..r.end {
                    let d = times[i] - times[i - 1];
                    if !(d > 0.0) || !d.is_finite() {
                        return Err(Error::InvalidArgument(format!(
                            "times of person {} must be finite and strictly increasing",
                            person_ids[i]
                        )));
                    }
                    let key = (d.ln() / GAP_RESOLUTION).round() as i64;
                    let k = *index.entry(key).or_insert_with(|| {
                        groups.push(GapGroup {
                            gap: d,
                            count: 0,
                            cur: vec![0.0; tri_len(m)],
                            cross: vec![0.0; tri_len(m)],
                            prev: vec![0.0; tri_len(m)],
                        });
                        groups.len() - 1
                    });
                    let grp = &mut groups[k];
                    grp.count += 1;
                    add_outer(&mut grp.cur, m, row(i), 1.0);
                    add_cross(&mut grp.cross, m, row(i), row(i - 1));
                    add_outer(&mut grp.prev, m, row(i - 1), 1.0);
                    row_group[i] = k;
                }
            }
            Summary::Serial { first, groups, row_group }
        };
        Ok(Problem { n, p, z, ranges, kind })
    }

    /// Fills `ws.gram` with `[X y]' H^-1 [X y]` and returns `sum ln det H_i`.
    fn gram(&self, gamma: f64, decay: f64, ws: &mut Workspace) -> Option<f64> {
        let m = self.p + 1;
        ws.gram.clear();
        match &self.kind {
            Summary::Exchangeable { total, by_size } => {
                ws.gram.extend_from_slice(total);
                let mut logdet = 0.0;
                for (size, count, outer) in by_size {
                    let nf = *size as f64;
                    axpy(&mut ws.gram, -gamma / (1.0 + gamma * nf), outer);
                    logdet += *count as f64 * (gamma * nf).ln_1p();
                }
                Some(logdet)
            }
            Summary::Serial { first, groups, row_group } => {
                // Whitened rows are (z_cur - a z_prev) / sqrt(1 - a^2).
                ws.gram.extend_from_slice(first);
                ws.coef.clear();
                let mut logdet = 0.0;
                for grp in groups {
                    let em1 = (-decay * grp.gap).exp_m1();
                    let a = 1.0 + em1;
                    // 1 - a^2 = (1 - a)(1 + a) without cancellation
                    let one_minus = -em1 * (1.0 + a);
                    if !(one_minus > 0.0) {
                        return None;
                    }
                    logdet += grp.count as f64 * one_minus.ln();
                    let inv = 1.0 / one_minus;
                    axpy(&mut ws.gram, inv, &grp.cur);
                    axpy(&mut ws.gram, -a * inv, &grp.cross);
                    axpy(&mut ws.gram, a * a * inv, &grp.prev);
                    ws.coef.push(GapCoef {
                        a,
                        f: 1.0 / (1.0 + a),
                        uu: -em1 / (1.0 + a),
                    });
                }
                // Sherman–Morrison per person with g = [X y]' R^-1 1.
                ws.g.resize(m, 0.0);
                for r in &self.ranges {
                    ws.g.copy_from_slice(&self.z[r.start * m..(r.start + 1) * m]);
                    let mut uu = 1.0;
                    for i in r.start + 1..r.end {
                        let c = ws.coef[row_group[i]];
                        let cur = &self.z[i * m..(i + 1) * m];
                        let prev = &self.z[(i - 1) * m..i * m];
                        for ((gk, &zc), &zp) in ws.g.iter_mut().zip(cur).zip(prev) {
                            *gk += (zc - c.a * zp) * c.f;
                        }
                        uu += c.uu;
                    }
                    let c = gamma / (1.0 + gamma * uu);
                    let g = std::mem::take(&mut ws.g);
                    add_outer(&mut ws.gram, m, &g, -c);
                    ws.g = g;
                    logdet += (gamma * uu).ln_1p();
                }
                Some(logdet)
            }
        }
    }

    fn profiled(&self, gamma: f64, decay: f64, ws: &mut Workspace, need_inverse: bool) -> Option<Profiled> {
        if !(gamma >= 0.0) || !gamma.is_finite() || !(decay >= 0.0) || !decay.is_finite() {
            return None;
        }
        let logdet_h = self.gram(gamma, decay, ws)?;
        let p = self.p;
        let m = p + 1;
        let a = DMatrix::from_fn(p, p, |i, j| ws.gram[tri_index(m, i, j)]);
        let b = DVector::from_fn(p, |i, _| ws.gram[tri_index(m, i, p)]);
        let c = ws.gram[tri_index(m, p, p)];
        let chol = a.cholesky()?;
        let logdet_a = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let beta = chol.solve(&b);
        let q = c - b.dot(&beta);
        let dof = (self.n - p) as f64;
        if !(q > 0.0) {
            return None;
        }
        let sigma2 = q / dof;
        let objective = dof * sigma2.ln() + logdet_h + logdet_a + dof;
        let a_inv = if need_inverse { chol.inverse() } else { DMatrix::zeros(0, 0) };
        objective.is_finite().then_some(Profiled { objective, beta, a_inv, sigma2 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub coefficients: DVector<f64>,
    /// Model-based `(X' V^-1 X)^-1` at the fitted parameters.
    pub cov: DMatrix<f64>,
    pub params: VarianceParams,
    /// `reml_objective` at the fitted parameters.
    pub objective: f64,
    pub converged: bool,
}

const THETA_BOUND: f64 = 30.0;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Maps the unconstrained optimizer vector to `(gamma, decay)`.
fn unpack(theta: &[f64], structure: Structure) -> Option<(f64, f64)> {
    if theta.iter().any(|v| !v.is_finite() || v.abs() > THETA_BOUND) {
        return None;
    }
    let gamma = theta[0].exp();
    let decay = match structure {
        Structure::Exchangeable => 0.0,
        // rho = logistic(theta), decay = -ln rho = softplus(-theta)
        Structure::Car1 => softplus(-theta[1]),
        Structure::Exponential => (-theta[1]).exp(),
    };
    Some((gamma, decay))
}

fn starts(structure: Structure) -> Vec<Vec<f64>> {
    let gammas = [0.5f64, 0.05, 5.0];
    let ranges = [2.0f64, 8.0, 0.5];
    gammas
        .iter()
        .zip(ranges)
        .map(|(&g, range)| match structure {
            Structure::Exchangeable => vec![g.ln()],
            Structure::Exponential => vec![g.ln(), range.ln()],
            Structure::Car1 => {
                let rho = (-1.0 / range).exp();
                vec![g.ln(), (rho / (1.0 - rho)).ln()]
            }
        })
        .collect()
}

fn params_from(gamma: f64, decay: f64, sigma2: f64, structure: Structure) -> VarianceParams {
    VarianceParams {
        sigma_b2: gamma * sigma2,
        sigma2,
        corr_param: match structure {
            Structure::Exchangeable => None,
            Structure::Car1 => Some((-decay).exp()),
            Structure::Exponential => Some(1.0 / decay),
        },
    }
}

/// REML fit by Nelder–Mead on the profiled criterion from three dispersed
/// starts; rows must be grouped by person with increasing times.
pub fn fit_lmm_reml(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    person_ids: &[usize],
    times: &[f64],
    structure: Structure,
) -> Result<LmmFit> {
    let problem = Problem::new(x, y, person_ids, times, structure)?;
    let mut ws = Workspace::default();
    let opts = NelderMeadOptions::default();
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    for start in starts(structure) {
        let run = nelder_mead(
            |theta| {
                unpack(theta, structure)
                    .and_then(|(g, d)| problem.profiled(g, d, &mut ws, false))
                    .map_or(f64::INFINITY, |p| p.objective)
            },
            &start,
            &opts,
        );
        if run.f.is_finite() && best.as_ref().map_or(true, |b| run.f < b.1) {
            best = Some((run.x, run.f, run.converged));
        }
    }
    let (theta, _, converged) = best.ok_or_else(|| {
        Error::Singular("REML criterion is not finite at any start".into())
    })?;
    let (gamma, decay) = unpack(&theta, structure)
        .ok_or_else(|| Error::Singular("REML optimum left the parameter domain".into()))?;
    let fit = problem
        .profiled(gamma, decay, &mut ws, true)
        .ok_or_else(|| Error::Singular("REML criterion not finite at optimum".into()))?;
    Ok(LmmFit {
        coefficients: fit.beta,
        cov: fit.a_inv * fit.sigma2,
        params: params_from(gamma, decay, fit.sigma2, structure),
        objective: fit.objective,
        converged,
    })
}

/// Generalized least squares at fixed variance parameters.
pub fn fit_lmm_at(
    params: &VarianceParams,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    person_ids: &[usize],
    times: &[f64],
    structure: Structure,
) -> Result<LmmFit> {
    if params.covariance_spec(structure).is_none() {
        return Err(Error::InvalidArgument(format!("variance parameters {params:?} out of domain")));
    }
    let problem = Problem::new(x, y, person_ids, times, structure)?;
    let gamma = params.sigma_b2 / params.sigma2;
    let decay = params.decay(structure);
    let mut ws = Workspace::default();
    let fit = problem
        .profiled(gamma, decay, &mut ws, true)
        .ok_or_else(|| Error::Singular("GLS system is singular".into()))?;
    let objective = reml_objective(params, x, y, person_ids, times, structure)?;
    Ok(LmmFit {
        coefficients: fit.beta,
        cov: fit.a_inv * params.sigma2,
        params: *params,
        objective,
        converged: true,
    })
}
