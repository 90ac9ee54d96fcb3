//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trialsim::estimators::{Structure, VarianceParams};

pub fn rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.iter().chain(b.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    (a - b).amax() / scale
}

pub struct Longitudinal {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub ids: Vec<usize>,
    pub times: Vec<f64>,
}

/// Random intercept plus exponential serial noise; rows grouped by person.
pub fn longitudinal(seed: u64, persons: usize, max_scores: usize) -> Longitudinal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ids, mut times, mut y) = (Vec::new(), Vec::new(), Vec::new());
    let mut arm = Vec::new();
    for i in 0..persons {
        let k = rng.random_range(1..=max_scores);
        let b = 1.5 * normal(&mut rng);
        let mut t = 3.0 + rng.random::<f64>();
        let mut e = normal(&mut rng);
        for _ in 0..k {
            ids.push(i);
            times.push(t);
            arm.push((i % 2) as f64);
            y.push(1.0 + 0.3 * t - 0.8 * (i % 2) as f64 + b + e);
            let gap = 0.1 + 2.0 * rng.random::<f64>();
            let a = (-gap / 2.0f64).exp();
            e = a * e + (1.0 - a * a).sqrt() * normal(&mut rng);
            t += gap;
        }
    }
    let n = ids.len();
    let x = DMatrix::from_fn(n, 3, |i, j| [1.0, times[i], arm[i]][j]);
    Longitudinal { x, y: DVector::from_vec(y), ids, times }
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller keeps the oracle data independent of the library samplers
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Dense REML criterion on the full block-diagonal covariance:
/// `ln det V + ln det X'V^-1X + y'Py`.
pub fn dense_reml(p: &VarianceParams, d: &Longitudinal, structure: Structure) -> f64 {
    let n = d.ids.len();
    let v = DMatrix::from_fn(n, n, |i, j| {
        if d.ids[i] != d.ids[j] {
            return 0.0;
        }
        let dt = (d.times[i] - d.times[j]).abs();
        let corr = match structure {
            Structure::Exchangeable => f64::from(u8::from(i == j)),
            Structure::Car1 => p.corr_param.unwrap().powf(dt),
            Structure::Exponential => (-dt / p.corr_param.unwrap()).exp(),
        };
        p.sigma_b2 + p.sigma2 * corr
    });
    let v_inv = v.clone().try_inverse().unwrap();
    let a = d.x.transpose() * &v_inv * &d.x;
    let a_inv = a.clone().try_inverse().unwrap();
    let proj = &v_inv - &v_inv * &d.x * a_inv * d.x.transpose() * &v_inv;
    v.determinant().ln() + a.determinant().ln() + (d.y.transpose() * proj * &d.y)[(0, 0)]
}

pub fn params(structure: Structure, sigma_b2: f64, sigma2: f64, corr: f64) -> VarianceParams {
    VarianceParams {
        sigma_b2,
        sigma2,
        corr_param: (structure != Structure::Exchangeable).then_some(corr),
    }
}

/// Weighted least squares and the CR0 sandwich by explicit loops.
pub fn explicit_sandwich(x: &DMatrix<f64>, y: &DVector<f64>, clusters: &[usize], w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = x.shape();
    let mut ids: Vec<usize> = clusters.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut bread: DMatrix<f64> = DMatrix::zeros(p, p);
    for i in 0..n {
        for a in 0..p {
            for b in 0..p {
                bread[(a, b)] += w[i] * x[(i, a)] * x[(i, b)];
            }
        }
    }
    let bread_inv = bread.try_inverse().unwrap();
    let mut xwy: DVector<f64> = DVector::zeros(p);
    for i in 0..n {
        for a in 0..p {
            xwy[a] += w[i] * x[(i, a)] * y[i];
        }
    }
    let beta_ref: DVector<f64> = &bread_inv * xwy;
    let mut meat = DMatrix::zeros(p, p);
    for &c in &ids {
        let mut s: DVector<f64> = DVector::zeros(p);
        for i in (0..n).filter(|&i| clusters[i] == c) {
            let r = y[i] - (0..p).map(|a| x[(i, a)] * beta_ref[a]).sum::<f64>();
            for a in 0..p {
                s[a] += w[i] * x[(i, a)] * r;
            }
        }
        meat += &s * s.transpose();
    }
    let cov_ref = &bread_inv * meat * &bread_inv;
    (beta_ref, cov_ref)
}
