//! Data generation for one simulated trial: stratified 1:1 randomization,
//! arm-specific assessment schedules and correlated Gaussian outcomes from
//! `mu_ij = alpha + trend(t_ij) + beta1 * baseline_i + beta2 * site_i + effect(t_ij) * A_i`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, RngExt};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cohort::{bucket_days, day_to_month, resample_days, Cohort, N_BUCKETS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum TrendSpec {
    None,
    Linear { a: f64 },
    Quadratic { a: f64, b: f64 },
}

impl TrendSpec {
    pub const SMALL_LINEAR: TrendSpec = TrendSpec::Linear { a: -0.05 };
    pub const LARGE_LINEAR: TrendSpec = TrendSpec::Linear { a: -0.2 };
    pub const QUADRATIC: TrendSpec = TrendSpec::Quadratic { a: -0.30, b: 0.018 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum EffectSpec {
    None,
    Constant { delta12: f64 },
    /// Linear from 0 at month 3 to `delta12` at month 12, flat afterwards.
    Ramp { delta12: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub enum CovarianceSpec {
    Exchangeable { sigma_b2: f64, sigma2: f64 },
    Car1 { sigma_b2: f64, sigma2: f64, rho: f64 },
    Exponential { sigma_b2: f64, sigma2: f64, range: f64 },
    Unstructured {
        sigma_b2: f64,
        sigma_u2: f64,
        sigma_e2: f64,
        #[serde(default = "default_monthly_corr")]
        monthly_corr: Vec<Vec<f64>>,
    },
}

/// Default month-bucket correlation for unstructured generation: `0.8^|m - m'|`.
pub fn default_monthly_corr() -> Vec<Vec<f64>> {
    (0..N_BUCKETS)
        .map(|i| (0..N_BUCKETS).map(|j| 0.8f64.powi((i as i32 - j as i32).abs())).collect())
        .collect()
}

/// Month bucket of a time in `[3, 13]`: `min(floor(t), 12) - 3`.
pub fn month_bucket(t: f64) -> usize {
    (t.floor().clamp(3.0, 12.0) as usize) - 3
}

impl CovarianceSpec {
    pub const DEFAULT_EXPONENTIAL: CovarianceSpec = CovarianceSpec::Exponential {
        sigma_b2: 9.0,
        sigma2: 16.0,
        range: 3.0,
    };

    pub fn default_unstructured() -> Self {
        CovarianceSpec::Unstructured {
            sigma_b2: 9.0,
            sigma_u2: 12.0,
            sigma_e2: 4.0,
            monthly_corr: default_monthly_corr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} must be finite and > 0, got {v}")))
            }
        };
        match self {
            CovarianceSpec::Exchangeable { sigma_b2, sigma2 } => {
                finite_nonneg("sigma_b2", *sigma_b2)?;
                positive("sigma2", *sigma2)
            }
            CovarianceSpec::Car1 { sigma_b2, sigma2, rho } => {
                finite_nonneg("sigma_b2", *sigma_b2)?;
                positive("sigma2", *sigma2)?;
                if !(*rho > 0.0 && *rho < 1.0) {
                    return Err(Error::InvalidArgument(format!("rho must be in (0, 1), got {rho}")));
                }
                Ok(())
            }
            CovarianceSpec::Exponential { sigma_b2, sigma2, range } => {
                finite_nonneg("sigma_b2", *sigma_b2)?;
                positive("sigma2", *sigma2)?;
                positive("range", *range)
            }
            CovarianceSpec::Unstructured {
                sigma_b2,
                sigma_u2,
                sigma_e2,
                monthly_corr,
            } => {
                finite_nonneg("sigma_b2", *sigma_b2)?;
                finite_nonneg("sigma_u2", *sigma_u2)?;
                positive("sigma_e2", *sigma_e2)?;
                validate_corr(monthly_corr)
            }
        }
    }
}

fn validate_corr(c: &[Vec<f64>]) -> Result<()> {
    if c.len() != N_BUCKETS || c.iter().any(|row| row.len() != N_BUCKETS) {
        return Err(Error::InvalidArgument(format!(
            "monthly_corr must be {N_BUCKETS}x{N_BUCKETS}"
        )));
    }
    for i in 0..N_BUCKETS {
        if (c[i][i] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("monthly_corr[{i}][{i}] must be 1")));
        }
        for j in 0..i {
            if (c[i][j] - c[j][i]).abs() > 1e-12 || !c[i][j].is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "monthly_corr is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let m = DMatrix::from_fn(N_BUCKETS, N_BUCKETS, |i, j| c[i][j]);
    if m.cholesky().is_none() {
        return Err(Error::InvalidArgument("monthly_corr is not positive definite".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FollowUp {
    Optimal,
    Realistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealisticMix {
    pub p_optimal: f64,
    pub p_first_month: f64,
    pub p_usual: f64,
}

impl RealisticMix {
    pub fn validate(&self) -> Result<()> {
        let p = [self.p_optimal, self.p_first_month, self.p_usual];
        if p.iter().any(|p| !(0.0..=1.0).contains(p)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "realistic_mix must be probabilities summing to 1, got sum {}",
                p.iter().sum::<f64>()
            )));
        }
        Ok(())
    }
}

impl Default for RealisticMix {
    fn default() -> Self {
        RealisticMix {
            p_optimal: 0.20,
            p_first_month: 0.60,
            p_usual: 0.20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineDist {
    pub mean: f64,
    pub sd: f64,
    pub low: f64,
    pub high: f64,
}

impl Default for BaselineDist {
    fn default() -> Self {
        BaselineDist {
            mean: 14.0,
            sd: 4.0,
            low: 10.0,
            high: 27.0,
        }
    }
}

impl BaselineDist {
    pub fn validate(&self) -> Result<()> {
        if !(self.sd > 0.0 && self.low < self.high) || ![self.mean, self.sd, self.low, self.high].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("baseline_dist needs finite values, sd > 0 and low < high".into()));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let z: f64 = StandardNormal.sample(rng);
            let v = self.mean + self.sd * z;
            if (self.low..=self.high).contains(&v) {
                return v;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: String,
    pub n_per_site: usize,
    pub sites: usize,
    pub follow_up: FollowUp,
    pub realistic_mix: RealisticMix,
    pub trend: TrendSpec,
    pub effect: EffectSpec,
    pub covariance: CovarianceSpec,
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub baseline_dist: BaselineDist,
    pub cohort_ref: String,
}

impl ScenarioConfig {
    /// Trial-sized scenario with the shipped default parameters.
    pub fn with_defaults(
        id: impl Into<String>,
        follow_up: FollowUp,
        trend: TrendSpec,
        effect: EffectSpec,
        covariance: CovarianceSpec,
    ) -> Self {
        ScenarioConfig {
            id: id.into(),
            n_per_site: 400,
            sites: 2,
            follow_up,
            realistic_mix: RealisticMix::default(),
            trend,
            effect,
            covariance,
            alpha: 0.0,
            beta1: -0.5,
            beta2: 0.3,
            baseline_dist: BaselineDist::default(),
            cohort_ref: "default".into(),
        }
    }

    pub fn n_participants(&self) -> usize {
        self.n_per_site * self.sites
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_site == 0 || self.n_per_site % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_per_site must be a positive even number, got {}",
                self.n_per_site
            )));
        }
        if self.sites == 0 {
            return Err(Error::InvalidArgument("sites must be >= 1".into()));
        }
        self.realistic_mix.validate()?;
        self.baseline_dist.validate()?;
        self.covariance.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRow {
    pub person_id: usize,
    pub site: u8,
    pub arm: u8,
    pub baseline: f64,
    pub t: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    pub rows: Vec<ObservationRow>,
    pub n_participants: usize,
}

impl TrialDataset {
    /// Row ranges of each participant, in person order.
    pub fn person_slices(&self) -> Vec<&[ObservationRow]> {
        let mut out = Vec::with_capacity(self.n_participants);
        let mut start = 0;
        for i in 1..=self.rows.len() {
            if i == self.rows.len() || self.rows[i].person_id != self.rows[start].person_id {
                out.push(&self.rows[start..i]);
                start = i;
            }
        }
        out
    }
}

/// Stratified 1:1 allocation: returns `(site, arm)` per participant, sites in order.
pub fn randomize<R: Rng + ?Sized>(n_per_site: usize, sites: usize, rng: &mut R) -> Result<Vec<(u8, u8)>> {
    if n_per_site % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "n_per_site must be even for 1:1 allocation, got {n_per_site}"
        )));
    }
    let mut out = Vec::with_capacity(n_per_site * sites);
    for site in 0..sites {
        let mut arms: Vec<u8> = (0..n_per_site).map(|i| u8::from(i < n_per_site / 2)).collect();
        arms.shuffle(rng);
        out.extend(arms.into_iter().map(|a| (site as u8, a)));
    }
    Ok(out)
}

pub fn trend_value(trend: &TrendSpec, t: f64) -> f64 {
    let s = t - 3.0;
    match *trend {
        TrendSpec::None => 0.0,
        TrendSpec::Linear { a } => a * s,
        TrendSpec::Quadratic { a, b } => a * s + b * s * s,
    }
}

pub fn effect_value(effect: &EffectSpec, t: f64) -> f64 {
    match *effect {
        EffectSpec::None => 0.0,
        EffectSpec::Constant { delta12 } => delta12,
        EffectSpec::Ramp { delta12 } => delta12 * ((t - 3.0) / 9.0).clamp(0.0, 1.0),
    }
}

fn optimal_days<R: Rng + ?Sized>(rng: &mut R) -> Vec<u32> {
    (0..N_BUCKETS)
        .map(|b| {
            let (lo, hi) = bucket_days(b);
            rng.random_range(lo..=hi)
        })
        .collect()
}

/// Assessment days for one participant.
pub fn generate_schedule_days<R: Rng + ?Sized>(
    arm: u8,
    config: &ScenarioConfig,
    cohort: &Cohort,
    rng: &mut R,
) -> Vec<u32> {
    if arm == 0 {
        return resample_days(cohort, rng).to_vec();
    }
    match config.follow_up {
        FollowUp::Optimal => optimal_days(rng),
        FollowUp::Realistic => {
            let u: f64 = rng.random();
            let mix = &config.realistic_mix;
            if u < mix.p_optimal {
                optimal_days(rng)
            } else if u < mix.p_optimal + mix.p_first_month {
                let (lo, hi) = bucket_days(0);
                let first = rng.random_range(lo..=hi);
                let rest = resample_days(cohort, rng);
                std::iter::once(first).chain(rest.iter().copied().filter(|&d| d > hi)).collect()
            } else {
                resample_days(cohort, rng).to_vec()
            }
        }
    }
}

pub fn generate_schedule<R: Rng + ?Sized>(
    arm: u8,
    config: &ScenarioConfig,
    cohort: &Cohort,
    rng: &mut R,
) -> Vec<f64> {
    generate_schedule_days(arm, config, cohort, rng)
        .into_iter()
        .map(day_to_month)
        .collect()
}

/// Marginal covariance of one person's outcomes at sorted `times`.
pub fn marginal_covariance(spec: &CovarianceSpec, times: &[f64]) -> DMatrix<f64> {
    let n = times.len();
    match spec {
        CovarianceSpec::Exchangeable { sigma_b2, sigma2 } => {
            DMatrix::from_fn(n, n, |j, k| sigma_b2 + if j == k { *sigma2 } else { 0.0 })
        }
        CovarianceSpec::Car1 { sigma_b2, sigma2, rho } => DMatrix::from_fn(n, n, |j, k| {
            sigma_b2 + sigma2 * rho.powf((times[j] - times[k]).abs())
        }),
        CovarianceSpec::Exponential { sigma_b2, sigma2, range } => DMatrix::from_fn(n, n, |j, k| {
            sigma_b2 + sigma2 * (-(times[j] - times[k]).abs() / range).exp()
        }),
        CovarianceSpec::Unstructured {
            sigma_b2,
            sigma_u2,
            sigma_e2,
            monthly_corr,
        } => DMatrix::from_fn(n, n, |j, k| {
            let c = monthly_corr[month_bucket(times[j])][month_bucket(times[k])];
            sigma_b2 + sigma_u2 * c + if j == k { *sigma_e2 } else { 0.0 }
        }),
    }
}

pub fn mean_value(config: &ScenarioConfig, baseline: f64, site: u8, arm: u8, t: f64) -> f64 {
    config.alpha
        + trend_value(&config.trend, t)
        + config.beta1 * baseline
        + config.beta2 * f64::from(site)
        + effect_value(&config.effect, t) * f64::from(arm)
}

/// Generates one trial. Draw order: allocation, then per participant the
/// baseline score, the schedule and the outcome noise.
pub fn generate_trial<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    cohort: &Cohort,
    rng: &mut R,
) -> Result<TrialDataset> {
    config.validate()?;
    let allocation = randomize(config.n_per_site, config.sites, rng)?;
    let mut rows = Vec::with_capacity(allocation.len() * 5);
    for (person_id, &(site, arm)) in allocation.iter().enumerate() {
        let baseline = config.baseline_dist.sample(rng);
        let times = generate_schedule(arm, config, cohort, rng);
        let v = marginal_covariance(&config.covariance, &times);
        let chol = v.cholesky().ok_or_else(|| Error::Factorization {
            person: person_id,
            detail: format!("{:?} covariance at {} time points", config.covariance, times.len()),
        })?;
        let z = DVector::from_fn(times.len(), |_, _| StandardNormal.sample(rng));
        let noise = chol.l() * z;
        for (j, &t) in times.iter().enumerate() {
            rows.push(ObservationRow {
                person_id,
                site,
                arm,
                baseline,
                t,
                y: mean_value(config, baseline, site, arm, t) + noise[j],
            });
        }
    }
    Ok(TrialDataset {
        rows,
        n_participants: allocation.len(),
    })
}
