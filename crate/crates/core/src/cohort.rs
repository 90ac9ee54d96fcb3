//! Synthetic retrospective cohort of usual-care assessment schedules.
//!
//! Schedules live on a day grid: day `d` in `[92, 395]` maps to
//! `t = d / 30.4375` months since baseline, so every time falls in `[3, 13]`.
//! The count of scores per person comes from a capped three-part mixture
//! (a light zero-truncated Poisson, an engaged zero-truncated Poisson and a
//! uniform tail on `1..=40`); score months follow a geometric decay over the
//! ten month buckets with a separate inflation of the month-12 bucket.

use std::path::Path;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

pub const DAYS_PER_MONTH: f64 = 30.4375;
pub const FIRST_DAY: u32 = 92;
pub const LAST_DAY: u32 = 395;
pub const MAX_SCORES: usize = 40;
pub const N_BUCKETS: usize = 10;
pub const FIRST_MONTH: usize = 3;

pub fn day_to_month(day: u32) -> f64 {
    f64::from(day) / DAYS_PER_MONTH
}

/// Inclusive day range of month bucket `b` (bucket 0 is month 3, bucket 9 is month 12).
pub fn bucket_days(b: usize) -> (u32, u32) {
    let m = (FIRST_MONTH + b) as f64;
    let start = (m * DAYS_PER_MONTH).ceil() as u32;
    let end = ((m + 1.0) * DAYS_PER_MONTH).ceil() as u32 - 1;
    (start.max(FIRST_DAY), end.min(LAST_DAY))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CohortParticipant {
    days: Vec<u32>,
}

impl CohortParticipant {
    pub fn from_days(mut days: Vec<u32>) -> Result<Self> {
        days.sort_unstable();
        let p = CohortParticipant { days };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let n = self.days.len();
        if n == 0 || n > MAX_SCORES {
            return Err(Error::InvalidArgument(format!(
                "participant has {n} scores, expected 1..={MAX_SCORES}"
            )));
        }
        if self.days.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument(
                "participant has two scores on the same day".into(),
            ));
        }
        if let Some(d) = self.days.iter().find(|&&d| !(FIRST_DAY..=LAST_DAY).contains(&d)) {
            return Err(Error::InvalidArgument(format!(
                "score day {d} outside [{FIRST_DAY}, {LAST_DAY}]"
            )));
        }
        Ok(())
    }

    pub fn days(&self) -> &[u32] {
        &self.days
    }

    pub fn follow_up_times(&self) -> Vec<f64> {
        self.days.iter().map(|&d| day_to_month(d)).collect()
    }

    pub fn count(&self) -> usize {
        self.days.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cohort {
    participants: Vec<CohortParticipant>,
}

impl Cohort {
    pub fn new(participants: Vec<CohortParticipant>) -> Result<Self> {
        if participants.is_empty() {
            return Err(Error::InvalidArgument("cohort must be nonempty".into()));
        }
        Ok(Cohort { participants })
    }

    pub fn participants(&self) -> &[CohortParticipant] {
        &self.participants
    }

    pub fn size(&self) -> usize {
        self.participants.len()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let raw: Vec<Vec<u32>> = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let participants = raw
            .into_iter()
            .enumerate()
            .map(|(i, days)| {
                CohortParticipant::from_days(days)
                    .map_err(|e| Error::config(format!("[{i}]"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Cohort::new(participants)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("cohort serializes");
        std::fs::write(path, text).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Published marginals of the assessment process among people with at least
/// one follow-up score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortTargets {
    pub p_single: f64,
    pub p_ge5: f64,
    pub mean_count: f64,
    pub sd_count: f64,
    pub p_month12: f64,
    pub p_window_10_13: f64,
    pub max_count: usize,
}

pub fn default_targets() -> CohortTargets {
    CohortTargets {
        p_single: 0.369,
        p_ge5: 0.245,
        mean_count: 3.2,
        sd_count: 3.89,
        p_month12: 0.23,
        p_window_10_13: 0.498,
        max_count: 40,
    }
}

/// Half-widths within which a 100,000-person synthetic cohort must land.
pub fn target_tolerances() -> CohortTargets {
    CohortTargets {
        p_single: 0.02,
        p_ge5: 0.02,
        mean_count: 0.15,
        sd_count: 0.3,
        p_month12: 0.02,
        p_window_10_13: 0.03,
        max_count: 0,
    }
}

impl CohortTargets {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_single", self.p_single),
            ("p_ge5", self.p_ge5),
            ("p_month12", self.p_month12),
            ("p_window_10_13", self.p_window_10_13),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.mean_count > 0.0) || !(self.sd_count >= 0.0) {
            return Err(Error::InvalidArgument("count mean must be > 0 and sd >= 0".into()));
        }
        Ok(())
    }

    /// Largest deviation from `other` measured in units of `tol`, over the six
    /// calibrated marginals.
    pub fn max_scaled_deviation(&self, other: &CohortTargets, tol: &CohortTargets) -> f64 {
        self.scaled_deviations(other, tol)
            .into_iter()
            .fold(0.0, |m, d| m.max(d.abs()))
    }

    fn scaled_deviations(&self, other: &CohortTargets, tol: &CohortTargets) -> [f64; 6] {
        [
            (self.p_single - other.p_single) / tol.p_single,
            (self.p_ge5 - other.p_ge5) / tol.p_ge5,
            (self.mean_count - other.mean_count) / tol.mean_count,
            (self.sd_count - other.sd_count) / tol.sd_count,
            (self.p_month12 - other.p_month12) / tol.p_month12,
            (self.p_window_10_13 - other.p_window_10_13) / tol.p_window_10_13,
        ]
    }
}

/// Count-of-scores distribution: mixture of two zero-truncated Poissons and a
/// uniform tail, capped at `MAX_SCORES`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountModel {
    pub light_rate: f64,
    pub engaged_rate: f64,
    pub light_weight: f64,
    pub tail_weight: f64,
}

fn zero_truncated_poisson(rate: f64) -> [f64; MAX_SCORES + 1] {
    let mut pmf = [0.0; MAX_SCORES + 1];
    if rate < 1e-12 {
        pmf[1] = 1.0;
        return pmf;
    }
    // P(N = n | N >= 1) = rate^n e^-rate / (n! (1 - e^-rate))
    let norm = -(-rate).exp_m1();
    let mut term = (-rate).exp() / norm;
    let mut acc = 0.0;
    for (n, slot) in pmf.iter_mut().enumerate().take(MAX_SCORES).skip(1) {
        term *= rate / n as f64;
        *slot = term;
        acc += term;
    }
    pmf[MAX_SCORES] = (1.0 - acc).max(0.0);
    pmf
}

impl CountModel {
    pub fn point_mass_one() -> Self {
        CountModel {
            light_rate: 0.0,
            engaged_rate: 0.0,
            light_weight: 1.0,
            tail_weight: 0.0,
        }
    }

    /// `pmf[n]` for `n` in `0..=MAX_SCORES`; `pmf[0]` is always zero.
    pub fn pmf(&self) -> [f64; MAX_SCORES + 1] {
        let light = zero_truncated_poisson(self.light_rate);
        let engaged = zero_truncated_poisson(self.engaged_rate);
        let engaged_weight = 1.0 - self.light_weight - self.tail_weight;
        let mut pmf = [0.0; MAX_SCORES + 1];
        for n in 1..=MAX_SCORES {
            pmf[n] = self.light_weight * light[n]
                + engaged_weight * engaged[n]
                + self.tail_weight / MAX_SCORES as f64;
        }
        pmf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortGenParams {
    pub count: CountModel,
    /// Geometric decay of the month-bucket probabilities per month after month 3.
    pub decay: f64,
    /// Multiplier on the month-12 bucket before normalization.
    pub month12_inflation: f64,
}

impl CohortGenParams {
    pub fn month_probs(&self) -> [f64; N_BUCKETS] {
        let mut w = [0.0; N_BUCKETS];
        for (b, slot) in w.iter_mut().enumerate() {
            *slot = (-self.decay * b as f64).exp();
        }
        w[N_BUCKETS - 1] *= self.month12_inflation;
        let total: f64 = w.iter().sum();
        w.map(|v| v / total)
    }

    /// Exact marginals of the generator: the count distribution is tabulated and
    /// month buckets are independent across a person's scores (same-day
    /// collisions are redrawn within the bucket, which leaves the bucket
    /// distribution unchanged).
    pub fn expected_targets(&self) -> CohortTargets {
        let pmf = self.count.pmf();
        let q = self.month_probs();
        let q12 = q[N_BUCKETS - 1];
        let qw: f64 = q[N_BUCKETS - 3..].iter().sum();
        let (mut mean, mut second, mut p12, mut pw) = (0.0, 0.0, 0.0, 0.0);
        for (n, &p) in pmf.iter().enumerate().skip(1) {
            let nf = n as f64;
            mean += p * nf;
            second += p * nf * nf;
            p12 += p * (1.0 - (1.0 - q12).powi(n as i32));
            pw += p * (1.0 - (1.0 - qw).powi(n as i32));
        }
        CohortTargets {
            p_single: pmf[1],
            p_ge5: pmf[5..].iter().sum(),
            mean_count: mean,
            sd_count: (second - mean * mean).max(0.0).sqrt(),
            p_month12: p12,
            p_window_10_13: pw,
            max_count: pmf.iter().rposition(|&p| p > 0.0).unwrap_or(1),
        }
    }

    /// Exact mean and SD of the intervention-arm schedule length when a
    /// fraction `mix.0` gets ten monthly scores, `mix.1` gets one month-3 score
    /// plus their usual-care scores after month 3, and `mix.2` keeps usual care.
    pub fn realistic_length_moments(&self, mix: (f64, f64, f64)) -> (f64, f64) {
        let pmf = self.count.pmf();
        let keep = 1.0 - self.month_probs()[0];
        let (mut m1, mut m2, mut f1, mut f2) = (0.0, 0.0, 0.0, 0.0);
        for (n, &p) in pmf.iter().enumerate().skip(1) {
            let nf = n as f64;
            m1 += p * nf;
            m2 += p * nf * nf;
            // 1 + Binomial(n, keep)
            let mu = nf * keep;
            f1 += p * (1.0 + mu);
            f2 += p * (1.0 + 2.0 * mu + mu * (1.0 - keep) + mu * mu);
        }
        let mean = mix.0 * 10.0 + mix.1 * f1 + mix.2 * m1;
        let second = mix.0 * 100.0 + mix.1 * f2 + mix.2 * m2;
        (mean, (second - mean * mean).max(0.0).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub params: CohortGenParams,
    /// Exact marginals at the returned parameters.
    pub expected: CohortTargets,
    /// Marginals of a 100,000-person cohort drawn at the returned parameters.
    pub sampled: CohortTargets,
    /// Whether every sampled marginal is within twice its tolerance.
    pub within_tolerance: bool,
}

const CALIBRATION_SAMPLE: usize = 100_000;

/// Published intervention-arm schedule length (mean, SD) under the default
/// realistic mix, and the scale each deviation is measured in.
pub const REALISTIC_LENGTH_TARGET: (f64, f64) = (4.9, 4.33);
const REALISTIC_LENGTH_SCALE: (f64, f64) = (0.2, 0.15);
const REALISTIC_MIX: (f64, f64, f64) = (0.2, 0.6, 0.2);

fn sigmoid_weights(a: f64, b: f64) -> (f64, f64) {
    // softmax over (light, tail, engaged) with the engaged logit pinned at 0
    let m = a.max(b).max(0.0);
    let (ea, eb, ec) = ((a - m).exp(), (b - m).exp(), (-m).exp());
    let s = ea + eb + ec;
    (ea / s, eb / s)
}

fn params_from(theta: &[f64; 6], degenerate: bool) -> CohortGenParams {
    let count = if degenerate {
        CountModel::point_mass_one()
    } else {
        let (light_weight, tail_weight) = sigmoid_weights(theta[2], theta[3]);
        CountModel {
            light_rate: theta[0].exp(),
            engaged_rate: theta[1].exp(),
            light_weight,
            tail_weight,
        }
    };
    CohortGenParams {
        count,
        decay: theta[4],
        month12_inflation: theta[5].exp(),
    }
}

/// Fits the generator to `targets` by cyclic coordinate search on transformed
/// parameters, minimizing squared tolerance-scaled deviations of the exact
/// marginals and of the realistic intervention-arm length moments, then draws a 100,000-person cohort with `seed` to report the
/// achieved values.
pub fn calibrate_generator(targets: &CohortTargets, seed: u64) -> Result<CalibrationReport> {
    targets.validate()?;
    let tol = target_tolerances();
    let degenerate = targets.p_single >= 1.0 - 1e-12;
    let objective = |theta: &[f64; 6]| {
        let params = params_from(theta, degenerate);
        let got = params.expected_targets();
        let mut f: f64 = got.scaled_deviations(targets, &tol).iter().map(|d| d * d).sum();
        if !degenerate {
            let (m, s) = params.realistic_length_moments(REALISTIC_MIX);
            f += ((m - REALISTIC_LENGTH_TARGET.0) / REALISTIC_LENGTH_SCALE.0).powi(2);
            f += ((s - REALISTIC_LENGTH_TARGET.1) / REALISTIC_LENGTH_SCALE.1).powi(2);
        }
        f
    };
    let active: &[usize] = if degenerate { &[4, 5] } else { &[0, 1, 2, 3, 4, 5] };
    let mut theta = [0.8f64.ln(), 4.6f64.ln(), 0.2, -3.0, 0.06, 0.1];
    let mut best = objective(&theta);
    let mut step = 0.5;
    while step > 1e-9 {
        let mut improved = false;
        for &i in active {
            for dir in [1.0, -1.0] {
                let mut trial = theta;
                trial[i] += dir * step;
                let f = objective(&trial);
                if f < best {
                    best = f;
                    theta = trial;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    let params = params_from(&theta, degenerate);
    let cohort = generate_cohort(&params, CALIBRATION_SAMPLE, seed)?;
    let sampled = summarize_cohort(&cohort);
    let within_tolerance = sampled.max_scaled_deviation(targets, &tol) <= 2.0;
    Ok(CalibrationReport {
        params,
        expected: params.expected_targets(),
        sampled,
        within_tolerance,
    })
}

struct Sampler {
    count_cdf: [f64; MAX_SCORES + 1],
    month_cdf: [f64; N_BUCKETS],
}

fn cdf<const N: usize>(p: &[f64; N]) -> [f64; N] {
    let mut out = [0.0; N];
    let mut acc = 0.0;
    for (o, v) in out.iter_mut().zip(p) {
        acc += v;
        *o = acc;
    }
    out
}

fn draw_index(cdf: &[f64], u: f64) -> usize {
    let total = cdf[cdf.len() - 1];
    cdf.iter()
        .position(|&c| u * total < c)
        .unwrap_or(cdf.len() - 1)
}

impl Sampler {
    fn new(params: &CohortGenParams) -> Self {
        Sampler {
            count_cdf: cdf(&params.count.pmf()),
            month_cdf: cdf(&params.month_probs()),
        }
    }

    fn participant<R: Rng + ?Sized>(&self, rng: &mut R) -> CohortParticipant {
        let n = draw_index(&self.count_cdf, rng.random::<f64>()).max(1);
        let mut days: Vec<u32> = Vec::with_capacity(n);
        while days.len() < n {
            let mut b = draw_index(&self.month_cdf, rng.random::<f64>());
            let (mut lo, mut hi) = bucket_days(b);
            while (lo..=hi).all(|d| days.contains(&d)) {
                b = draw_index(&self.month_cdf, rng.random::<f64>());
                (lo, hi) = bucket_days(b);
            }
            loop {
                let d = rng.random_range(lo..=hi);
                if !days.contains(&d) {
                    days.push(d);
                    break;
                }
            }
        }
        days.sort_unstable();
        CohortParticipant { days }
    }
}

pub fn generate_cohort(params: &CohortGenParams, size: usize, seed: u64) -> Result<Cohort> {
    if size == 0 {
        return Err(Error::InvalidArgument("cohort size must be >= 1".into()));
    }
    let sampler = Sampler::new(params);
    let mut rng = substream(seed, "cohort", 0);
    let participants = (0..size).map(|_| sampler.participant(&mut rng)).collect();
    Cohort::new(participants)
}

/// One usual-care schedule (integer days), a whole participant drawn uniformly
/// with replacement.
pub fn resample_days<'a, R: Rng + ?Sized>(cohort: &'a Cohort, rng: &mut R) -> &'a [u32] {
    let i = rng.random_range(0..cohort.size());
    cohort.participants[i].days()
}

pub fn resample_schedule<R: Rng + ?Sized>(cohort: &Cohort, rng: &mut R) -> Vec<f64> {
    resample_days(cohort, rng)
        .iter()
        .map(|&d| day_to_month(d))
        .collect()
}

pub fn summarize_cohort(cohort: &Cohort) -> CohortTargets {
    let n = cohort.size() as f64;
    let counts: Vec<f64> = cohort.participants.iter().map(|p| p.count() as f64).collect();
    let mean = counts.iter().sum::<f64>() / n;
    let sd = if cohort.size() > 1 {
        (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let frac = |pred: &dyn Fn(&CohortParticipant) -> bool| {
        cohort.participants.iter().filter(|p| pred(p)).count() as f64 / n
    };
    CohortTargets {
        p_single: frac(&|p| p.count() == 1),
        p_ge5: frac(&|p| p.count() >= 5),
        mean_count: mean,
        sd_count: sd,
        p_month12: frac(&|p| p.follow_up_times().iter().any(|&t| (12.0..13.0).contains(&t))),
        p_window_10_13: frac(&|p| p.follow_up_times().iter().any(|&t| (10.0..=13.0).contains(&t))),
        max_count: cohort.participants.iter().map(|p| p.count()).max().unwrap_or(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn day_grid_covers_window() {
        assert_eq!(bucket_days(0), (92, 121));
        assert_eq!(bucket_days(9), (366, 395));
        for b in 0..N_BUCKETS - 1 {
            assert_eq!(bucket_days(b).1 + 1, bucket_days(b + 1).0);
        }
        for b in 0..N_BUCKETS {
            let (lo, hi) = bucket_days(b);
            assert!(day_to_month(lo) >= (FIRST_MONTH + b) as f64);
            assert!(day_to_month(hi) < (FIRST_MONTH + b + 1) as f64);
        }
    }

    #[test]
    fn default_target_values() {
        let t = default_targets();
        assert_eq!(t.p_single, 0.369);
        assert_eq!(t.p_ge5, 0.245);
        assert_eq!((t.mean_count, t.sd_count), (3.2, 3.89));
        assert_eq!((t.p_month12, t.p_window_10_13), (0.23, 0.498));
        assert_eq!(t.max_count, 40);
    }

    #[test]
    fn count_pmf_sums_to_one() {
        let m = CountModel {
            light_rate: 0.8,
            engaged_rate: 4.6,
            light_weight: 0.5,
            tail_weight: 0.03,
        };
        let pmf = m.pmf();
        assert_eq!(pmf[0], 0.0);
        assert!((pmf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_mass_target_gives_single_scores() {
        let targets = CohortTargets {
            p_single: 1.0,
            p_ge5: 0.0,
            mean_count: 1.0,
            sd_count: 0.0,
            ..default_targets()
        };
        let report = calibrate_generator(&targets, 3).unwrap();
        assert_eq!(report.params.count, CountModel::point_mass_one());
        let cohort = generate_cohort(&report.params, 500, 9).unwrap();
        assert!(cohort.participants().iter().all(|p| p.count() == 1));
    }

    #[test]
    fn summarize_direct_counts() {
        let single = Cohort::new(vec![CohortParticipant::from_days(vec![(12.2 * DAYS_PER_MONTH) as u32]).unwrap()]).unwrap();
        let s = summarize_cohort(&single);
        assert_eq!((s.p_single, s.p_month12, s.mean_count, s.sd_count), (1.0, 1.0, 1.0, 0.0));

        let to_day = |t: f64| (t * DAYS_PER_MONTH).ceil() as u32;
        let a = CohortParticipant::from_days(vec![to_day(3.5)]).unwrap();
        let b = CohortParticipant::from_days([3.5, 5.0, 6.0, 7.0, 8.0].map(to_day).to_vec()).unwrap();
        let s = summarize_cohort(&Cohort::new(vec![a, b]).unwrap());
        assert_eq!((s.p_single, s.p_ge5, s.mean_count, s.p_month12), (0.5, 0.5, 3.0, 0.0));
    }

    #[test]
    fn single_participant_resample_returns_schedule() {
        let p = CohortParticipant::from_days(vec![125, 359]).unwrap();
        let cohort = Cohort::new(vec![p.clone()]).unwrap();
        let mut rng = substream(1, "schedule", 0);
        assert_eq!(resample_schedule(&cohort, &mut rng), p.follow_up_times());
    }

    #[test]
    fn participant_invariants_enforced() {
        assert!(CohortParticipant::from_days(vec![]).is_err());
        assert!(CohortParticipant::from_days(vec![100, 100]).is_err());
        assert!(CohortParticipant::from_days(vec![91]).is_err());
        assert!(CohortParticipant::from_days((92..133).collect()).is_err());
    }

    #[test]
    fn size_one_cohort() {
        let params = calibrate_generator(&default_targets(), 1).unwrap().params;
        let c = generate_cohort(&params, 1, 5).unwrap();
        assert_eq!(c.size(), 1);
        assert!((1..=40).contains(&c.participants()[0].count()));
        assert!(generate_cohort(&params, 0, 5).is_err());
    }
}
