//! Replicated simulation over scenario × method grids, estimand oracles and
//! operating characteristics.
//!
//! Every random draw is addressed by `(base_seed, role/scenario[/method],
//! rep_index)`, so results do not depend on the thread count or on the order
//! of methods.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::dgp::{effect_value, generate_trial, EffectSpec, ScenarioConfig};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_method, EffectModel, Engine, ModelSpec, Selection, TimeAdjust,
};
use crate::rng::substream;

pub const MIN_ORACLE_PARTICIPANTS: usize = 20_000;
pub const MIN_ORACLE_REPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimandKind {
    EffectAt12,
    ConstantPlim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandRef {
    pub kind: EstimandKind,
    /// Method whose probability limit this is (`ConstantPlim` only).
    pub method_key: Option<String>,
    /// Absent when the estimand is not computed.
    pub value: Option<f64>,
    /// Monte Carlo standard error of an oracle value.
    pub mc_se: Option<f64>,
}

impl EstimandRef {
    pub fn effect_at_12(value: f64) -> Self {
        EstimandRef {
            kind: EstimandKind::EffectAt12,
            method_key: None,
            value: Some(value),
            mc_se: None,
        }
    }

    pub fn constant(method_key: &str, value: Option<f64>, mc_se: Option<f64>) -> Self {
        EstimandRef {
            kind: EstimandKind::ConstantPlim,
            method_key: Some(method_key.to_string()),
            value,
            mc_se,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub scenario_id: String,
    pub method_key: String,
    pub rep_index: u64,
    pub effect_estimate: f64,
    pub effect_se: f64,
    pub ci95: (f64, f64),
    pub reject: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario_id: String,
    pub method_key: String,
    pub selection: Selection,
    pub time_adjust: TimeAdjust,
    pub effect_model: EffectModel,
    pub engine: Engine,
    pub estimand_kind: EstimandKind,
    pub truth: Option<f64>,
    pub truth_mc_se: Option<f64>,
    pub n_reps: usize,
    pub n_converged: usize,
    pub mean_estimate: Option<f64>,
    pub bias: Option<f64>,
    pub empirical_se: Option<f64>,
    pub median_model_se: Option<f64>,
    pub coverage: Option<f64>,
    pub rejection_rate: Option<f64>,
    pub mc_se_rejection: Option<f64>,
}

pub fn true_effect_at_12(effect: &EffectSpec) -> f64 {
    effect_value(effect, 12.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlimEstimate {
    pub value: f64,
    pub mc_se: f64,
    pub n_used: usize,
}

/// Monte Carlo probability limit of a constant-effect estimator: the mean of
/// `k_reps` estimates, each from a dataset of `n_big` participants generated
/// under `scenario`. Runs on the current rayon pool.
pub fn oracle_constant_plim(
    scenario: &ScenarioConfig,
    method: &ModelSpec,
    cohort: &Cohort,
    n_big: usize,
    k_reps: usize,
    seed: u64,
) -> Result<PlimEstimate> {
    if method.effect_model != EffectModel::Constant {
        return Err(Error::InvalidArgument(format!(
            "method `{}` does not estimate a constant effect",
            method.key
        )));
    }
    if !matches!(method.selection, Selection::Random | Selection::ClosestTo12 | Selection::All) {
        return Err(Error::InvalidArgument(format!(
            "no constant-effect oracle for {:?} selection",
            method.selection
        )));
    }
    if n_big < MIN_ORACLE_PARTICIPANTS || k_reps < MIN_ORACLE_REPS {
        return Err(Error::InvalidArgument(format!(
            "oracle needs n_big >= {MIN_ORACLE_PARTICIPANTS} and k_reps >= {MIN_ORACLE_REPS}, got {n_big} and {k_reps}"
        )));
    }
    let mut big = scenario.clone();
    let per_site = n_big.div_ceil(scenario.sites);
    big.n_per_site = per_site + per_site % 2;
    let data_label = format!("oracle-data/{}/{}", scenario.id, method.key);
    let select_label = format!("oracle-select/{}/{}", scenario.id, method.key);
    let estimates: Vec<Option<f64>> = (0..k_reps as u64)
        .into_par_iter()
        .map(|k| -> Result<Option<f64>> {
            let data = generate_trial(&big, cohort, &mut substream(seed, &data_label, k))?;
            Ok(fit_method(&data, method, &mut substream(seed, &select_label, k))
                .ok()
                .filter(|f| f.converged)
                .map(|f| f.effect_estimate))
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = estimates.into_iter().flatten().collect();
    if used.len() < 2 {
        return Err(Error::Singular(format!("oracle fits for `{}` did not converge", method.key)));
    }
    let (mean, sd) = mean_sd(&used);
    Ok(PlimEstimate {
        value: mean,
        mc_se: sd / (used.len() as f64).sqrt(),
        n_used: used.len(),
    })
}

fn data_label(scenario: &ScenarioConfig) -> String {
    format!("data/{}", scenario.id)
}

fn select_label(scenario: &ScenarioConfig, method: &ModelSpec) -> String {
    format!("select/{}/{}", scenario.id, method.key)
}

fn failed(scenario: &ScenarioConfig, method: &ModelSpec, rep_index: u64) -> ReplicateResult {
    ReplicateResult {
        scenario_id: scenario.id.clone(),
        method_key: method.key.clone(),
        rep_index,
        effect_estimate: f64::NAN,
        effect_se: f64::NAN,
        ci95: (f64::NAN, f64::NAN),
        reject: false,
        converged: false,
    }
}

/// Generates replicate `rep_index` of `scenario` and fits every method on it.
/// Fitting failures are recorded as non-converged results.
pub fn run_replicate(
    scenario: &ScenarioConfig,
    methods: &[ModelSpec],
    cohort: &Cohort,
    rep_index: u64,
    base_seed: u64,
) -> Result<Vec<ReplicateResult>> {
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods".into()));
    }
    let data = generate_trial(scenario, cohort, &mut substream(base_seed, &data_label(scenario), rep_index))?;
    Ok(methods
        .iter()
        .map(|m| {
            let mut rng = substream(base_seed, &select_label(scenario, m), rep_index);
            match fit_method(&data, m, &mut rng) {
                Ok(fit) => ReplicateResult {
                    scenario_id: scenario.id.clone(),
                    method_key: m.key.clone(),
                    rep_index,
                    effect_estimate: fit.effect_estimate,
                    effect_se: fit.effect_se,
                    ci95: fit.ci95,
                    reject: fit.reject,
                    converged: fit.converged,
                },
                Err(_) => failed(scenario, m, rep_index),
            }
        })
        .collect())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Operating characteristics of one (scenario, method) cell.
pub fn summarize(
    scenario_id: &str,
    method: &ModelSpec,
    results: &[ReplicateResult],
    estimand: &EstimandRef,
) -> ScenarioSummary {
    let mut ok: Vec<&ReplicateResult> = results
        .iter()
        .filter(|r| r.converged && r.effect_estimate.is_finite() && r.effect_se.is_finite())
        .collect();
    ok.sort_by_key(|r| r.rep_index);
    let k = ok.len();
    let estimates: Vec<f64> = ok.iter().map(|r| r.effect_estimate).collect();
    let mean = (k >= 1).then(|| estimates.iter().sum::<f64>() / k as f64);
    let rate = (k >= 1).then(|| ok.iter().filter(|r| r.reject).count() as f64 / k as f64);
    let truth = estimand.value;
    ScenarioSummary {
        scenario_id: scenario_id.to_string(),
        method_key: method.key.clone(),
        selection: method.selection,
        time_adjust: method.time_adjust,
        effect_model: method.effect_model,
        engine: method.engine,
        estimand_kind: estimand.kind,
        truth,
        truth_mc_se: estimand.mc_se,
        n_reps: results.len(),
        n_converged: k,
        mean_estimate: mean,
        bias: mean.zip(truth).map(|(m, t)| m - t),
        empirical_se: (k >= 2).then(|| mean_sd(&estimates).1),
        median_model_se: (k >= 1).then(|| median(ok.iter().map(|r| r.effect_se).collect())),
        coverage: truth.filter(|_| k >= 1).map(|t| {
            ok.iter().filter(|r| r.ci95.0 <= t && t <= r.ci95.1).count() as f64 / k as f64
        }),
        rejection_rate: rate,
        mc_se_rejection: rate.map(|p| (p * (1.0 - p) / k as f64).sqrt()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleOptions {
    pub n_big: usize,
    pub k_reps: usize,
    /// Compute the constant-effect limit for methods using all scores under
    /// a time-varying effect instead of reporting it as absent.
    pub all_scores: bool,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            n_big: MIN_ORACLE_PARTICIPANTS,
            k_reps: MIN_ORACLE_REPS,
            all_scores: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub reps: usize,
    pub threads: usize,
    pub base_seed: u64,
    pub oracle: OracleOptions,
}

/// Target value of `method` under `scenario`, running the oracle if needed.
pub fn estimand_for(
    scenario: &ScenarioConfig,
    method: &ModelSpec,
    cohort: &Cohort,
    base_seed: u64,
    oracle: &OracleOptions,
) -> Result<EstimandRef> {
    if method.effect_model == EffectModel::TimeVaryingSplines3DF {
        return Ok(EstimandRef::effect_at_12(true_effect_at_12(&scenario.effect)));
    }
    let computable = match method.selection {
        Selection::Random | Selection::ClosestTo12 => true,
        Selection::All => oracle.all_scores,
        Selection::Mean | Selection::Best => false,
    };
    match scenario.effect {
        EffectSpec::None => Ok(EstimandRef::constant(&method.key, Some(0.0), None)),
        EffectSpec::Constant { delta12 } => Ok(EstimandRef::constant(&method.key, Some(delta12), None)),
        EffectSpec::Ramp { .. } if computable => {
            let plim = oracle_constant_plim(scenario, method, cohort, oracle.n_big, oracle.k_reps, base_seed)?;
            Ok(EstimandRef::constant(&method.key, Some(plim.value), Some(plim.mc_se)))
        }
        EffectSpec::Ramp { .. } => Ok(EstimandRef::constant(&method.key, None, None)),
    }
}

/// Runs every scenario × method cell and returns summaries sorted by
/// `(scenario_id, method_key)`.
pub fn run_grid(
    scenarios: &[ScenarioConfig],
    methods: &[ModelSpec],
    cohort: &Cohort,
    opts: &GridOptions,
) -> Result<Vec<ScenarioSummary>> {
    if opts.reps == 0 || opts.threads == 0 {
        return Err(Error::InvalidArgument("reps and threads must be >= 1".into()));
    }
    if scenarios.is_empty() {
        return Ok(Vec::new());
    }
    if methods.is_empty() {
        return Err(Error::InvalidArgument("no methods".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut out = Vec::new();
    pool.install(|| {
        for scenario in scenarios {
            let reps: Vec<Option<Vec<ReplicateResult>>> = (0..opts.reps as u64)
                .into_par_iter()
                .map(|rep| run_replicate(scenario, methods, cohort, rep, opts.base_seed).ok())
                .collect();
            for method in methods {
                let results: Vec<ReplicateResult> = reps
                    .iter()
                    .enumerate()
                    .map(|(rep, r)| match r {
                        Some(rs) => rs.iter().find(|x| x.method_key == method.key).cloned().unwrap_or_else(|| failed(scenario, method, rep as u64)),
                        None => failed(scenario, method, rep as u64),
                    })
                    .collect();
                let estimand = estimand_for(scenario, method, cohort, opts.base_seed, &opts.oracle)
                    .unwrap_or_else(|_| EstimandRef::constant(&method.key, None, None));
                out.push(summarize(&scenario.id, method, &results, &estimand));
            }
        }
    });
    out.sort_by(|a, b| (&a.scenario_id, &a.method_key).cmp(&(&b.scenario_id, &b.method_key)));
    Ok(out)
}
