//! Strict JSON schema for scenario grids and method benches.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dgp::{
    BaselineDist, CovarianceSpec, EffectSpec, FollowUp, RealisticMix, ScenarioConfig, TrendSpec,
};
use crate::error::{Error, Result};
use crate::estimators::ModelSpec;
use crate::harness::{OracleOptions, MIN_ORACLE_PARTICIPANTS, MIN_ORACLE_REPS};

/// One scenario as written in a config file; omitted DGP parameters take the
/// shipped defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioEntry {
    pub id: String,
    #[serde(default = "defaults::n_per_site")]
    pub n_per_site: usize,
    #[serde(default = "defaults::sites")]
    pub sites: usize,
    pub follow_up: FollowUp,
    #[serde(default)]
    pub realistic_mix: RealisticMix,
    #[serde(default = "defaults::trend")]
    pub trend: TrendSpec,
    #[serde(default = "defaults::effect")]
    pub effect: EffectSpec,
    #[serde(default = "defaults::covariance")]
    pub covariance: CovarianceSpec,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub baseline_dist: BaselineDist,
    #[serde(default = "defaults::cohort_ref")]
    pub cohort_ref: String,
}

mod defaults {
    use super::*;

    pub fn n_per_site() -> usize {
        400
    }
    pub fn sites() -> usize {
        2
    }
    pub fn trend() -> TrendSpec {
        TrendSpec::None
    }
    pub fn effect() -> EffectSpec {
        EffectSpec::None
    }
    pub fn covariance() -> CovarianceSpec {
        CovarianceSpec::DEFAULT_EXPONENTIAL
    }
    pub fn beta1() -> f64 {
        -0.5
    }
    pub fn beta2() -> f64 {
        0.3
    }
    pub fn cohort_ref() -> String {
        "default".into()
    }
    pub fn n_big() -> usize {
        MIN_ORACLE_PARTICIPANTS
    }
    pub fn k_reps() -> usize {
        MIN_ORACLE_REPS
    }
}

impl From<ScenarioEntry> for ScenarioConfig {
    fn from(e: ScenarioEntry) -> Self {
        ScenarioConfig {
            id: e.id,
            n_per_site: e.n_per_site,
            sites: e.sites,
            follow_up: e.follow_up,
            realistic_mix: e.realistic_mix,
            trend: e.trend,
            effect: e.effect,
            covariance: e.covariance,
            alpha: e.alpha,
            beta1: e.beta1,
            beta2: e.beta2,
            baseline_dist: e.baseline_dist,
            cohort_ref: e.cohort_ref,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleEntry {
    #[serde(default = "defaults::n_big")]
    pub n_big: usize,
    #[serde(default = "defaults::k_reps")]
    pub k_reps: usize,
    #[serde(default)]
    pub all_scores: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub scenarios: Vec<ScenarioEntry>,
    pub methods: Vec<ModelSpec>,
    #[serde(default)]
    pub oracle: Option<OracleEntry>,
}

/// A validated config.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub scenarios: Vec<ScenarioConfig>,
    pub methods: Vec<ModelSpec>,
    pub oracle: OracleOptions,
}

pub fn parse_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<SimConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: ConfigFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })?;
    validate(file)
}

fn finite(path: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::config(path, "values must be finite"))
    }
}

fn validate(file: ConfigFile) -> Result<SimConfig> {
    if file.methods.is_empty() {
        return Err(Error::config("methods", "no methods"));
    }
    let mut ids = HashSet::new();
    for (i, s) in file.scenarios.iter().enumerate() {
        let at = |field: &str| format!("scenarios[{i}].{field}");
        let wrap = |field: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::InvalidArgument(m) => Error::config(at(field), m),
                other => other,
            })
        };
        if s.id.is_empty() || !ids.insert(s.id.as_str()) {
            return Err(Error::config(at("id"), format!("scenario id `{}` is empty or repeated", s.id)));
        }
        if s.n_per_site == 0 || s.n_per_site % 2 != 0 {
            return Err(Error::config(at("n_per_site"), "must be a positive even number"));
        }
        if s.sites == 0 || s.sites > usize::from(u8::MAX) {
            return Err(Error::config(at("sites"), "must be between 1 and 255"));
        }
        wrap("realistic_mix", s.realistic_mix.validate())?;
        wrap("baseline_dist", s.baseline_dist.validate())?;
        wrap("covariance", s.covariance.validate())?;
        match s.trend {
            TrendSpec::None => {}
            TrendSpec::Linear { a } => finite(&at("trend"), &[a])?,
            TrendSpec::Quadratic { a, b } => finite(&at("trend"), &[a, b])?,
        }
        match s.effect {
            EffectSpec::None => {}
            EffectSpec::Constant { delta12 } | EffectSpec::Ramp { delta12 } => {
                finite(&at("effect"), &[delta12])?
            }
        }
        finite(&at("alpha"), &[s.alpha, s.beta1, s.beta2])?;
    }
    let mut keys = HashSet::new();
    for (i, m) in file.methods.iter().enumerate() {
        if !keys.insert(m.key.as_str()) {
            return Err(Error::config(format!("methods[{i}].key"), format!("method key `{}` is repeated", m.key)));
        }
        m.validate().map_err(|e| Error::config(format!("methods[{i}]"), e.to_string()))?;
    }
    let oracle = match &file.oracle {
        None => OracleOptions::default(),
        Some(o) => OracleOptions {
            n_big: o.n_big,
            k_reps: o.k_reps,
            all_scores: o.all_scores,
        },
    };
    if oracle.n_big < MIN_ORACLE_PARTICIPANTS || oracle.k_reps < MIN_ORACLE_REPS {
        return Err(Error::config(
            "oracle",
            format!(
                "n_big must be >= {} and k_reps >= {}",
                MIN_ORACLE_PARTICIPANTS,
                MIN_ORACLE_REPS
            ),
        ));
    }
    Ok(SimConfig {
        scenarios: file.scenarios.into_iter().map(Into::into).collect(),
        methods: file.methods,
        oracle,
    })
}
