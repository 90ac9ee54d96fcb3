//! Analysis methods: score selection, design construction, OLS and weighted
//! independence estimating equations with a cluster-robust sandwich, REML
//! linear mixed models, and Wald inference for the effect at a target time.

mod design;
mod ols;
mod reml;

pub use design::{build_design, spline_basis_for, Design};
pub use ols::fit_ols_sandwich;
pub use reml::{
    fit_lmm_at, fit_lmm_reml, reml_objective, LmmFit, Structure, VarianceParams,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dgp::TrialDataset;
use crate::error::{Error, Result};

pub const Z_975: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Selection {
    All,
    Random,
    ClosestTo12,
    Mean,
    Best,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeAdjust {
    None,
    Linear,
    Splines3DF,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EffectModel {
    Constant,
    TimeVaryingSplines3DF,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Engine {
    #[serde(rename = "OLS_Sandwich")]
    OlsSandwich,
    #[serde(rename = "WGEE_Independence")]
    WgeeIndependence,
    #[serde(rename = "LMM_Exchangeable")]
    LmmExchangeable,
    #[serde(rename = "LMM_CAR1")]
    LmmCar1,
    #[serde(rename = "LMM_Exponential")]
    LmmExponential,
}

impl Engine {
    pub fn structure(self) -> Option<Structure> {
        match self {
            Engine::LmmExchangeable => Some(Structure::Exchangeable),
            Engine::LmmCar1 => Some(Structure::Car1),
            Engine::LmmExponential => Some(Structure::Exponential),
            Engine::OlsSandwich | Engine::WgeeIndependence => None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanOptions {
    #[serde(default)]
    pub weight_by_n: bool,
    #[serde(default)]
    pub adjust_for_n: bool,
}

fn default_target_time() -> f64 {
    12.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub key: String,
    pub selection: Selection,
    #[serde(default)]
    pub mean_options: MeanOptions,
    pub time_adjust: TimeAdjust,
    pub effect_model: EffectModel,
    pub engine: Engine,
    #[serde(default = "default_target_time")]
    pub target_time: f64,
}

impl ModelSpec {
    pub fn new(
        key: impl Into<String>,
        selection: Selection,
        time_adjust: TimeAdjust,
        effect_model: EffectModel,
        engine: Engine,
    ) -> Self {
        ModelSpec {
            key: key.into(),
            selection,
            mean_options: MeanOptions::default(),
            time_adjust,
            effect_model,
            engine,
            target_time: 12.0,
        }
    }

    pub fn with_mean_options(mut self, weight_by_n: bool, adjust_for_n: bool) -> Self {
        self.mean_options = MeanOptions { weight_by_n, adjust_for_n };
        self
    }

    pub fn estimand_label(&self) -> EstimandLabel {
        match self.effect_model {
            EffectModel::Constant => EstimandLabel::ConstantEffect,
            EffectModel::TimeVaryingSplines3DF => EstimandLabel::EffectAt12,
        }
    }

    pub fn uses_splines(&self) -> bool {
        self.time_adjust == TimeAdjust::Splines3DF
            || self.effect_model == EffectModel::TimeVaryingSplines3DF
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("method `{}`: {msg}", self.key)));
        if self.key.is_empty() {
            return Err(Error::InvalidArgument("method key must be nonempty".into()));
        }
        let all_scores = self.selection == Selection::All;
        let single = matches!(self.engine, Engine::OlsSandwich);
        if all_scores == single {
            return bad("selection All requires WGEE or LMM engines; other selections require OLS_Sandwich");
        }
        if matches!(self.selection, Selection::Mean | Selection::Best) {
            if self.effect_model != EffectModel::Constant || self.time_adjust != TimeAdjust::None {
                return bad("Mean/Best support only a constant effect without time adjustment");
            }
            if self.selection == Selection::Best && self.mean_options.weight_by_n {
                return bad("weight_by_n applies only to Mean");
            }
        } else if self.mean_options != MeanOptions::default() {
            return bad("mean_options apply only to Mean/Best selection");
        }
        if !self.target_time.is_finite() {
            return bad("target_time must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimandLabel {
    ConstantEffect,
    EffectAt12,
}

/// One row entering a model fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisRow {
    pub person_id: usize,
    pub site: u8,
    pub arm: u8,
    pub baseline: f64,
    /// Absent for per-person summaries (Mean).
    pub t: Option<f64>,
    pub y: f64,
    pub n_i: usize,
    pub weight: f64,
}

pub fn select_scores<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    spec: &ModelSpec,
    rng: &mut R,
) -> Vec<AnalysisRow> {
    let mut out = Vec::new();
    for person in dataset.person_slices() {
        let n_i = person.len();
        let row = |j: usize, weight: f64| {
            let r = &person[j];
            AnalysisRow {
                person_id: r.person_id,
                site: r.site,
                arm: r.arm,
                baseline: r.baseline,
                t: Some(r.t),
                y: r.y,
                n_i,
                weight,
            }
        };
        match spec.selection {
            Selection::All => {
                let w = if spec.engine == Engine::WgeeIndependence {
                    1.0 / n_i as f64
                } else {
                    1.0
                };
                out.extend((0..n_i).map(|j| row(j, w)));
            }
            Selection::Random => out.push(row(rng.random_range(0..n_i), 1.0)),
            Selection::ClosestTo12 => {
                // strict comparison keeps the earlier time on ties
                let mut best = 0;
                for j in 1..n_i {
                    if (person[j].t - spec.target_time).abs()
                        < (person[best].t - spec.target_time).abs()
                    {
                        best = j;
                    }
                }
                out.push(row(best, 1.0));
            }
            Selection::Best => {
                let mut best = 0;
                for j in 1..n_i {
                    if person[j].y < person[best].y {
                        best = j;
                    }
                }
                out.push(row(best, 1.0));
            }
            Selection::Mean => {
                let r = &person[0];
                out.push(AnalysisRow {
                    person_id: r.person_id,
                    site: r.site,
                    arm: r.arm,
                    baseline: r.baseline,
                    t: None,
                    y: person.iter().map(|r| r.y).sum::<f64>() / n_i as f64,
                    n_i,
                    weight: if spec.mean_options.weight_by_n { n_i as f64 } else { 1.0 },
                });
            }
        }
    }
    out
}

/// Contrast picking out the intervention effect at `t_star`.
pub fn contrast_vector(design: &Design, t_star: f64) -> Result<DVector<f64>> {
    let mut c = DVector::zeros(design.x.ncols());
    c[design.arm_col] = 1.0;
    if let Some(cols) = &design.interaction_cols {
        let basis = design
            .basis
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("time-varying effect needs a basis".into()))?;
        let b = basis.evaluate(t_star)?;
        for (k, &col) in cols.iter().enumerate() {
            c[col] = b[k];
        }
    }
    Ok(c)
}

/// Estimate and standard error of the effect at `t_star` (or of the constant
/// effect when the design has no interaction columns).
pub fn effect_contrast(
    coefficients: &DVector<f64>,
    cov: &DMatrix<f64>,
    design: &Design,
    t_star: f64,
) -> Result<(f64, f64)> {
    let c = contrast_vector(design, t_star)?;
    let est = c.dot(coefficients);
    let var = (cov * &c).dot(&c);
    Ok((est, var.max(0.0).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wald {
    pub ci95: (f64, f64),
    pub z: f64,
    pub p: f64,
    pub reject: bool,
}

pub fn wald(estimate: f64, se: f64) -> Result<Wald> {
    if !(se > 0.0) || !se.is_finite() || !estimate.is_finite() {
        return Err(Error::DegenerateInference(se));
    }
    let z = estimate / se;
    Ok(Wald {
        ci95: (estimate - Z_975 * se, estimate + Z_975 * se),
        z,
        p: erfc(z.abs() / std::f64::consts::SQRT_2),
        reject: z.abs() > Z_975,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub coefficients: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub columns: Vec<String>,
    pub effect_estimate: f64,
    pub effect_se: f64,
    pub ci95: (f64, f64),
    pub z: f64,
    pub p: f64,
    pub reject: bool,
    pub converged: bool,
    pub estimand_label: EstimandLabel,
    pub variance: Option<VarianceParams>,
}

/// Selects scores, builds the design and fits `spec` on one dataset.
pub fn fit_method<R: Rng + ?Sized>(
    dataset: &TrialDataset,
    spec: &ModelSpec,
    rng: &mut R,
) -> Result<FitResult> {
    let rows = select_scores(dataset, spec, rng);
    let basis = spline_basis_for(&rows, spec)?;
    let design = build_design(&rows, spec, basis)?;
    let (coefficients, cov, converged, variance) = match spec.engine.structure() {
        None => {
            let (b, v) = fit_ols_sandwich(&design.x, &design.y, &design.clusters, &design.weights)?;
            (b, v, true, None)
        }
        Some(structure) => {
            let times: Vec<f64> = rows.iter().map(|r| r.t.unwrap_or(f64::NAN)).collect();
            let fit = fit_lmm_reml(&design.x, &design.y, &design.clusters, &times, structure)?;
            (fit.coefficients, fit.cov, fit.converged, Some(fit.params))
        }
    };
    let (effect_estimate, effect_se) =
        effect_contrast(&coefficients, &cov, &design, spec.target_time)?;
    let w = wald(effect_estimate, effect_se)?;
    Ok(FitResult {
        coefficients,
        cov,
        columns: design.columns,
        effect_estimate,
        effect_se,
        ci95: w.ci95,
        z: w.z,
        p: w.p,
        reject: w.reject,
        converged,
        estimand_label: spec.estimand_label(),
        variance,
    })
}
