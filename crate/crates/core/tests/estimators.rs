use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trialsim::cohort::{Cohort, CohortParticipant};
use trialsim::dgp::{generate_trial, CovarianceSpec, EffectSpec, FollowUp, ScenarioConfig, TrendSpec};
use trialsim::estimators::{
    build_design, effect_contrast, fit_lmm_at, fit_lmm_reml, fit_method, fit_ols_sandwich,
    reml_objective, select_scores, spline_basis_for, wald, EffectModel, Engine, ModelSpec,
    Selection, Structure, TimeAdjust,
};
use trialsim::rng::substream;

mod common;
use common::{dense_reml, longitudinal, normal, params, rel_diff};

#[test]
fn sandwich_matches_explicit_formula() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 40 + (seed as usize % 20);
        let x = DMatrix::from_fn(n, 4, |i, j| if j == 0 { 1.0 } else { normal(&mut rng) + i as f64 * 0.01 });
        let y = DVector::from_fn(n, |_, _| normal(&mut rng));
        let w = DVector::from_fn(n, |_, _| 0.2 + rng.random::<f64>());
        let clusters: Vec<usize> = (0..n).map(|i| i / 3).collect();
        let (beta, cov) = fit_ols_sandwich(&x, &y, &clusters, &w).unwrap();

        let (beta_ref, cov_ref) = common::explicit_sandwich(&x, &y, &clusters, &w);
        assert!((&beta - &beta_ref).amax() < 1e-10 * beta_ref.amax().max(1.0));
        assert!(rel_diff(&cov, &cov_ref) < 1e-10, "seed {seed}");
    }
}

#[test]
fn ols_normal_equations_small_instance() {
    // y = 1 + 2x except the last row; closed-form simple regression
    let x = DMatrix::from_row_slice(6, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 4.0, 1.0, 5.0]);
    let y = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0, 9.0, 12.0]);
    let (beta, _) = fit_ols_sandwich(&x, &y, &[0, 1, 2, 3, 4, 5], &DVector::repeat(6, 1.0)).unwrap();
    // sums: n=6, Sx=15, Sxx=55, Sy=37, Sxy=130
    let slope = (6.0 * 130.0 - 15.0 * 37.0) / (6.0 * 55.0 - 15.0 * 15.0);
    let intercept = (37.0 - slope * 15.0) / 6.0;
    assert!((beta[0] - intercept).abs() < 1e-10 && (beta[1] - slope).abs() < 1e-10);
}

#[test]
fn exact_fit_has_zero_sandwich() {
    let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
    let y = DVector::from_fn(10, |i, _| 2.0 - 0.5 * i as f64);
    let (_, cov) = fit_ols_sandwich(&x, &y, &(0..10).collect::<Vec<_>>(), &DVector::repeat(10, 1.0)).unwrap();
    assert!(cov.amax() < 1e-20);
}

#[test]
fn reml_objective_matches_dense_oracle() {
    let structures = [Structure::Exchangeable, Structure::Car1, Structure::Exponential];
    for seed in 0..100u64 {
        let d = longitudinal(seed, 8, 5);
        let s = structures[seed as usize % 3];
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let corr = if s == Structure::Car1 { 0.05 + 0.9 * rng.random::<f64>() } else { 0.3 + 5.0 * rng.random::<f64>() };
        let p = params(s, 2.0 * rng.random::<f64>(), 0.1 + 2.0 * rng.random::<f64>(), corr);
        let got = reml_objective(&p, &d.x, &d.y, &d.ids, &d.times, s).unwrap();
        let want = dense_reml(&p, &d, s);
        assert!((got - want).abs() <= 1e-8 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn optimizer_reaches_grid_minimum() {
    let logspace = |lo: f64, hi: f64, k: usize| -> Vec<f64> {
        (0..k).map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (k - 1) as f64).exp()).collect()
    };
    let (gb, ge, gr) = (logspace(1e-3, 10.0, 30), logspace(1e-2, 10.0, 30), logspace(0.1, 30.0, 30));
    for seed in 0..10u64 {
        let mut d = longitudinal(50 + seed, 5, 4);
        d.x = d.x.columns(0, 2).into_owned();
        let fit = fit_lmm_reml(&d.x, &d.y, &d.ids, &d.times, Structure::Exponential).unwrap();
        let mut grid_min = f64::INFINITY;
        for &b in &gb {
            for &e in &ge {
                for &r in &gr {
                    let p = params(Structure::Exponential, b, e, r);
                    grid_min = grid_min.min(reml_objective(&p, &d.x, &d.y, &d.ids, &d.times, Structure::Exponential).unwrap());
                }
            }
        }
        assert!(fit.objective <= grid_min + 1e-4, "seed {seed}: {} vs grid {grid_min}", fit.objective);
    }
}

#[test]
fn car1_and_exponential_are_reparameterizations() {
    for seed in 0..20u64 {
        let d = longitudinal(200 + seed, 30, 6);
        let c = fit_lmm_reml(&d.x, &d.y, &d.ids, &d.times, Structure::Car1).unwrap();
        let e = fit_lmm_reml(&d.x, &d.y, &d.ids, &d.times, Structure::Exponential).unwrap();
        assert!((c.objective - e.objective).abs() <= 1e-3, "seed {seed}: {} vs {}", c.objective, e.objective);
        assert!((c.coefficients[2] - e.coefficients[2]).abs() < 1e-2);
    }
}

#[test]
fn gls_without_correlation_is_ols() {
    let d = longitudinal(7, 40, 5);
    let n = d.ids.len();
    let (beta, _) = fit_ols_sandwich(&d.x, &d.y, &(0..n).collect::<Vec<_>>(), &DVector::repeat(n, 1.0)).unwrap();
    let p = params(Structure::Exchangeable, 0.0, 1.3, 0.0);
    let gls = fit_lmm_at(&p, &d.x, &d.y, &d.ids, &d.times, Structure::Exchangeable).unwrap();
    assert!((&gls.coefficients - &beta).amax() < 1e-8);
    let model_cov = (d.x.transpose() * &d.x).try_inverse().unwrap() * 1.3;
    assert!(rel_diff(&gls.cov, &model_cov) < 1e-8);
}

#[test]
fn reml_shift_equivariance_and_label_symmetry() {
    let d = longitudinal(11, 40, 5);
    let shift = DVector::from_vec(vec![3.0, -0.4, 1.1]);
    let shifted_y = &d.y + &d.x * &shift;
    let relabeled: Vec<usize> = d.ids.iter().map(|i| 1000 - 7 * i).collect();
    for s in [Structure::Exchangeable, Structure::Car1, Structure::Exponential] {
        let base = fit_lmm_reml(&d.x, &d.y, &d.ids, &d.times, s).unwrap();
        let shifted = fit_lmm_reml(&d.x, &shifted_y, &d.ids, &d.times, s).unwrap();
        assert!((&shifted.coefficients - &base.coefficients - &shift).amax() < 1e-6);
        assert!((shifted.params.sigma2 - base.params.sigma2).abs() < 1e-6 * base.params.sigma2);
        let relab = fit_lmm_reml(&d.x, &d.y, &relabeled, &d.times, s).unwrap();
        assert!((&relab.coefficients - &base.coefficients).amax() < 1e-10);
        assert!((relab.objective - base.objective).abs() < 1e-10 * base.objective.abs());
    }
}

#[test]
fn reml_optimum_beats_true_parameters() {
    for seed in 0..5u64 {
        let d = longitudinal(300 + seed, 60, 6);
        let truth = params(Structure::Exponential, 2.25, 1.0, 2.0);
        let at_truth = reml_objective(&truth, &d.x, &d.y, &d.ids, &d.times, Structure::Exponential).unwrap();
        let fit = fit_lmm_reml(&d.x, &d.y, &d.ids, &d.times, Structure::Exponential).unwrap();
        assert!(fit.objective <= at_truth + 1e-6, "seed {seed}");
        let again = reml_objective(&fit.params, &d.x, &d.y, &d.ids, &d.times, Structure::Exponential).unwrap();
        assert!((again - fit.objective).abs() < 1e-8 * again.abs().max(1.0));
    }
}

fn small_cohort() -> Cohort {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let participants = (0..400)
        .map(|_| {
            let k = rng.random_range(1..=6);
            let mut days: Vec<u32> = (0..k).map(|_| rng.random_range(92..=395)).collect();
            days.sort_unstable();
            days.dedup();
            CohortParticipant::from_days(days).unwrap()
        })
        .collect();
    Cohort::new(participants).unwrap()
}

fn trial(effect: EffectSpec, seed: u64) -> trialsim::dgp::TrialDataset {
    let cfg = ScenarioConfig::with_defaults(
        "est",
        FollowUp::Realistic,
        TrendSpec::SMALL_LINEAR,
        effect,
        CovarianceSpec::DEFAULT_EXPONENTIAL,
    );
    generate_trial(&cfg, &small_cohort(), &mut substream(seed, "estimators-test", 0)).unwrap()
}

#[test]
fn effect_contrast_expands_by_hand() {
    let data = trial(EffectSpec::Ramp { delta12: -1.5 }, 1);
    let spec = ModelSpec::new("m", Selection::All, TimeAdjust::Splines3DF, EffectModel::TimeVaryingSplines3DF, Engine::WgeeIndependence);
    let rows = select_scores(&data, &spec, &mut substream(0, "sel", 0));
    let basis = spline_basis_for(&rows, &spec).unwrap();
    let design = build_design(&rows, &spec, basis).unwrap();
    let (beta, cov) = fit_ols_sandwich(&design.x, &design.y, &design.clusters, &design.weights).unwrap();
    let (est, se) = effect_contrast(&beta, &cov, &design, 12.0).unwrap();

    let b = design.basis.as_ref().unwrap().evaluate(12.0).unwrap();
    let cols = design.interaction_cols.clone().unwrap();
    let mut c = vec![0.0; beta.len()];
    c[design.arm_col] = 1.0;
    for k in 0..3 {
        c[cols[k]] = b[k];
    }
    let est_ref: f64 = (0..beta.len()).map(|i| c[i] * beta[i]).sum();
    let var_ref: f64 = (0..beta.len()).flat_map(|i| (0..beta.len()).map(move |j| (i, j))).map(|(i, j)| c[i] * cov[(i, j)] * c[j]).sum();
    assert!((est - est_ref).abs() < 1e-12 * est_ref.abs().max(1.0));
    assert!((se - var_ref.sqrt()).abs() < 1e-12 * se.max(1.0));
}

#[test]
fn every_table_method_fits_a_trial() {
    let data = trial(EffectSpec::Ramp { delta12: -1.5 }, 2);
    let combos = [
        (Selection::Random, Engine::OlsSandwich),
        (Selection::ClosestTo12, Engine::OlsSandwich),
        (Selection::All, Engine::WgeeIndependence),
        (Selection::All, Engine::LmmExchangeable),
        (Selection::All, Engine::LmmCar1),
        (Selection::All, Engine::LmmExponential),
    ];
    for (sel, engine) in combos {
        for effect in [EffectModel::Constant, EffectModel::TimeVaryingSplines3DF] {
            let spec = ModelSpec::new("m", sel, TimeAdjust::Splines3DF, effect, engine);
            let fit = fit_method(&data, &spec, &mut substream(0, "fit", 0)).unwrap();
            assert!(fit.converged, "{sel:?} {engine:?} {effect:?}");
            assert!(fit.effect_estimate.is_finite() && fit.effect_se > 0.0);
            assert!(fit.effect_estimate.abs() < 5.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn wald_rule(est in -10.0f64..10.0, se in 0.01f64..5.0) {
        let w = wald(est, se).unwrap();
        prop_assert_eq!(w.reject, (est / se).abs() > 1.96);
        prop_assert!(w.ci95.0 <= est && est <= w.ci95.1);
        prop_assert!((0.0..=1.0).contains(&w.p));
    }

    #[test]
    fn ols_is_invariant_to_row_order(seed in 0u64..1000, rot in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let x = DMatrix::from_fn(n, 3, |_, j| if j == 0 { 1.0 } else { normal(&mut rng) });
        let y = DVector::from_fn(n, |_, _| normal(&mut rng));
        let clusters: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let w = DVector::repeat(n, 1.0);
        let (b1, c1) = fit_ols_sandwich(&x, &y, &clusters, &w).unwrap();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let xp = DMatrix::from_fn(n, 3, |i, j| x[(perm[i], j)]);
        let yp = DVector::from_fn(n, |i, _| y[perm[i]]);
        let cp: Vec<usize> = perm.iter().map(|&i| clusters[i]).collect();
        let (b2, c2) = fit_ols_sandwich(&xp, &yp, &cp, &w).unwrap();
        prop_assert!((&b1 - &b2).amax() < 1e-10);
        prop_assert!(rel_diff(&c1, &c2) < 1e-9);
    }

    #[test]
    fn single_score_selections(seed in 0u64..500) {
        let data = trial(EffectSpec::None, seed % 5);
        let mut rng = substream(seed, "prop", 0);
        for sel in [Selection::Random, Selection::ClosestTo12] {
            let spec = ModelSpec::new("m", sel, TimeAdjust::None, EffectModel::Constant, Engine::OlsSandwich);
            let rows = select_scores(&data, &spec, &mut rng);
            prop_assert_eq!(rows.len(), data.n_participants);
            for (row, person) in rows.iter().zip(data.person_slices()) {
                let t = row.t.unwrap();
                prop_assert!(person.iter().any(|r| r.t == t && r.y == row.y));
                if sel == Selection::ClosestTo12 {
                    prop_assert!(person.iter().all(|r| (r.t - 12.0).abs() >= (t - 12.0).abs()));
                }
            }
        }
    }
}
