mod common;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transmodel_iv::score::estimate;
use transmodel_iv::sim::{calibrate_censoring, generate_case, CaseId, CaseSpec};
use transmodel_iv::transform::solve_transform;
use transmodel_iv::variance::martingale_residuals;
use transmodel_iv::{estimate_iv, score_u1, FitOptions, HazardFamily, SurvivalDataset};

const PH: HazardFamily = HazardFamily::PROPORTIONAL_HAZARDS;
const PO: HazardFamily = HazardFamily::PROPORTIONAL_ODDS;

#[test]
fn score_matches_double_loop_oracle() {
    let data = common::random_dataset(8, 8, 2, 2, false);
    let beta = Array1::from(vec![0.3, -0.4]);
    let family = HazardFamily::new(0.7).unwrap();
    let t = solve_transform(beta.view(), data.z(), data.outcomes(), family).unwrap();
    let u = score_u1(beta.view(), &t, data.z(), data.outcomes(), family).unwrap();

    let mut oracle = [0.0; 2];
    for i in 0..data.n() {
        let eta = data.z()[[i, 0]] * beta[0] + data.z()[[i, 1]] * beta[1];
        for (k, (&tk, &lk)) in t.event_times.iter().zip(&t.values).enumerate() {
            if data.times()[i] < tk {
                continue;
            }
            let dn = if data.status()[i] && data.times()[i] == tk { 1.0 } else { 0.0 };
            let prev = if k == 0 { 0.0 } else { family.cumulative_hazard(eta + t.values[k - 1]).unwrap() };
            let d_lambda = family.cumulative_hazard(eta + lk).unwrap() - prev;
            for j in 0..2 {
                oracle[j] += data.z()[[i, j]] * (dn - d_lambda);
            }
        }
    }
    for j in 0..2 {
        assert!((u[j] - oracle[j]).abs() < 1e-10, "{} vs {}", u[j], oracle[j]);
    }
}

#[test]
fn proportional_hazards_fit_matches_partial_likelihood() {
    for seed in 0..10 {
        let data = common::case_data(CaseId::I, 60, vec![1.0], PH, 100 + seed, seed);
        let model = estimate_iv(&data, PH, &FitOptions::default()).unwrap();
        assert!(model.converged);
        let cox = common::cox_newton(model.dataset.times(), model.dataset.status(), &model.design);
        assert!((model.beta[0] - cox[0]).abs() < 1e-4, "{} vs {}", model.beta[0], cox[0]);
    }
}

#[test]
fn noiseless_instruments_recover_direct_fit() {
    for rep in 0..5 {
        let mut spec = CaseSpec::new(CaseId::Ii, 80, vec![1.0], PO, 1, 9).unwrap();
        spec.error_sd_eps = 0.0;
        spec.error_sd_v = 0.0;
        spec.censoring_constant = Some(calibrate_censoring(&spec).unwrap());
        let g = generate_case(&spec, rep).unwrap();
        let iv = estimate_iv(&g.dataset, PO, &FitOptions::default()).unwrap();
        let direct = estimate(&g.dataset, g.x.view(), PO, &FitOptions::default()).unwrap();
        assert!(iv.converged && direct.converged);
        assert!((iv.beta[0] - direct.beta[0]).abs() < 1e-6);
    }
}

#[test]
fn converged_fit_solves_the_estimating_equations() {
    for (case, beta, family) in [
        (CaseId::I, vec![1.0], PH),
        (CaseId::Ii, vec![2.0], PO),
        (CaseId::Iii, vec![2.0, 4.0], PH),
    ] {
        let data = common::case_data(case, 50, beta, family, 5, 0);
        let model = estimate_iv(&data, family, &FitOptions::default()).unwrap();
        assert!(model.converged);
        assert!(model.score_norm <= 1e-8);
        let resid = martingale_residuals(&model).unwrap();
        assert!(resid.column_sums().iter().all(|s| s.abs() <= 1e-8));
        // re-solving at the returned coefficients reproduces the transform
        let again = solve_transform(model.beta.view(), model.design.view(), model.dataset.outcomes(), family).unwrap();
        assert_eq!(again, model.transform);
    }
}

#[test]
fn profiled_jacobian_is_negative_definite() {
    for (case, beta, family) in [(CaseId::I, vec![1.0], PH), (CaseId::Iii, vec![0.5, 0.5], PO)] {
        let data = common::case_data(case, 100, beta, family, 21, 1);
        let model = estimate_iv(&data, family, &FitOptions::default()).unwrap();
        let jac: Array2<f64> = model.profiled_jacobian(1e-6).unwrap();
        let sym = (&jac + &jac.t()) * 0.5;
        // negative definite iff -sym has positive leading minors
        let m = -sym;
        assert!(m[[0, 0]] > 0.0);
        if m.nrows() == 2 {
            assert!(m[[0, 0]] * m[[1, 1]] - m[[0, 1]] * m[[1, 0]] > 0.0);
        }
    }
}

#[test]
fn scaling_a_column_rescales_its_coefficient() {
    let data = common::case_data(CaseId::Iii, 80, vec![0.5, 0.3], PO, 4, 2);
    let base = estimate(&data, data.z(), PO, &FitOptions::default()).unwrap();
    let c = 2.5;
    let mut scaled = data.z().to_owned();
    scaled.column_mut(1).mapv_inplace(|v| v * c);
    let fit = estimate(&data, scaled.view(), PO, &FitOptions::default()).unwrap();
    assert!((fit.beta[0] - base.beta[0]).abs() < 1e-6);
    assert!((fit.beta[1] - base.beta[1] / c).abs() < 1e-6);
    let inc_a = fit.compensator_increments();
    let inc_b = base.compensator_increments();
    for (a, b) in inc_a.iter().zip(inc_b.iter()) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn record_order_does_not_change_the_fit() {
    let data = common::random_dataset(77, 40, 1, 2, true);
    let base = estimate_iv(&data, PO, &FitOptions::default()).unwrap();
    let mut idx: Vec<usize> = (0..data.n()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        idx.shuffle(&mut rng);
        let permuted: SurvivalDataset = data.select(&idx).unwrap();
        let fit = estimate_iv(&permuted, PO, &FitOptions::default()).unwrap();
        assert_eq!(fit.beta, base.beta);
        assert_eq!(fit.transform, base.transform);
    }
}

#[test]
fn null_effect_is_recovered() {
    let data = common::case_data(CaseId::I, 200, vec![0.0], PH, 31, 0);
    let model = estimate_iv(&data, PH, &FitOptions::default()).unwrap();
    assert!(model.converged);
    assert!(model.beta[0].abs() <= 0.1, "{}", model.beta[0]);
}

#[test]
fn unit_effect_is_recovered_at_moderate_size() {
    let data = common::case_data(CaseId::I, 200, vec![1.0], PH, 31, 0);
    let model = estimate_iv(&data, PH, &FitOptions::default()).unwrap();
    assert!(model.converged);
    assert!((model.beta[0] - 1.0).abs() <= 0.15, "beta_hat = {}", model.beta[0]);
}
