mod common;

use common::*;
use dynpred::lmm::{
    fit_all_lmms, fit_lmm, predict_random_effects, summarize_lmms, LmmParams, LmmProblem, LmmSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn slope_spec() -> LmmSpec {
    LmmSpec::new("y", &["fuptime"], &["fuptime"])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradient_matches_finite_differences(
        seed in 0u64..1000,
        point in prop::collection::vec(-0.8f64..0.8, 6),
    ) {
        let (ds, _) = lmm_toy(seed, 7, 4);
        let prob = LmmProblem::new(&slope_spec(), &ds).unwrap();
        let params = LmmParams::from_slice(&point, 2, 2);
        let g = prob.gradient_params(&params);
        let base = params.to_vec();
        for k in 0..base.len() {
            let h = 1e-5 * (1.0 + base[k].abs());
            let mut up = base.clone();
            let mut dn = base.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (prob.loglik_params(&LmmParams::from_slice(&up, 2, 2))
                - prob.loglik_params(&LmmParams::from_slice(&dn, 2, 2)))
                / (2.0 * h);
            let rel = (g[k] - fd).abs() / fd.abs().max(1.0);
            prop_assert!(rel < 1e-5, "component {}: analytic {} vs fd {}", k, g[k], fd);
        }
    }

    #[test]
    fn ranef_prediction_ignores_row_order(seed in 0u64..1000, shift in 1usize..4) {
        let (ds, _) = lmm_toy(seed, 8, 4);
        let fit = fit_lmm(&slope_spec(), &ds).unwrap();
        let groups = ds.rows_by_subject();
        for g in &groups {
            let rows: Vec<_> = g.iter().map(|&j| &ds.longitudinal[j]).collect();
            let mut rotated = rows.clone();
            rotated.rotate_left(shift % rows.len());
            let a = predict_random_effects(&fit, &rows).unwrap();
            let b = predict_random_effects(&fit, &rotated).unwrap();
            for k in 0..2 {
                prop_assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn optimum_beats_random_probes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for seed in [2u64, 4, 6] {
        let (ds, _) = lmm_toy(seed, 10, 4);
        let fit = fit_lmm(&slope_spec(), &ds).unwrap();
        assert!(!fit.convergence.boundary);
        let prob = LmmProblem::new(&slope_spec(), &ds).unwrap();
        let opt = LmmParams::from_estimates(&fit.beta, &fit.d, fit.sigma2).unwrap();
        let base = opt.to_vec();
        let l0 = prob.loglik_params(&opt);
        assert!((l0 - fit.loglik).abs() < 1e-9);
        for _ in 0..100 {
            let probe: Vec<f64> = base.iter().map(|v| v + rng.random_range(-1e-2..1e-2)).collect();
            let l = prob.loglik_params(&LmmParams::from_slice(&probe, 2, 2));
            assert!(l <= l0 + 1e-8, "probe {l} exceeds optimum {l0}");
        }
    }
}

#[test]
fn fixed_effect_score_vanishes_at_optimum() {
    for seed in [1u64, 3, 5] {
        let (ds, _) = lmm_toy(seed, 10, 4);
        let fit = fit_lmm(&slope_spec(), &ds).unwrap();
        let prob = LmmProblem::new(&slope_spec(), &ds).unwrap();
        // Z = W here, so the random-design score is the fixed-effect score.
        let score = prob.random_score(&fit.beta, &fit.d, fit.sigma2);
        assert!(score.iter().all(|s| s.abs() < 1e-6), "{score:?}");
    }
}

#[test]
fn random_intercepts_shrink_toward_zero() {
    let spec = LmmSpec::new("y", &["fuptime"], &[]);
    for seed in [7u64, 8, 9] {
        let (ds, _) = lmm_toy(seed, 12, 4);
        let fit = fit_lmm(&spec, &ds).unwrap();
        for g in ds.rows_by_subject() {
            let rows: Vec<_> = g.iter().map(|&j| &ds.longitudinal[j]).collect();
            let u = predict_random_effects(&fit, &rows).unwrap();
            let mean_resid = rows
                .iter()
                .map(|r| r.values[0].unwrap() - fit.beta[0] - fit.beta[1] * r.fuptime)
                .sum::<f64>()
                / rows.len() as f64;
            assert!(u[0].abs() <= mean_resid.abs() + 1e-12);
            assert!(u[0] * mean_resid >= 0.0);
        }
    }
}

#[test]
fn worker_count_does_not_change_fits() {
    let s = "id,time,event\n1,3,1\n2,4,0\n3,5,1\n4,6,0\n5,7,1\n6,8,1\n";
    let mut l = String::from("id,fuptime,a,b,c\n");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 1..=6 {
        for j in 0..4 {
            let t = j as f64 * 0.5;
            let (a, b, c): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
            l.push_str(&format!("{i},{t},{},{},{}\n", a + t + i as f64 * 0.3, b * 2.0 - t, c - 0.1 * i as f64));
        }
    }
    let ds = dataset(s, &l, &Default::default());
    let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
    let fixed = vec!["fuptime".to_string()];
    let one = fit_all_lmms(&ds, &names, &fixed, &fixed, 1);
    let four = fit_all_lmms(&ds, &names, &fixed, &fixed, 4);
    assert_eq!(one.len(), 3);
    for (a, b) in one.iter().zip(&four) {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.d, b.d);
        assert_eq!(a.sigma2.to_bits(), b.sigma2.to_bits());
    }
    let single = fit_all_lmms(&ds, &names[..1], &fixed, &fixed, 1).pop().unwrap().unwrap();
    let direct = fit_lmm(&LmmSpec::new("a", &["fuptime"], &["fuptime"]), &ds).unwrap();
    assert_eq!(single, direct);
}

#[test]
fn summary_columns_and_missing_covariate() {
    let s = "id,time,event\n1,3,1\n2,4,0\n3,5,1\n4,6,0\n5,7,1\n";
    let l = "id,fuptime,a,b\n\
1,0,1.0,2.0\n1,1,1.5,2.4\n1,2,2.2,3.1\n\
2,0,0.2,\n2,1,0.9,\n\
3,0,2.0,1.0\n3,1,2.1,1.2\n3,2,2.9,1.9\n\
4,0,1.1,0.5\n4,1,1.4,0.9\n\
5,0,0.7,1.5\n5,1,1.6,2.2\n5,2,2.0,2.0\n";
    let ds = dataset(s, l, &Default::default());
    let names: Vec<String> = vec!["a".into(), "b".into()];
    let fixed = vec!["fuptime".to_string()];
    let fits: Vec<_> = fit_all_lmms(&ds, &names, &fixed, &[], 1)
        .into_iter()
        .map(|f| f.unwrap())
        .collect();
    let summary = summarize_lmms(&fits, &ds, true).unwrap();
    assert_eq!(summary.columns, vec!["a_b_int".to_string(), "b_b_int".to_string()]);
    assert_eq!(summary.values.shape(), (5, 2));
    // subject 2 has no value of b
    assert_eq!(summary.values[(1, 1)], 0.0);
    assert_ne!(summary.values[(1, 0)], 0.0);

    let groups = ds.rows_by_subject();
    let rows: Vec<_> = groups[0].iter().map(|&j| &ds.longitudinal[j]).collect();
    let direct = predict_random_effects(&fits[0], &rows).unwrap();
    assert_eq!(summary.values[(0, 0)], direct[0]);
}

#[test]
fn slope_names_follow_terms() {
    let (ds, _) = lmm_toy(1, 6, 4);
    let fit = fit_lmm(&slope_spec(), &ds).unwrap();
    assert_eq!(fit.ranef_names(), vec!["y_b_int".to_string(), "y_b_fuptime".to_string()]);
    let row = &fit.t_table[1];
    assert_eq!(row.term, "fuptime");
    let n_obs = ds.longitudinal.len() as f64;
    assert_eq!(row.df, n_obs - 6.0 - 1.0);
    assert!(fit.d.symmetric_eigen().eigenvalues.iter().all(|&e| e >= -1e-12));
}
