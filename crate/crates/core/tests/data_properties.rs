mod common;

use common::dataset;
use dynpred::data::{kaplan_meier, load_dataset, Schema};
use proptest::prelude::*;

/// Survival and longitudinal CSV for `times.len()` subjects with the given
/// visit times per subject.
fn csv(times: &[(f64, bool)], visits: &[Vec<f64>]) -> (String, String) {
    let mut s = String::from("id,time,event,age,sex\n");
    let mut l = String::from("id,fuptime,y,z\n");
    for (i, (t, e)) in times.iter().enumerate() {
        let sex = if i % 3 == 0 { "male" } else { "female" };
        s.push_str(&format!("{},{},{},{},{}\n", i + 1, t, *e as u8, 40.0 + i as f64, sex));
        for (j, v) in visits[i].iter().enumerate() {
            let z = if j % 2 == 0 { format!("{}", 1.0 + v) } else { String::new() };
            l.push_str(&format!("{},{},{},{}\n", i + 1, v, 2.0 * v - 1.0, z));
        }
    }
    (s, l)
}

fn cohort() -> impl Strategy<Value = (Vec<(f64, bool)>, Vec<Vec<f64>>)> {
    prop::collection::vec((0.1f64..10.0, any::<bool>(), prop::collection::vec(0.0f64..6.0, 1..5)), 2..25).prop_map(
        |rows| {
            let times = rows.iter().map(|(t, e, _)| ((t * 100.0).round() / 100.0, *e)).collect();
            let visits = rows
                .into_iter()
                .map(|(_, _, mut v)| {
                    v[0] = 0.0;
                    v.iter().map(|x| (x * 100.0).round() / 100.0).collect()
                })
                .collect();
            (times, visits)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn landmark_bounds_and_idempotence((times, visits) in cohort(), tl in 0.5f64..4.0) {
        let (s, l) = csv(&times, &visits);
        let ds = dataset(&s, &l, &Schema::default());
        if let Ok(lm) = ds.apply_landmark(tl) {
            prop_assert!(lm.survival.iter().all(|r| r.time > tl));
            prop_assert!(lm.longitudinal.iter().all(|r| r.fuptime <= tl));
            prop_assert_eq!(lm.landmark, Some(tl));
            let again = lm.apply_landmark(tl).unwrap();
            prop_assert_eq!(&again, &lm);
        }
    }

    #[test]
    fn csv_roundtrip((times, visits) in cohort()) {
        let (s, l) = csv(&times, &visits);
        let ds = dataset(&s, &l, &Schema::default());
        let (mut s2, mut l2) = (Vec::new(), Vec::new());
        ds.write_survival_csv(&mut s2).unwrap();
        ds.write_longitudinal_csv(&mut l2).unwrap();
        let back = load_dataset(&s2[..], &l2[..], &ds.roundtrip_schema()).unwrap();
        prop_assert_eq!(&back.survival, &ds.survival);
        prop_assert_eq!(&back.longitudinal, &ds.longitudinal);
        prop_assert_eq!(&back.covariate_names, &ds.covariate_names);
        prop_assert_eq!(&back.baseline_columns, &ds.baseline_columns);
    }

    #[test]
    fn kaplan_meier_is_a_survival_curve(obs in prop::collection::vec((0.0f64..10.0, any::<bool>()), 1..60)) {
        let times: Vec<f64> = obs.iter().map(|o| (o.0 * 4.0).round() / 4.0).collect();
        let events: Vec<bool> = obs.iter().map(|o| o.1).collect();
        let km = kaplan_meier(&times, &events).unwrap();
        let mut prev = 1.0;
        for &v in km.values() {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!(v <= prev);
            prev = v;
        }
        for w in km.knots().windows(2) {
            prop_assert!(w[0] < w[1]);
        }
    }

    #[test]
    fn kaplan_meier_without_censoring_is_empirical(raw in prop::collection::vec(0.0f64..10.0, 1..60)) {
        let times: Vec<f64> = raw.iter().map(|t| (t * 4.0).round() / 4.0).collect();
        let events = vec![true; times.len()];
        let km = kaplan_meier(&times, &events).unwrap();
        let n = times.len() as f64;
        for &t in &times {
            let emp = times.iter().filter(|&&u| u > t).count() as f64 / n;
            prop_assert!((km.eval(t) - emp).abs() < 1e-12);
        }
    }
}

#[test]
fn log_transform_keeps_missing_cells() {
    let (s, l) = csv(&[(5.0, true), (6.0, false)], &[vec![0.0, 1.0], vec![0.0, 2.0]]);
    let ds = dataset(&s, &l, &Schema::default());
    let out = ds.log_transform(&["z"]).unwrap();
    assert_eq!(out.covariate_names, vec!["y".to_string(), "logZ".to_string()]);
    let z = out.covariate_index("logZ").unwrap();
    assert_eq!(out.longitudinal[0].values[z], Some(0.0));
    assert_eq!(out.longitudinal[1].values[z], None);
}

#[test]
fn landmark_beyond_all_times_is_an_error() {
    let (s, l) = csv(&[(1.0, true), (1.5, false)], &[vec![0.0], vec![0.0]]);
    let ds = dataset(&s, &l, &Schema::default());
    assert!(ds.apply_landmark(3.0).is_err());
    let lm = ds.apply_landmark(1.2).unwrap();
    assert!(lm.apply_landmark(1.0).is_err());
}
