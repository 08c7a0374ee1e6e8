use std::collections::HashSet;

use dynpred::cbocp::{
    correct_optimism, replicate_rng, resample_clusters_with_sources, run_cbocp, BootstrapConfig, NO_BOOTSTRAP_WARNING,
};
use dynpred::metrics::Metric;
use dynpred::pipeline::PipelineConfig;
use dynpred::sim::{simulate_prclmm_data, SimConfig};
use dynpred::Dataset;

fn sim(n: usize, p: usize, seed: u64) -> Dataset {
    let cfg = SimConfig {
        n,
        p,
        p_relevant: p.min(2),
        seed,
        ..Default::default()
    };
    simulate_prclmm_data(&cfg).unwrap().0.apply_landmark(2.0).unwrap()
}

fn pipeline(p: usize) -> PipelineConfig {
    let names: Vec<String> = (1..=p).map(|s| format!("y{s}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut cfg = PipelineConfig::new(&refs, &["fuptime"], &["fuptime"], &["x1"]);
    cfg.penalty.n_folds = 5;
    cfg
}

#[test]
fn resamples_keep_about_63_percent_of_subjects() {
    let ds = sim(100, 1, 1);
    let trials = 10_000;
    let mut distinct = 0usize;
    for b in 0..trials {
        let mut rng = replicate_rng(5, b);
        let (boot, sources) = resample_clusters_with_sources(&ds, &mut rng);
        assert_eq!(boot.n_subjects(), 100);
        distinct += sources.iter().collect::<HashSet<_>>().len();
    }
    let frac = distinct as f64 / (trials as f64 * 100.0);
    let expected = 1.0 - 0.99f64.powi(100);
    assert!((frac - expected).abs() < 0.01, "{frac} vs {expected}");
}

#[test]
fn resampled_clusters_copy_rows_under_fresh_ids() {
    let ds = sim(20, 2, 3);
    let mut rng = replicate_rng(1, 0);
    let (boot, sources) = resample_clusters_with_sources(&ds, &mut rng);
    let groups = ds.rows_by_subject();
    let bgroups = boot.rows_by_subject();
    for (k, &src) in sources.iter().enumerate() {
        let rec = &boot.survival[k];
        assert_eq!(rec.id.0, format!("b{}", k + 1));
        assert_eq!(rec.time, ds.survival[src].time);
        assert_eq!(rec.event, ds.survival[src].event);
        assert_eq!(bgroups[k].len(), groups[src].len());
        for (&a, &b) in bgroups[k].iter().zip(&groups[src]) {
            assert_eq!(boot.longitudinal[a].values, ds.longitudinal[b].values);
            assert_eq!(boot.longitudinal[a].fuptime, ds.longitudinal[b].fuptime);
        }
    }
    let ids: HashSet<_> = boot.survival.iter().map(|r| r.id.clone()).collect();
    assert_eq!(ids.len(), 20);

    let one = ds.subset(&[ds.survival[0].id.clone()]);
    let (b1, s1) = resample_clusters_with_sources(&one, &mut rng);
    assert_eq!(s1, vec![0]);
    assert_eq!(b1.longitudinal.len(), one.longitudinal.len());
}

#[test]
fn replicate_streams_are_reproducible_and_distinct() {
    let ds = sim(30, 1, 4);
    let draw = |seed, b| resample_clusters_with_sources(&ds, &mut replicate_rng(seed, b)).1;
    assert_eq!(draw(7, 3), draw(7, 3));
    assert_ne!(draw(7, 3), draw(7, 4));
    assert_ne!(draw(7, 3), draw(8, 3));
}

#[test]
fn report_is_worker_independent() {
    let ds = sim(40, 2, 6);
    let cfg = pipeline(2);
    let times = [3.0, 4.0];
    let run = |workers| {
        let boot = BootstrapConfig {
            n_boots: 4,
            seed: 9,
            workers,
        };
        run_cbocp(&ds, &cfg, &Metric::ALL, &times, &boot).unwrap().0.to_csv()
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(1));
}

#[test]
fn adjusted_is_naive_plus_optimism() {
    let ds = sim(50, 2, 8);
    let boot = BootstrapConfig {
        n_boots: 5,
        seed: 2,
        workers: 1,
    };
    let (report, _) = run_cbocp(&ds, &pipeline(2), &Metric::ALL, &[3.0, 5.0], &boot).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert!(report.effective_b >= 1 && report.effective_b <= 5);
    for r in &report.rows {
        let (o, a) = (r.optimism.unwrap(), r.adjusted.unwrap());
        assert!((a - r.naive - o).abs() < 1e-12);
    }
    assert!(report.row(Metric::Brier, 5.0).is_some());
}

#[test]
fn zero_replicates_reports_naive_only() {
    let ds = sim(40, 1, 10);
    let cfg = pipeline(1);
    let boot = BootstrapConfig {
        n_boots: 0,
        seed: 1,
        workers: 1,
    };
    let (report, model) = run_cbocp(&ds, &cfg, &[Metric::TdAuc], &[3.0], &boot).unwrap();
    assert_eq!(report.warnings, vec![NO_BOOTSTRAP_WARNING.to_string()]);
    assert_eq!(report.effective_b, 0);
    let row = &report.rows[0];
    assert!(row.optimism.is_none() && row.adjusted.is_none());
    assert_eq!(row.naive, model.evaluate(&ds, &[Metric::TdAuc], &[3.0]).unwrap()[0]);
    let csv = report.to_csv();
    assert!(csv.lines().nth(1).unwrap().contains(",,"), "{csv}");
}

#[test]
fn correction_lowers_apparent_discrimination() {
    let mut lowered = 0;
    let seeds = 20;
    for seed in 0..seeds {
        let ds = sim(60, 4, 200 + seed);
        let cfg = pipeline(4);
        let times = [4.0];
        let model = dynpred::pipeline::fit_prc(&ds, &cfg, 1).unwrap();
        let naive = model.evaluate(&ds, &[Metric::TdAuc], &times).unwrap();
        let boot = BootstrapConfig {
            n_boots: 5,
            seed,
            workers: 1,
        };
        let report = correct_optimism(&ds, &cfg, &[Metric::TdAuc], &times, &boot, &naive).unwrap();
        if report.rows[0].optimism.is_some_and(|o| o < 0.0) {
            lowered += 1;
        }
    }
    assert!(lowered > seeds / 2, "optimism negative in only {lowered} of {seeds} runs");
}
