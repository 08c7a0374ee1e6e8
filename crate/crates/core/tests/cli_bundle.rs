use std::fs;
use std::path::Path;
use std::process::Command as Process;

use dynpred::bundle::{load_bundle, save_bundle, DatasetTemplate, Manifest};
use dynpred::cli::{execute, parse_config, CliError, Command, Overrides, RunConfig};
use dynpred::cox::{predict_survival_new_subjects, PenaltyKind};
use dynpred::data::load_baseline_rows;
use dynpred::pipeline::{fit_prc, PipelineConfig};
use dynpred::sim::{simulate_prclmm_data, SimConfig};

fn simulate_into(dir: &Path, n: usize, seed: u64) {
    let cfg = parse_config(
        &format!("out = {:?}\n[simulate]\nn = {n}\np = 2\nseed = {seed}\n", dir.display().to_string()),
        &Overrides::default(),
    )
    .unwrap();
    execute(Command::Simulate, &cfg).unwrap();
}

fn run_config(data: &Path, out: &Path, extra: &str) -> String {
    format!(
        "survival = {:?}\nlongitudinal = {:?}\nout = {:?}\nlandmark = 2.0\nbaseline = [\"x1\"]\n{extra}\n[penalty]\nn_folds = 5\n",
        data.join("survival.csv").display().to_string(),
        data.join("longitudinal.csv").display().to_string(),
        out.display().to_string(),
    )
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn empty_config_takes_defaults() {
    let cfg = parse_config("", &Overrides::default()).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.fixed_terms, vec!["fuptime"]);
    assert_eq!(cfg.penalty.kind, PenaltyKind::Ridge);
    assert_eq!(cfg.penalty.n_lambda, 100);
    assert_eq!(cfg.metrics.len(), 3);
    assert_eq!(cfg.model_dir(), Path::new("out").join("model"));
}

#[test]
fn overrides_take_precedence() {
    let o = Overrides {
        landmark: Some(3.0),
        seed: Some(42),
        penalty: Some(PenaltyKind::Lasso),
        times: Some(vec![4.0, 5.0]),
        ..Default::default()
    };
    let cfg = parse_config("landmark = 2.0\nseed = 7\ntimes = [2.5]\n", &o).unwrap();
    assert_eq!(cfg.landmark, Some(3.0));
    assert_eq!(cfg.times, vec![4.0, 5.0]);
    assert_eq!((cfg.seed, cfg.penalty.seed, cfg.simulate.seed), (42, 42, 42));
    assert_eq!(cfg.penalty.kind, PenaltyKind::Lasso);
}

#[test]
fn invalid_configs_are_reported() {
    let err = |text: &str| parse_config(text, &Overrides::default()).unwrap_err();
    let e = err("landmark = 2.0\ntimes = [1.5, 3.0]\n");
    assert!(matches!(e, CliError::Config(_)));
    assert!(e.to_string().contains("1.5") && e.to_string().contains("later than the landmark"), "{e}");
    assert!(err("[penalty]\nnfolds = 3\n").to_string().contains("penalty"));
    assert!(err("[simulate]\nn = \"ten\"\n").to_string().contains("simulate.n"));
    assert!(err("landmark = -1.0\n").to_string().contains("positive"));
    assert!(err("workers = 0\n").to_string().contains("workers"));
    assert!(err("survival = \"/no/such/file.csv\"\n").to_string().contains("does not exist"));
    assert_eq!(err("workers = 0\n").class(), "config");
}

#[test]
fn fit_predict_validate_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate_into(&data, 60, 3);
    for f in ["survival.csv", "longitudinal.csv", "truth.csv", "manifest.toml"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let truth = read(&data.join("truth.csv"));
    assert!(truth.starts_with("id,y1_u_int,y1_u_fuptime,y2_u_int,y2_u_fuptime,linear_predictor,event_time\n"));

    let out = tmp.path().join("fit");
    let text = run_config(&data, &out, "times = [3.0, 4.5]");
    let cfg = parse_config(&text, &Overrides::default()).unwrap();
    let files = execute(Command::Fit, &cfg).unwrap();
    assert!(files.contains(&"model".to_string()));
    let fitted = read(&out.join("predictions.csv"));
    assert!(fitted.starts_with("id,S(3),S(4.5)\n"));
    assert_eq!(fitted.lines().count(), 61);
    let coef = read(&out.join("coefficients.csv"));
    assert!(coef.contains("x1") && coef.contains("y1_b_int") && coef.contains("y2_b_fuptime"));

    // predict from the bundle for the training subjects and as new subjects
    execute(Command::Predict, &cfg).unwrap();
    assert_eq!(read(&out.join("predictions.csv")), fitted);
    let o = Overrides {
        new_longitudinal: Some(data.join("longitudinal.csv")),
        new_baseline: Some(data.join("survival.csv")),
        ..Default::default()
    };
    let cfg_new = parse_config(&text, &o).unwrap();
    execute(Command::Predict, &cfg_new).unwrap();
    assert_eq!(read(&out.join("predictions.csv")), fitted);

    let early = Overrides {
        times: Some(vec![1.0]),
        ..Default::default()
    };
    let no_landmark = run_config(&data, &out, "").replace("landmark = 2.0\n", "");
    let cfg_early = parse_config(&no_landmark, &early).unwrap();
    let e = execute(Command::Predict, &cfg_early).unwrap_err();
    assert!(e.to_string().contains("later than the landmark 2"), "{e}");

    // validate without bootstrap: naive values only
    execute(Command::Validate, &cfg).unwrap();
    let perf = read(&out.join("performance.csv"));
    let lines: Vec<&str> = perf.lines().collect();
    assert_eq!(lines.len(), 1 + 3 * 2);
    for l in &lines[1..] {
        assert!(l.contains(",,,0"), "{l}");
    }
    let metrics = read(&out.join("metrics.csv"));
    assert!(metrics.starts_with("metric,pred_time,value\ntdAUC,3,"));
    let manifest = read(&out.join("manifest.toml"));
    assert!(manifest.contains("command = \"validate\"") && manifest.contains(&cfg.hash()));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    simulate_into(&data, 40, 8);
    let out = tmp.path().join("v");
    let cfg = parse_config(&run_config(&data, &out, "times = [3.0]\nn_boots = 2\nseed = 4"), &Overrides::default()).unwrap();
    let names = ["performance.csv", "metrics.csv", "coefficients.csv", "manifest.toml", "model/coefficients.csv", "model/cv_curve.csv"];
    execute(Command::Validate, &cfg).unwrap();
    let first: Vec<String> = names.iter().map(|n| read(&out.join(n))).collect();
    execute(Command::Validate, &cfg).unwrap();
    let second: Vec<String> = names.iter().map(|n| read(&out.join(n))).collect();
    assert_eq!(first, second);
}

#[test]
fn bundle_roundtrip_preserves_predictions() {
    let sim = SimConfig {
        n: 50,
        p: 2,
        seed: 12,
        ..Default::default()
    };
    let ds = simulate_prclmm_data(&sim).unwrap().0.apply_landmark(2.0).unwrap();
    let mut config = PipelineConfig::new(&["y1", "y2"], &["fuptime"], &["fuptime"], &["x1"]);
    config.penalty.n_folds = 5;
    let model = fit_prc(&ds, &config, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("bundle");
    let template = DatasetTemplate::from_dataset(&ds);
    save_bundle(&dir, &model, &template, Manifest::new("abc", 12)).unwrap();
    let (back, tmpl, manifest) = load_bundle(&dir).unwrap();
    assert_eq!(back, model);
    assert_eq!(tmpl, template);
    assert_eq!((manifest.format.as_str(), manifest.version, manifest.seed), ("dynpred-model", 1, 12));
    let times = [2.5, 4.0, 7.0];
    assert_eq!(back.predict(&ds, &times).unwrap(), model.predict(&ds, &times).unwrap());

    // a training subject submitted as new data gets the same prediction
    let mut s = Vec::new();
    ds.write_survival_csv(&mut s).unwrap();
    let base = load_baseline_rows(&s[..], &ds.schema, &ds.baseline_columns).unwrap();
    let new = predict_survival_new_subjects(&back.lmm_fits, &back.cox, &ds.longitudinal, &base, &times).unwrap();
    assert_eq!(new, model.predict(&ds, &times).unwrap());

    fs::write(dir.join("manifest.toml"), "format = \"other\"\n").unwrap();
    assert!(load_bundle(&dir).is_err());
    assert!(load_bundle(&tmp.path().join("missing")).is_err());
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dynpred");
    let status = |args: &[&str]| Process::new(bin).args(args).output().unwrap();
    assert_eq!(status(&["--help"]).status.code(), Some(0));
    assert_eq!(status(&["frobnicate"]).status.code(), Some(2));
    let missing = status(&["fit", "--config", "/no/such/config.toml"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error[io]"));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().display().to_string();
    let nodata = status(&["fit", "--out", &out]);
    assert_eq!(nodata.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&nodata.stderr).contains("error[config]: missing required key `survival`"));
    let early = status(&["validate", "--landmark", "2", "--times", "1.5", "--out", &out]);
    assert_eq!(early.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&early.stderr).contains("later than the landmark"));
}
