//! Command-line front end: TOML run configuration, flag overrides and the
//! `fit`, `predict`, `validate`, `simulate` and `bench` commands.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::{results_csv, run_bench, summarize, BenchConfig};
use crate::bundle::{
    coefficient_rows, f, hash_text, hazard_rows, lmm_summary_rows, load_bundle, save_bundle, write_csv,
    BundleError, DatasetTemplate, Manifest, COEF_HEADER, HAZARD_HEADER, LMM_SUMMARY_HEADER,
};
use crate::cbocp::{correct_optimism, BootstrapConfig};
use crate::cox::{predict_survival_new_subjects, PenaltyKind, PenaltySpec};
use crate::data::{load_baseline_rows, load_dataset_from_paths, load_longitudinal_rows, log_name, Dataset, Schema};
use crate::metrics::Metric;
use crate::pipeline::{fit_prc, PipelineConfig, PipelineError, PrcModel};
use crate::sim::{simulate_prclmm_data, SimConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// Short machine-readable error class.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Pipeline(PipelineError::Metric { .. }) => "metric",
            CliError::Pipeline(PipelineError::Data(_) | PipelineError::NotLandmarked) => "data",
            CliError::Pipeline(_) => "model",
            CliError::Bundle(_) => "bundle",
            CliError::Io { .. } => "io",
        }
    }
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "dynpred", version, about = "Dynamic survival prediction from longitudinal covariates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit the model and write the model bundle and coefficient tables.
    Fit,
    /// Predict survival for training or new subjects from a saved bundle.
    Predict,
    /// Fit and estimate (optimism-corrected) predictive performance.
    Validate,
    /// Write a simulated dataset.
    Simulate,
    /// Time the pipeline over a grid of n, p, B or worker counts.
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Bench => "bench",
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub survival: Option<PathBuf>,
    #[arg(long, global = true)]
    pub longitudinal: Option<PathBuf>,
    #[arg(long, global = true)]
    pub landmark: Option<f64>,
    #[arg(long, global = true)]
    pub penalty: Option<PenaltyKind>,
    #[arg(long = "n-boots", global = true)]
    pub n_boots: Option<usize>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub metric: Option<Vec<Metric>>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "new-longitudinal", global = true)]
    pub new_longitudinal: Option<PathBuf>,
    #[arg(long = "new-baseline", global = true)]
    pub new_baseline: Option<PathBuf>,
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub survival: Option<PathBuf>,
    pub longitudinal: Option<PathBuf>,
    pub out: PathBuf,
    /// Bundle directory read by `predict`; defaults to `<out>/model`.
    pub model: Option<PathBuf>,
    pub new_longitudinal: Option<PathBuf>,
    pub new_baseline: Option<PathBuf>,
    pub schema: Schema,
    pub landmark: Option<f64>,
    /// Covariates to log-transform before modelling (renamed `logX`).
    pub log_transform: Vec<String>,
    /// Modelled covariates (after renaming); all covariates when empty.
    pub y_names: Vec<String>,
    pub fixed_terms: Vec<String>,
    pub random_terms: Vec<String>,
    /// Baseline covariates entering the Cox model; all when absent.
    pub baseline: Option<Vec<String>>,
    pub penalty: PenaltySpec,
    pub standardize: bool,
    pub allow_unconverged: bool,
    pub times: Vec<f64>,
    pub metrics: Vec<Metric>,
    pub n_boots: usize,
    pub seed: u64,
    pub workers: usize,
    pub simulate: SimConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            survival: None,
            longitudinal: None,
            out: PathBuf::from("out"),
            model: None,
            new_longitudinal: None,
            new_baseline: None,
            schema: Schema::default(),
            landmark: None,
            log_transform: vec![],
            y_names: vec![],
            fixed_terms: vec!["fuptime".into()],
            random_terms: vec!["fuptime".into()],
            baseline: None,
            penalty: PenaltySpec::default(),
            standardize: true,
            allow_unconverged: false,
            times: vec![],
            metrics: Metric::ALL.to_vec(),
            n_boots: 0,
            seed: 1,
            workers: 1,
            simulate: SimConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Parses TOML config text, applies command-line overrides and validates
/// the result.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let de = toml::Deserializer::new(text);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        if path.is_empty() || path == "." {
            CliError::Config(msg)
        } else {
            CliError::Config(format!("at `{path}`: {msg}"))
        }
    })?;
    let o = overrides;
    if let Some(v) = &o.survival {
        cfg.survival = Some(v.clone());
    }
    if let Some(v) = &o.longitudinal {
        cfg.longitudinal = Some(v.clone());
    }
    if let Some(v) = o.landmark {
        cfg.landmark = Some(v);
    }
    if let Some(v) = o.penalty {
        cfg.penalty.kind = v;
    }
    if let Some(v) = o.n_boots {
        cfg.n_boots = v;
    }
    if let Some(v) = o.workers {
        cfg.workers = v;
    }
    if let Some(v) = o.seed {
        cfg.seed = v;
        cfg.penalty.seed = v;
        cfg.simulate.seed = v;
        cfg.bench.sim.seed = v;
    }
    if let Some(v) = &o.times {
        cfg.times = v.clone();
    }
    if let Some(v) = &o.metric {
        cfg.metrics = v.clone();
    }
    if let Some(v) = &o.out {
        cfg.out = v.clone();
    }
    if let Some(v) = &o.new_longitudinal {
        cfg.new_longitudinal = Some(v.clone());
    }
    if let Some(v) = &o.new_baseline {
        cfg.new_baseline = Some(v.clone());
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    if let Some(tl) = cfg.landmark {
        if !(tl > 0.0) {
            return Err(CliError::Config(format!("landmark must be positive, got {tl}")));
        }
        if let Some(&t) = cfg.times.iter().find(|&&t| !(t > tl)) {
            return Err(CliError::Config(format!(
                "evaluation time {t} must be later than the landmark {tl}"
            )));
        }
    }
    if cfg.workers == 0 {
        return Err(CliError::Config("workers must be at least 1".into()));
    }
    for p in [&cfg.survival, &cfg.longitudinal, &cfg.new_longitudinal, &cfg.new_baseline]
        .into_iter()
        .flatten()
    {
        if !p.exists() {
            return Err(CliError::Config(format!("file {} does not exist", p.display())));
        }
    }
    if cfg.new_longitudinal.is_some() != cfg.new_baseline.is_some() {
        return Err(CliError::Config(
            "new_longitudinal and new_baseline must be given together".into(),
        ));
    }
    cfg.penalty.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(())
}

impl RunConfig {
    fn require<'a, T>(&self, v: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
        v.as_ref()
            .ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn hash(&self) -> String {
        hash_text(&self.to_toml())
    }

    /// Loads, transforms and landmarks the training data.
    pub fn load_training(&self) -> Result<Dataset, CliError> {
        let s = self.require(&self.survival, "survival")?;
        let l = self.require(&self.longitudinal, "longitudinal")?;
        let tl = *self.require(&self.landmark, "landmark")?;
        let ds = load_dataset_from_paths(s, l, &self.schema).map_err(|e| CliError::Data(e.to_string()))?;
        let vars: Vec<&str> = self.log_transform.iter().map(|s| s.as_str()).collect();
        let ds = ds.log_transform(&vars).map_err(|e| CliError::Data(e.to_string()))?;
        ds.apply_landmark(tl).map_err(|e| CliError::Data(e.to_string()))
    }

    pub fn pipeline(&self, dataset: &Dataset) -> PipelineConfig {
        let y_names = if self.y_names.is_empty() {
            dataset.covariate_names.clone()
        } else {
            self.y_names.clone()
        };
        let baseline = self
            .baseline
            .clone()
            .unwrap_or_else(|| dataset.baseline_columns.iter().map(|c| c.name.clone()).collect());
        PipelineConfig {
            y_names,
            fixed_terms: self.fixed_terms.clone(),
            random_terms: self.random_terms.clone(),
            baseline_formula: baseline,
            penalty: PenaltySpec {
                seed: self.seed,
                ..self.penalty.clone()
            },
            standardize: self.standardize,
            allow_unconverged: self.allow_unconverged,
        }
    }

    pub fn model_dir(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model"))
    }
}

fn time_label(t: f64) -> String {
    format!("S({t})")
}

/// `id,S(t1),...` table.
pub fn predictions_csv(ids: &[String], times: &[f64], surv: &DMatrix<f64>) -> String {
    let mut s = String::from("id");
    for &t in times {
        s.push(',');
        s.push_str(&time_label(t));
    }
    s.push('\n');
    for (i, id) in ids.iter().enumerate() {
        s.push_str(id);
        for j in 0..times.len() {
            s.push(',');
            s.push_str(&f(surv[(i, j)]));
        }
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io(path))
}

fn write_manifest(cfg: &RunConfig, command: Command, files: &[String]) -> Result<(), CliError> {
    #[derive(Serialize)]
    struct RunManifest<'a> {
        command: &'a str,
        crate_version: &'a str,
        config_hash: String,
        seed: u64,
        workers: usize,
        files: &'a [String],
    }
    let m = RunManifest {
        command: command.name(),
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        workers: cfg.workers,
        files,
    };
    let path = cfg.out.join("manifest.toml");
    write_file(&path, &toml::to_string(&m).unwrap_or_default())
}

fn ids_of(ds: &Dataset) -> Vec<String> {
    ds.survival.iter().map(|r| r.id.0.clone()).collect()
}

fn fit_and_save(cfg: &RunConfig, data: &Dataset, files: &mut Vec<String>) -> Result<PrcModel, CliError> {
    let pipeline = cfg.pipeline(data);
    let model = fit_prc(data, &pipeline, cfg.workers)?;
    let dir = cfg.model_dir();
    save_bundle(&dir, &model, &DatasetTemplate::from_dataset(data), Manifest::new(&cfg.hash(), cfg.seed))?;
    let shown = dir.strip_prefix(&cfg.out).unwrap_or(&dir);
    files.push(shown.display().to_string());
    let out = &cfg.out;
    write_csv(&out.join("coefficients.csv"), &COEF_HEADER, &coefficient_rows(&model.cox))?;
    write_csv(&out.join("lmm_summary.csv"), &LMM_SUMMARY_HEADER, &lmm_summary_rows(&model.lmm_fits))?;
    write_csv(&out.join("baseline_hazard.csv"), &HAZARD_HEADER, &hazard_rows(&model.cox.baseline_hazard))?;
    files.extend(["coefficients.csv", "lmm_summary.csv", "baseline_hazard.csv"].map(String::from));
    Ok(model)
}

/// Runs one command; returns the files written (relative to `out`).
pub fn execute(command: Command, cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    fs::create_dir_all(&cfg.out).map_err(io(&cfg.out))?;
    info!("effective configuration:\n{}", cfg.to_toml());
    let mut files = Vec::new();
    match command {
        Command::Fit => {
            let data = cfg.load_training()?;
            let model = fit_and_save(cfg, &data, &mut files)?;
            if !cfg.times.is_empty() {
                let surv = model.predict(&data, &cfg.times)?;
                write_file(&cfg.out.join("predictions.csv"), &predictions_csv(&ids_of(&data), &cfg.times, &surv))?;
                files.push("predictions.csv".into());
            }
        }
        Command::Predict => {
            if cfg.times.is_empty() {
                return Err(CliError::Config("missing required key `times`".into()));
            }
            let (model, template, _) = load_bundle(&cfg.model_dir())?;
            if let Some(tl) = template.landmark {
                if let Some(&t) = cfg.times.iter().find(|&&t| !(t > tl)) {
                    return Err(CliError::Config(format!(
                        "evaluation time {t} must be later than the landmark {tl}"
                    )));
                }
            }
            let (ids, surv) = match (&cfg.new_longitudinal, &cfg.new_baseline) {
                (Some(lp), Some(bp)) => {
                    let long = load_new_longitudinal(lp, &template, cfg)?;
                    let base = load_baseline_rows(fs::File::open(bp).map_err(io(bp))?, &template.schema, &template.baseline_columns)
                        .map_err(|e| CliError::Data(e.to_string()))?;
                    let surv = predict_survival_new_subjects(&model.lmm_fits, &model.cox, &long, &base, &cfg.times)
                        .map_err(PipelineError::from)?;
                    (base.iter().map(|b| b.id.0.clone()).collect(), surv)
                }
                _ => {
                    let data = cfg.load_training()?;
                    let surv = model.predict(&data, &cfg.times)?;
                    (ids_of(&data), surv)
                }
            };
            write_file(&cfg.out.join("predictions.csv"), &predictions_csv(&ids, &cfg.times, &surv))?;
            files.push("predictions.csv".into());
        }
        Command::Validate => {
            if cfg.times.is_empty() {
                return Err(CliError::Config("missing required key `times`".into()));
            }
            let data = cfg.load_training()?;
            let model = fit_and_save(cfg, &data, &mut files)?;
            let pipeline = model.config.clone();
            let naive = model.evaluate(&data, &cfg.metrics, &cfg.times)?;
            let mut table = String::from("metric,pred_time,value\n");
            let mut k = 0;
            for m in &cfg.metrics {
                for t in &cfg.times {
                    table.push_str(&format!("{},{},{}\n", m.label(), t, f(naive[k])));
                    k += 1;
                }
            }
            write_file(&cfg.out.join("metrics.csv"), &table)?;
            let boot = BootstrapConfig {
                n_boots: cfg.n_boots,
                seed: cfg.seed,
                workers: cfg.workers,
            };
            let mut report = correct_optimism(&data, &pipeline, &cfg.metrics, &cfg.times, &boot, &naive)?;
            report.config_hash = Some(cfg.hash());
            write_file(&cfg.out.join("performance.csv"), &report.to_csv())?;
            files.extend(["metrics.csv", "performance.csv"].map(String::from));
        }
        Command::Simulate => {
            let (data, truth) = simulate_prclmm_data(&cfg.simulate).map_err(|e| CliError::Config(e.to_string()))?;
            let sp = cfg.out.join("survival.csv");
            data.write_survival_csv(fs::File::create(&sp).map_err(io(&sp))?)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let lp = cfg.out.join("longitudinal.csv");
            data.write_longitudinal_csv(fs::File::create(&lp).map_err(io(&lp))?)
                .map_err(|e| CliError::Data(e.to_string()))?;
            let mut header = vec!["id".to_string()];
            for s in cfg.simulate.y_names() {
                header.push(format!("{s}_u_int"));
                header.push(format!("{s}_u_fuptime"));
            }
            header.push("linear_predictor".into());
            header.push("event_time".into());
            let rows: Vec<Vec<String>> = (0..data.n_subjects())
                .map(|i| {
                    let mut r = vec![data.survival[i].id.0.clone()];
                    r.extend(truth.random_effects.row(i).iter().map(|v| f(*v)));
                    r.push(f(truth.linear_predictor[i]));
                    r.push(f(truth.event_times[i]));
                    r
                })
                .collect();
            let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            write_csv(&cfg.out.join("truth.csv"), &h, &rows)?;
            files.extend(["survival.csv", "longitudinal.csv", "truth.csv"].map(String::from));
        }
        Command::Bench => {
            let mut bc = cfg.bench.clone();
            bc.workers = cfg.workers;
            if cfg.n_boots > 0 {
                bc.n_boots = cfg.n_boots;
            }
            let results = run_bench(&bc);
            write_file(&cfg.out.join("bench.csv"), &results_csv(&results))?;
            let mut s = String::from("axis,value,median_s,mean_s\n");
            for (v, med, mean) in summarize(&results) {
                s.push_str(&format!("{},{},{},{}\n", bc.axis, v, med, mean));
            }
            write_file(&cfg.out.join("bench_summary.csv"), &s)?;
            info!("bench environment: {}", crate::bench::environment());
            files.extend(["bench.csv", "bench_summary.csv"].map(String::from));
        }
    }
    write_manifest(cfg, command, &files)?;
    Ok(files)
}

/// Reads prediction-time measurements under their raw names and applies the
/// configured log transform.
fn load_new_longitudinal(
    path: &Path,
    template: &DatasetTemplate,
    cfg: &RunConfig,
) -> Result<Vec<crate::data::LongitudinalRecord>, CliError> {
    let mut raw = template.empty_dataset();
    for var in &cfg.log_transform {
        let logged = log_name(var);
        if let Some(c) = raw.covariate_names.iter().position(|n| *n == logged) {
            raw.covariate_names[c] = var.clone();
        }
    }
    if let Some(names) = raw.schema.longitudinal.as_mut() {
        *names = raw.covariate_names.clone();
    }
    let rows = load_longitudinal_rows(fs::File::open(path).map_err(io(path))?, &raw)
        .map_err(|e| CliError::Data(e.to_string()))?;
    if cfg.log_transform.is_empty() {
        return Ok(rows);
    }
    raw.longitudinal = rows;
    let vars: Vec<&str> = cfg.log_transform.iter().map(|s| s.as_str()).collect();
    let logged = raw.log_transform(&vars).map_err(|e| CliError::Data(e.to_string()))?;
    Ok(logged.longitudinal)
}

/// Entry point shared by the binary; returns the process exit code.
pub fn run(args: impl IntoIterator<Item = std::ffi::OsString>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let text = match &cli.overrides.config {
        Some(p) => match fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error[io]: {}: {e}", p.display());
                return 1;
            }
        },
        None => String::new(),
    };
    let result = parse_config(&text, &cli.overrides).and_then(|cfg| execute(cli.command, &cfg));
    match result {
        Ok(files) => {
            info!("wrote {}", files.join(", "));
            0
        }
        Err(e) => {
            warn!("{} failed", cli.command.name());
            eprintln!("error[{}]: {e}", e.class());
            1
        }
    }
}
