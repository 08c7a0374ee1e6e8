//! Wall-time scaling of the estimation pipeline in sample size, number of
//! markers, bootstrap replicates and worker count.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::cbocp::{correct_optimism, BootstrapConfig};
use crate::metrics::Metric;
use crate::pipeline::{fit_prc_timed, PipelineConfig, PipelineError, StepTimes};
use crate::sim::{simulate_prclmm_data, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchAxis {
    #[serde(rename = "n")]
    N,
    #[serde(rename = "p")]
    P,
    #[serde(rename = "B")]
    B,
    #[serde(rename = "cores")]
    Cores,
}

impl fmt::Display for BenchAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchAxis::N => "n",
            BenchAxis::P => "p",
            BenchAxis::B => "B",
            BenchAxis::Cores => "cores",
        })
    }
}

impl FromStr for BenchAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "n" => Ok(BenchAxis::N),
            "p" => Ok(BenchAxis::P),
            "B" | "b" => Ok(BenchAxis::B),
            "cores" => Ok(BenchAxis::Cores),
            other => Err(format!("unknown bench axis `{other}` (expected n, p, B or cores)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub axis: BenchAxis,
    pub grid: Vec<usize>,
    pub reps: usize,
    /// Data settings; `n` and `p` are replaced on the matching axes.
    pub sim: SimConfig,
    pub n_boots: usize,
    pub workers: usize,
    pub eval_times: Vec<f64>,
    pub metrics: Vec<Metric>,
    /// Run one untimed cell before measuring.
    pub warmup: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            axis: BenchAxis::N,
            grid: vec![100, 200, 400, 600, 800, 1000],
            reps: 10,
            sim: SimConfig::default(),
            n_boots: 50,
            workers: 1,
            eval_times: vec![3.0, 4.0, 5.0],
            metrics: vec![Metric::TdAuc],
            warmup: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub axis: BenchAxis,
    pub value: usize,
    pub rep: usize,
    pub step1_s: f64,
    pub step2_s: f64,
    pub step3_s: f64,
    /// Naive metrics, or the bootstrap correction on the `B` and `cores` axes.
    pub metrics_s: f64,
    pub total_s: f64,
    pub error: Option<String>,
}

pub fn environment() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("cores={cores};profile={profile};version={}", env!("CARGO_PKG_VERSION"))
}

fn pipeline_for(sim: &SimConfig) -> PipelineConfig {
    let names = sim.y_names();
    PipelineConfig {
        y_names: names,
        fixed_terms: vec!["fuptime".into()],
        random_terms: vec!["fuptime".into()],
        baseline_formula: vec!["x1".into()],
        ..PipelineConfig::new(&[], &[], &[], &[])
    }
}

fn run_cell(cfg: &BenchConfig, value: usize, rep: usize) -> Result<(StepTimes, f64, f64), PipelineError> {
    let mut sim = cfg.sim.clone();
    let mut n_boots = 0;
    let mut workers = cfg.workers;
    match cfg.axis {
        BenchAxis::N => sim.n = value,
        BenchAxis::P => {
            sim.p = value;
            sim.p_relevant = sim.p_relevant.min(value);
        }
        BenchAxis::B => n_boots = value,
        BenchAxis::Cores => {
            n_boots = cfg.n_boots;
            workers = value;
        }
    }
    sim.seed = cfg.sim.seed.wrapping_add(rep as u64);
    let (data, _) = simulate_prclmm_data(&sim).map_err(|e| PipelineError::Data(e.to_string()))?;
    let landmark = sim.landmark.unwrap_or(0.0);
    let data = data.apply_landmark(if landmark > 0.0 { landmark } else { f64::MIN_POSITIVE })?;
    let config = pipeline_for(&sim);

    let start = Instant::now();
    let (model, steps) = fit_prc_timed(&data, &config, workers)?;
    let m0 = Instant::now();
    let naive = model.evaluate(&data, &cfg.metrics, &cfg.eval_times)?;
    if n_boots > 0 {
        let boot = BootstrapConfig {
            n_boots,
            seed: sim.seed,
            workers,
        };
        correct_optimism(&data, &config, &cfg.metrics, &cfg.eval_times, &boot, &naive)?;
    }
    let metrics_s = m0.elapsed().as_secs_f64();
    Ok((steps, metrics_s, start.elapsed().as_secs_f64()))
}

/// Runs every grid value `reps` times, sequentially.
pub fn run_bench(cfg: &BenchConfig) -> Vec<BenchResult> {
    if cfg.warmup {
        if let Some(&v) = cfg.grid.first() {
            let _ = run_cell(cfg, v, 0);
        }
    }
    let mut out = Vec::new();
    for &value in &cfg.grid {
        for rep in 0..cfg.reps {
            let row = match run_cell(cfg, value, rep) {
                Ok((s, metrics_s, total_s)) => BenchResult {
                    axis: cfg.axis,
                    value,
                    rep,
                    step1_s: s.step1,
                    step2_s: s.step2,
                    step3_s: s.step3,
                    metrics_s,
                    total_s,
                    error: None,
                },
                Err(e) => {
                    warn!("bench cell {}={value} rep {rep} failed: {e}", cfg.axis);
                    BenchResult {
                        axis: cfg.axis,
                        value,
                        rep,
                        step1_s: f64::NAN,
                        step2_s: f64::NAN,
                        step3_s: f64::NAN,
                        metrics_s: f64::NAN,
                        total_s: f64::NAN,
                        error: Some(e.to_string()),
                    }
                }
            };
            out.push(row);
        }
    }
    out
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("axis,value,rep,step1_s,step2_s,step3_s,metrics_s,total_s\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.axis, r.value, r.rep, r.step1_s, r.step2_s, r.step3_s, r.metrics_s, r.total_s
        ));
    }
    s
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Median and mean of `total_s` per grid value.
pub fn summarize(results: &[BenchResult]) -> Vec<(usize, f64, f64)> {
    let mut values: Vec<usize> = results.iter().map(|r| r.value).collect();
    values.dedup();
    values
        .into_iter()
        .map(|v| {
            let t: Vec<f64> = results.iter().filter(|r| r.value == v).map(|r| r.total_s).collect();
            let finite: Vec<f64> = t.iter().copied().filter(|x| x.is_finite()).collect();
            let mean = finite.iter().sum::<f64>() / finite.len().max(1) as f64;
            (v, median(&t), mean)
        })
        .collect()
}
