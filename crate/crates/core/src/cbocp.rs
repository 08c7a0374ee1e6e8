//! Cluster bootstrap optimism correction of predictive performance.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LongitudinalRecord, SubjectId, SurvivalRecord};
use crate::metrics::Metric;
use crate::parallel;
use crate::pipeline::{fit_prc, PipelineConfig, PipelineError, PrcModel};

/// Logged (and stored in the report) when no bootstrap was requested.
pub const NO_BOOTSTRAP_WARNING: &str = "the cluster bootstrap optimism correction was not performed \
(n_boots = 0); only the apparent values of the performance measures are reported";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Number of replicates; 50 to 200 is usually enough.
    pub n_boots: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_boots: 0,
            seed: 1,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: Metric,
    pub pred_time: f64,
    pub naive: f64,
    pub optimism: Option<f64>,
    pub adjusted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerformanceReport {
    pub rows: Vec<ReportRow>,
    pub n_boots: usize,
    /// Replicates that produced a model and every metric.
    pub effective_b: usize,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub warnings: Vec<String>,
}

impl PerformanceReport {
    /// CSV with columns `metric,pred_time,naive,optimism,adjusted,effective_B`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,pred_time,naive,optimism,adjusted,effective_B\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.metric.label(),
                r.pred_time,
                r.naive,
                opt(r.optimism),
                opt(r.adjusted),
                self.effective_b
            ));
        }
        s
    }

    pub fn row(&self, metric: Metric, time: f64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.metric == metric && r.pred_time == time)
    }
}

/// RNG for replicate `index`: an independent ChaCha stream of the root seed.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

/// Draws `n` subjects with replacement. Each draw becomes a new cluster
/// (`b1`, `b2`, ...) carrying copies of the subject's rows. Also returns the
/// source index of every draw.
pub fn resample_clusters_with_sources<R: Rng>(dataset: &Dataset, rng: &mut R) -> (Dataset, Vec<usize>) {
    let n = dataset.n_subjects();
    let sources: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let groups = dataset.rows_by_subject();
    let mut survival = Vec::with_capacity(n);
    let mut longitudinal = Vec::new();
    for (k, &src) in sources.iter().enumerate() {
        let id = SubjectId(format!("b{}", k + 1));
        let s = &dataset.survival[src];
        survival.push(SurvivalRecord {
            id: id.clone(),
            ..s.clone()
        });
        for &j in &groups[src] {
            longitudinal.push(LongitudinalRecord {
                id: id.clone(),
                ..dataset.longitudinal[j].clone()
            });
        }
    }
    (
        Dataset {
            survival,
            longitudinal,
            ..dataset.clone()
        },
        sources,
    )
}

pub fn resample_clusters<R: Rng>(dataset: &Dataset, rng: &mut R) -> Dataset {
    resample_clusters_with_sources(dataset, rng).0
}

/// Fits the model on a replicate and returns `(apparent, test)` metric
/// values, or the reason the replicate was dropped.
fn run_replicate(
    dataset: &Dataset,
    config: &PipelineConfig,
    metrics: &[Metric],
    times: &[f64],
    seed: u64,
    index: usize,
) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let mut rng = replicate_rng(seed, index as u64);
    let boot = resample_clusters(dataset, &mut rng);
    let model = fit_prc(&boot, config, 1)?;
    let apparent = model.evaluate(&boot, metrics, times)?;
    let test = model.evaluate(dataset, metrics, times)?;
    Ok((apparent, test))
}

/// Naive performance of the model fitted on `dataset`, corrected by the
/// mean `test − apparent` difference over bootstrap replicates.
pub fn run_cbocp(
    dataset: &Dataset,
    config: &PipelineConfig,
    metrics: &[Metric],
    eval_times: &[f64],
    boot: &BootstrapConfig,
) -> Result<(PerformanceReport, PrcModel), PipelineError> {
    let model = fit_prc(dataset, config, boot.workers)?;
    let naive = model.evaluate(dataset, metrics, eval_times)?;
    let report = correct_optimism(dataset, config, metrics, eval_times, boot, &naive)?;
    Ok((report, model))
}

/// Bootstrap part of [`run_cbocp`] given the naive values.
pub fn correct_optimism(
    dataset: &Dataset,
    config: &PipelineConfig,
    metrics: &[Metric],
    eval_times: &[f64],
    boot: &BootstrapConfig,
    naive: &[f64],
) -> Result<PerformanceReport, PipelineError> {
    let mut warnings = Vec::new();
    let cells: Vec<(Metric, f64)> = metrics
        .iter()
        .flat_map(|&m| eval_times.iter().map(move |&t| (m, t)))
        .collect();
    let mut optimism: Option<Vec<f64>> = None;
    let mut effective_b = 0;
    if boot.n_boots == 0 {
        warn!("{NO_BOOTSTRAP_WARNING}");
        warnings.push(NO_BOOTSTRAP_WARNING.to_string());
    } else {
        let indices: Vec<usize> = (0..boot.n_boots).collect();
        let results = parallel::map(boot.workers, &indices, |&b| {
            run_replicate(dataset, config, metrics, eval_times, boot.seed, b)
        });
        let mut sums = vec![0.0; cells.len()];
        for (b, r) in results.into_iter().enumerate() {
            match r {
                Ok((apparent, test)) => {
                    effective_b += 1;
                    for (k, s) in sums.iter_mut().enumerate() {
                        *s += test[k] - apparent[k];
                    }
                }
                Err(e) => {
                    let msg = format!("bootstrap replicate {} skipped: {e}", b + 1);
                    warn!("{msg}");
                    warnings.push(msg);
                }
            }
        }
        if effective_b < boot.n_boots {
            info!("{effective_b} of {} bootstrap replicates used", boot.n_boots);
        }
        if effective_b > 0 {
            optimism = Some(sums.iter().map(|s| s / effective_b as f64).collect());
        }
    }
    let rows = cells
        .iter()
        .enumerate()
        .map(|(k, &(metric, pred_time))| {
            let opt = optimism.as_ref().map(|o| o[k]);
            ReportRow {
                metric,
                pred_time,
                naive: naive[k],
                optimism: opt,
                adjusted: opt.map(|o| naive[k] + o),
            }
        })
        .collect();
    Ok(PerformanceReport {
        rows,
        n_boots: boot.n_boots,
        effective_b,
        seed: boot.seed,
        config_hash: None,
        warnings,
    })
}
