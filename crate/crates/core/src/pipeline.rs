//! The three estimation steps chained together: mixed models, predicted
//! random effects, penalized Cox model.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cox::{assemble_design, fit_penalized_cox, predict_survival, CoxError, CoxFit, PenaltySpec};
use crate::data::{DataError, Dataset};
use crate::lmm::{fit_all_lmms, summarize_lmms, LmmError, LmmFit, RandomEffectSummary};
use crate::metrics::{evaluate, Metric, MetricError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Lmm(#[from] LmmError),
    #[error(transparent)]
    Cox(#[from] CoxError),
    #[error("{metric} at time {time}: {source}")]
    Metric {
        metric: Metric,
        time: f64,
        #[source]
        source: MetricError,
    },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("dataset has not been landmarked")]
    NotLandmarked,
}

impl From<DataError> for PipelineError {
    fn from(e: DataError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

/// Model settings shared by every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub y_names: Vec<String>,
    pub fixed_terms: Vec<String>,
    pub random_terms: Vec<String>,
    pub baseline_formula: Vec<String>,
    pub penalty: PenaltySpec,
    pub standardize: bool,
    /// Use mixed-model fits flagged as not converged instead of failing.
    pub allow_unconverged: bool,
}

impl PipelineConfig {
    pub fn new(y_names: &[&str], fixed: &[&str], random: &[&str], baseline: &[&str]) -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self {
            y_names: own(y_names),
            fixed_terms: own(fixed),
            random_terms: own(random),
            baseline_formula: own(baseline),
            penalty: PenaltySpec::default(),
            standardize: true,
            allow_unconverged: false,
        }
    }
}

/// Wall time of each estimation step, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTimes {
    pub step1: f64,
    pub step2: f64,
    pub step3: f64,
}

/// A fitted prediction model.
#[derive(Debug, Clone, PartialEq)]
pub struct PrcModel {
    pub lmm_fits: Vec<LmmFit>,
    pub ranefs: RandomEffectSummary,
    pub cox: CoxFit,
    pub config: PipelineConfig,
}

pub fn fit_prc(dataset: &Dataset, config: &PipelineConfig, workers: usize) -> Result<PrcModel, PipelineError> {
    fit_prc_timed(dataset, config, workers).map(|(m, _)| m)
}

pub fn fit_prc_timed(
    dataset: &Dataset,
    config: &PipelineConfig,
    workers: usize,
) -> Result<(PrcModel, StepTimes), PipelineError> {
    if dataset.landmark.is_none() {
        return Err(PipelineError::NotLandmarked);
    }
    let t0 = Instant::now();
    let lmm_fits = fit_all_lmms(
        dataset,
        &config.y_names,
        &config.fixed_terms,
        &config.random_terms,
        workers,
    )
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let t1 = Instant::now();
    let ranefs = summarize_lmms(&lmm_fits, dataset, config.allow_unconverged)?;
    let t2 = Instant::now();
    let design = assemble_design(&ranefs, dataset, &config.baseline_formula, config.standardize)?;
    let cox = fit_penalized_cox(&design, &dataset.survival, &config.penalty, dataset.landmark, workers)?;
    let t3 = Instant::now();
    Ok((
        PrcModel {
            lmm_fits,
            ranefs,
            cox,
            config: config.clone(),
        },
        StepTimes {
            step1: (t1 - t0).as_secs_f64(),
            step2: (t2 - t1).as_secs_f64(),
            step3: (t3 - t2).as_secs_f64(),
        },
    ))
}

impl PrcModel {
    /// Scaled Cox design for the subjects of `dataset`, with random effects
    /// predicted from this model's mixed-model parameters.
    pub fn design_for(&self, dataset: &Dataset) -> Result<DMatrix<f64>, PipelineError> {
        let ranefs = summarize_lmms(&self.lmm_fits, dataset, true)?;
        Ok(self.cox.layout.apply(&dataset.survival, &ranefs.values)?)
    }

    /// Survival predictions for the subjects of `dataset` (`n × times`).
    pub fn predict(&self, dataset: &Dataset, times: &[f64]) -> Result<DMatrix<f64>, PipelineError> {
        Ok(predict_survival(&self.cox, &self.design_for(dataset)?, times)?)
    }

    /// Metric values on `dataset`, one per `(metric, time)` in row-major
    /// order of `metrics × times`.
    pub fn evaluate(&self, dataset: &Dataset, metrics: &[Metric], times: &[f64]) -> Result<Vec<f64>, PipelineError> {
        let surv = self.predict(dataset, times)?;
        evaluate_predictions(dataset, &surv, metrics, times)
    }
}

pub fn evaluate_predictions(
    dataset: &Dataset,
    surv: &DMatrix<f64>,
    metrics: &[Metric],
    times: &[f64],
) -> Result<Vec<f64>, PipelineError> {
    let t: Vec<f64> = dataset.survival.iter().map(|r| r.time).collect();
    let e: Vec<bool> = dataset.survival.iter().map(|r| r.event).collect();
    let mut out = Vec::with_capacity(metrics.len() * times.len());
    for &m in metrics {
        for (j, &time) in times.iter().enumerate() {
            let s: Vec<f64> = surv.column(j).iter().copied().collect();
            out.push(evaluate(m, &t, &e, &s, time).map_err(|source| PipelineError::Metric {
                metric: m,
                time,
                source,
            })?);
        }
    }
    Ok(out)
}
