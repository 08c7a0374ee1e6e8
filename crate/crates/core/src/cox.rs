//! Penalized Cox regression on baseline covariates and trajectory summaries:
//! design assembly, elastic-net path fitting with cross-validated tuning,
//! Breslow baseline hazard and conditional survival prediction.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    BaselineColumn, BaselineKind, BaselineRow, BaselineValue, Dataset, LongitudinalRecord,
    SubjectId, SurvivalRecord,
};
use crate::lmm::{predict_random_effects, LmmError, LmmFit, RandomEffectSummary};
use crate::parallel;
use crate::stepfn::StepFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoxError {
    #[error("no events in the data")]
    NoEvents,
    #[error("every design column is constant")]
    AllConstant,
    #[error("{n} subjects cannot be split into {folds} folds")]
    TooFewSubjects { n: usize, folds: usize },
    #[error("subject ids of the random-effect summary do not match the survival table")]
    IdMismatch,
    #[error("unknown baseline covariate `{0}`")]
    UnknownBaseline(String),
    #[error("level `{level}` of `{column}` was not seen in training")]
    UnseenLevel { column: String, level: String },
    #[error("baseline value of `{column}` has the wrong type")]
    BaselineType { column: String },
    #[error("prediction time {time} is before the landmark {landmark}")]
    BeforeLandmark { time: f64, landmark: f64 },
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("subject {id} has no observations of `{covariate}`")]
    MissingCovariate { id: SubjectId, covariate: String },
    #[error("subject {0} has no baseline row")]
    MissingBaseline(SubjectId),
    #[error("invalid penalty settings: {0}")]
    InvalidPenalty(String),
    #[error(transparent)]
    Lmm(#[from] LmmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Ridge,
    Lasso,
    Elnet,
}

impl fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PenaltyKind::Ridge => "ridge",
            PenaltyKind::Lasso => "lasso",
            PenaltyKind::Elnet => "elnet",
        })
    }
}

impl FromStr for PenaltyKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ridge" => Ok(PenaltyKind::Ridge),
            "lasso" => Ok(PenaltyKind::Lasso),
            "elnet" => Ok(PenaltyKind::Elnet),
            other => Err(format!("unknown penalty `{other}` (expected ridge, lasso or elnet)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// Mixing values searched for `elnet`.
    pub alpha_grid: Vec<f64>,
    pub n_lambda: usize,
    pub n_folds: usize,
    /// Folds used to compare mixing values for `elnet`.
    pub n_folds_elnet: usize,
    pub seed: u64,
}

impl Default for PenaltySpec {
    fn default() -> Self {
        Self {
            kind: PenaltyKind::Ridge,
            alpha_grid: (1..=9).map(|i| i as f64 / 10.0).collect(),
            n_lambda: 100,
            n_folds: 10,
            n_folds_elnet: 5,
            seed: 1,
        }
    }
}

impl PenaltySpec {
    pub fn alphas(&self) -> Vec<f64> {
        match self.kind {
            PenaltyKind::Ridge => vec![0.0],
            PenaltyKind::Lasso => vec![1.0],
            PenaltyKind::Elnet => self.alpha_grid.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CoxError> {
        if self.n_lambda < 2 {
            return Err(CoxError::InvalidPenalty("n_lambda must be at least 2".into()));
        }
        if self.n_folds < 2 || (self.kind == PenaltyKind::Elnet && self.n_folds_elnet < 2) {
            return Err(CoxError::InvalidPenalty("at least 2 folds are required".into()));
        }
        if self.kind == PenaltyKind::Elnet
            && (self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)))
        {
            return Err(CoxError::InvalidPenalty("alpha_grid must be a nonempty subset of [0, 1]".into()));
        }
        Ok(())
    }
}

/// One baseline design column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineTerm {
    /// Numeric covariate at `source` in the training baseline columns.
    Numeric { source: usize },
    /// Indicator of a non-reference level.
    Indicator { source: usize, level: String },
}

/// Everything needed to build a design row for any subject: baseline coding
/// and the column scaling fixed at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLayout {
    pub columns: Vec<String>,
    pub baseline_columns: Vec<BaselineColumn>,
    pub baseline_terms: Vec<BaselineTerm>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub standardized: Vec<bool>,
    /// Columns with zero variance in the training data.
    pub constant: Vec<bool>,
}

impl DesignLayout {
    pub fn n_baseline(&self) -> usize {
        self.baseline_terms.len()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    fn baseline_part(&self, values: &[BaselineValue]) -> Result<Vec<f64>, CoxError> {
        let mut out = Vec::with_capacity(self.baseline_terms.len());
        for term in &self.baseline_terms {
            match term {
                BaselineTerm::Numeric { source } => match &values[*source] {
                    BaselineValue::Numeric(v) => out.push(*v),
                    BaselineValue::Level(_) => {
                        return Err(CoxError::BaselineType {
                            column: self.baseline_columns[*source].name.clone(),
                        })
                    }
                },
                BaselineTerm::Indicator { source, level } => {
                    let col = &self.baseline_columns[*source];
                    let observed = match &values[*source] {
                        BaselineValue::Level(l) => l.clone(),
                        BaselineValue::Numeric(v) => format!("{v}"),
                    };
                    if let BaselineKind::Categorical { levels } = &col.kind {
                        if !levels.contains(&observed) {
                            return Err(CoxError::UnseenLevel {
                                column: col.name.clone(),
                                level: observed,
                            });
                        }
                    }
                    out.push(if observed == *level { 1.0 } else { 0.0 });
                }
            }
        }
        Ok(out)
    }

    /// Unscaled design row.
    pub fn raw_row(&self, baseline: &[BaselineValue], extra: &[f64]) -> Result<Vec<f64>, CoxError> {
        let mut row = self.baseline_part(baseline)?;
        row.extend_from_slice(extra);
        if row.len() != self.columns.len() {
            return Err(CoxError::DimensionMismatch {
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        Ok(row)
    }

    pub fn scale_row(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .enumerate()
            .map(|(j, v)| (v - self.center[j]) / self.scale[j])
            .collect()
    }

    /// Scaled design for `survival` rows with the matching trajectory
    /// summaries (`extra`, one row per subject).
    pub fn apply(&self, survival: &[SurvivalRecord], extra: &DMatrix<f64>) -> Result<DMatrix<f64>, CoxError> {
        let mut out = DMatrix::zeros(survival.len(), self.columns.len());
        for (i, rec) in survival.iter().enumerate() {
            let e: Vec<f64> = extra.row(i).iter().copied().collect();
            let row = self.scale_row(&self.raw_row(&rec.baseline, &e)?);
            for (j, v) in row.into_iter().enumerate() {
                out[(i, j)] = v;
            }
        }
        Ok(out)
    }
}

/// Scaled design matrix with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub subject_ids: Vec<SubjectId>,
    pub layout: DesignLayout,
    /// `n × columns`, after centring/scaling when enabled.
    pub values: DMatrix<f64>,
}

impl DesignMatrix {
    pub fn columns(&self) -> &[String] {
        &self.layout.columns
    }

    /// Values on the original covariate scale.
    pub fn unscaled(&self) -> DMatrix<f64> {
        let l = &self.layout;
        DMatrix::from_fn(self.values.nrows(), self.values.ncols(), |i, j| {
            self.values[(i, j)] * l.scale[j] + l.center[j]
        })
    }
}

fn baseline_terms(
    dataset: &Dataset,
    baseline_formula: &[String],
) -> Result<(Vec<BaselineTerm>, Vec<String>), CoxError> {
    let mut terms = Vec::new();
    let mut names = Vec::new();
    for name in baseline_formula {
        let source = dataset
            .baseline_columns
            .iter()
            .position(|c| &c.name == name)
            .ok_or_else(|| CoxError::UnknownBaseline(name.clone()))?;
        match &dataset.baseline_columns[source].kind {
            BaselineKind::Numeric => {
                terms.push(BaselineTerm::Numeric { source });
                names.push(name.clone());
            }
            BaselineKind::Categorical { levels } => {
                for level in levels.iter().skip(1) {
                    terms.push(BaselineTerm::Indicator {
                        source,
                        level: level.clone(),
                    });
                    names.push(format!("{name}{level}"));
                }
            }
        }
    }
    Ok((terms, names))
}

/// Builds the Cox design: dummy-coded baseline covariates followed by the
/// summary columns, optionally centred and scaled to unit (population) SD.
/// Constant columns are left unscaled and flagged.
pub fn assemble_design(
    ranefs: &RandomEffectSummary,
    dataset: &Dataset,
    baseline_formula: &[String],
    standardize: bool,
) -> Result<DesignMatrix, CoxError> {
    let ids: Vec<&SubjectId> = dataset.survival.iter().map(|r| &r.id).collect();
    if ranefs.subject_ids.len() != ids.len() || ranefs.subject_ids.iter().zip(&ids).any(|(a, b)| a != *b) {
        return Err(CoxError::IdMismatch);
    }
    let (terms, mut columns) = baseline_terms(dataset, baseline_formula)?;
    columns.extend(ranefs.columns.iter().cloned());
    let k = columns.len();
    let mut layout = DesignLayout {
        columns,
        baseline_columns: dataset.baseline_columns.clone(),
        baseline_terms: terms,
        center: vec![0.0; k],
        scale: vec![1.0; k],
        standardized: vec![false; k],
        constant: vec![false; k],
    };
    let raw = layout.apply(&dataset.survival, &ranefs.values)?;
    let n = raw.nrows() as f64;
    for j in 0..k {
        let col = raw.column(j);
        let mean = col.sum() / n;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            layout.constant[j] = true;
            if standardize {
                warn!("design column `{}` is constant; left unscaled", layout.columns[j]);
            }
        } else if standardize {
            layout.center[j] = mean;
            layout.scale[j] = sd;
            layout.standardized[j] = true;
        }
    }
    let values = DMatrix::from_fn(raw.nrows(), k, |i, j| (raw[(i, j)] - layout.center[j]) / layout.scale[j]);
    Ok(DesignMatrix {
        subject_ids: ids.into_iter().cloned().collect(),
        layout,
        values,
    })
}

/// Risk-set structure of a survival sample, sorted once and reused for every
/// likelihood evaluation.
#[derive(Debug, Clone)]
pub(crate) struct RiskSets {
    order: Vec<usize>,
    /// `(start, end, events)` ranges into `order` for each distinct time.
    groups: Vec<(usize, usize, usize)>,
    events: Vec<bool>,
    n_events: usize,
}

struct CoxTerms {
    loglik: f64,
    /// `∂ℓ/∂η`.
    grad: Vec<f64>,
    /// Diagonal of `−∂²ℓ/∂η²`.
    weight: Vec<f64>,
}

impl RiskSets {
    pub(crate) fn new(times: &[f64], events: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]).then(a.cmp(&b)));
        let mut groups = Vec::new();
        let mut k = 0;
        while k < order.len() {
            let t = times[order[k]];
            let start = k;
            let mut d = 0;
            while k < order.len() && times[order[k]] == t {
                d += events[order[k]] as usize;
                k += 1;
            }
            groups.push((start, k, d));
        }
        Self {
            order,
            groups,
            events: events.to_vec(),
            n_events: events.iter().filter(|&&e| e).count(),
        }
    }

    fn shifted_exp(eta: &[f64]) -> (Vec<f64>, f64) {
        let c = eta.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let c = if c.is_finite() { c } else { 0.0 };
        (eta.iter().map(|v| (v - c).exp()).collect(), c)
    }

    /// Breslow log partial likelihood.
    pub(crate) fn loglik(&self, eta: &[f64]) -> f64 {
        let (e, c) = Self::shifted_exp(eta);
        let mut s = 0.0;
        let mut ll = 0.0;
        for &(start, end, d) in self.groups.iter().rev() {
            for &i in &self.order[start..end] {
                s += e[i];
            }
            if d > 0 {
                for &i in &self.order[start..end] {
                    if self.events[i] {
                        ll += eta[i];
                    }
                }
                ll -= d as f64 * (s.ln() + c);
            }
        }
        ll
    }

    fn terms(&self, eta: &[f64]) -> CoxTerms {
        let (e, c) = Self::shifted_exp(eta);
        let ng = self.groups.len();
        let mut inv_s = vec![0.0; ng];
        let mut inv_s2 = vec![0.0; ng];
        let mut s = 0.0;
        let mut ll = 0.0;
        for (g, &(start, end, d)) in self.groups.iter().enumerate().rev() {
            for &i in &self.order[start..end] {
                s += e[i];
            }
            if d > 0 {
                for &i in &self.order[start..end] {
                    if self.events[i] {
                        ll += eta[i];
                    }
                }
                ll -= d as f64 * (s.ln() + c);
                inv_s[g] = d as f64 / s;
                inv_s2[g] = d as f64 / (s * s);
            }
        }
        let n = eta.len();
        let mut grad = vec![0.0; n];
        let mut weight = vec![0.0; n];
        let (mut a, mut b) = (0.0, 0.0);
        for (g, &(start, end, _)) in self.groups.iter().enumerate() {
            a += inv_s[g];
            b += inv_s2[g];
            for &i in &self.order[start..end] {
                let ei = e[i];
                grad[i] = self.events[i] as u8 as f64 - ei * a;
                weight[i] = ei * a - ei * ei * b;
            }
        }
        CoxTerms {
            loglik: ll,
            grad,
            weight,
        }
    }

    /// Cumulative Breslow hazard for linear predictor `eta`.
    fn breslow(&self, times: &[f64], eta: &[f64]) -> StepFunction {
        let (e, c) = Self::shifted_exp(eta);
        let mut s = 0.0;
        let mut jumps = Vec::new();
        for &(start, end, d) in self.groups.iter().rev() {
            for &i in &self.order[start..end] {
                s += e[i];
            }
            if d > 0 {
                jumps.push((times[self.order[start]], d as f64 / s * (-c).exp()));
            }
        }
        jumps.reverse();
        let mut cum = 0.0;
        let mut knots = Vec::with_capacity(jumps.len());
        let mut values = Vec::with_capacity(jumps.len());
        for (t, h) in jumps {
            cum += h;
            knots.push(t);
            values.push(cum);
        }
        StepFunction::new(knots, values, 0.0)
    }
}

/// Breslow log partial likelihood of `coefficients` on the design values.
pub fn cox_partial_loglik(
    coefficients: &[f64],
    design: &DMatrix<f64>,
    survival: &[SurvivalRecord],
) -> Result<f64, CoxError> {
    check_dims(coefficients, design, survival)?;
    let (times, events) = time_event(survival);
    let eta = linear_predictor(design, coefficients);
    Ok(RiskSets::new(&times, &events).loglik(&eta))
}

/// Cumulative Breslow baseline hazard at the given coefficients.
pub fn breslow_baseline(
    coefficients: &[f64],
    design: &DMatrix<f64>,
    survival: &[SurvivalRecord],
) -> Result<StepFunction, CoxError> {
    check_dims(coefficients, design, survival)?;
    let (times, events) = time_event(survival);
    let eta = linear_predictor(design, coefficients);
    Ok(RiskSets::new(&times, &events).breslow(&times, &eta))
}

fn check_dims(coefficients: &[f64], design: &DMatrix<f64>, survival: &[SurvivalRecord]) -> Result<(), CoxError> {
    if design.ncols() != coefficients.len() {
        return Err(CoxError::DimensionMismatch {
            expected: design.ncols(),
            got: coefficients.len(),
        });
    }
    if design.nrows() != survival.len() {
        return Err(CoxError::DimensionMismatch {
            expected: survival.len(),
            got: design.nrows(),
        });
    }
    Ok(())
}

fn time_event(survival: &[SurvivalRecord]) -> (Vec<f64>, Vec<bool>) {
    (
        survival.iter().map(|r| r.time).collect(),
        survival.iter().map(|r| r.event).collect(),
    )
}

pub(crate) fn linear_predictor(x: &DMatrix<f64>, beta: &[f64]) -> Vec<f64> {
    let mut eta = vec![0.0; x.nrows()];
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (i, v) in x.column(j).iter().enumerate() {
                eta[i] += v * b;
            }
        }
    }
    eta
}

/// Column-major copy of a design, for the coordinate-descent inner loop.
struct Columns {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn new(x: &DMatrix<f64>, rows: Option<&[usize]>) -> Self {
        let cols = (0..x.ncols())
            .map(|j| match rows {
                Some(r) => r.iter().map(|&i| x[(i, j)]).collect(),
                None => x.column(j).iter().copied().collect(),
            })
            .collect();
        Self {
            n: rows.map(|r| r.len()).unwrap_or(x.nrows()),
            cols,
        }
    }

    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = vec![0.0; self.n];
        for (col, &b) in self.cols.iter().zip(beta) {
            if b != 0.0 {
                for (e, v) in eta.iter_mut().zip(col) {
                    *e += v * b;
                }
            }
        }
        eta
    }
}

fn penalty(beta: &[f64], lambda: f64, alpha: f64) -> f64 {
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    lambda * (alpha * l1 + 0.5 * (1.0 - alpha) * l2)
}

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

const MAX_NEWTON: usize = 200;
const MAX_SWEEPS: usize = 10_000;

/// Minimizes `−ℓ(β)/n + λ[α‖β‖₁ + ½(1−α)‖β‖²]` from `beta` by proximal
/// Newton steps (diagonal curvature in `η`) solved with coordinate descent,
/// halving the step whenever the objective would increase.
fn solve_lambda(x: &Columns, rs: &RiskSets, lambda: f64, alpha: f64, mut beta: Vec<f64>) -> (Vec<f64>, f64) {
    let n = x.n as f64;
    let p = x.cols.len();
    let l1 = lambda * alpha;
    let l2 = lambda * (1.0 - alpha);
    let mut terms = rs.terms(&x.eta(&beta));
    let mut obj = -terms.loglik / n + penalty(&beta, lambda, alpha);

    for _ in 0..MAX_NEWTON {
        let w = &terms.weight;
        let curv: Vec<f64> = x
            .cols
            .iter()
            .map(|c| c.iter().zip(w).map(|(v, wi)| wi * v * v).sum::<f64>() / n)
            .collect();
        let mut r = terms.grad.clone();
        let mut cand = beta.clone();
        for _ in 0..MAX_SWEEPS {
            let mut max_change = 0.0f64;
            for j in 0..p {
                let denom = curv[j] + l2;
                if denom <= 0.0 {
                    continue;
                }
                let col = &x.cols[j];
                let zr: f64 = col.iter().zip(&r).map(|(v, ri)| v * ri).sum::<f64>() / n;
                let z = curv[j] * cand[j] + zr;
                let nb = soft_threshold(z, l1) / denom;
                let d = nb - cand[j];
                if d != 0.0 {
                    for ((ri, v), wi) in r.iter_mut().zip(col).zip(w) {
                        *ri -= wi * v * d;
                    }
                    cand[j] = nb;
                    max_change = max_change.max(denom * d * d);
                }
            }
            if max_change < 1e-20 {
                break;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = beta.iter().zip(&cand).map(|(b, c)| b + step * (c - b)).collect();
            let terms_t = rs.terms(&x.eta(&trial));
            let obj_t = -terms_t.loglik / n + penalty(&trial, lambda, alpha);
            if obj_t.is_finite() && obj_t <= obj + 1e-15 * obj.abs() {
                accepted = Some((trial, terms_t, obj_t));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, terms_t, obj_t)) = accepted else {
            break;
        };
        let change = trial
            .iter()
            .zip(&beta)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let gain = obj - obj_t;
        beta = trial;
        terms = terms_t;
        obj = obj_t;
        if change < 1e-10 || gain <= 1e-16 * (1.0 + obj.abs()) {
            break;
        }
    }
    (beta, terms.loglik)
}

/// Solution of the penalized objective at one `(α, λ)` on the given design
/// columns (no scaling applied).
pub fn solve_penalized(
    design: &DMatrix<f64>,
    survival: &[SurvivalRecord],
    alpha: f64,
    lambda: f64,
) -> Result<Vec<f64>, CoxError> {
    let (times, events) = time_event(survival);
    if design.nrows() != times.len() {
        return Err(CoxError::DimensionMismatch {
            expected: times.len(),
            got: design.nrows(),
        });
    }
    let rs = RiskSets::new(&times, &events);
    let x = Columns::new(design, None);
    Ok(solve_lambda(&x, &rs, lambda, alpha, vec![0.0; design.ncols()]).0)
}

/// Smallest `λ` at which every coefficient is zero (`α` floored at 1e-3 so
/// the ridge path starts at a finite value).
fn lambda_max(x: &Columns, rs: &RiskSets, alpha: f64) -> f64 {
    let terms = rs.terms(&vec![0.0; x.n]);
    let n = x.n as f64;
    let m = x
        .cols
        .iter()
        .map(|c| (c.iter().zip(&terms.grad).map(|(v, g)| v * g).sum::<f64>() / n).abs())
        .fold(0.0f64, f64::max);
    m / alpha.max(1e-3)
}

fn lambda_path(lmax: f64, n_lambda: usize, n: usize, p: usize) -> Vec<f64> {
    let ratio: f64 = if n > p { 1e-3 } else { 1e-2 };
    (0..n_lambda)
        .map(|k| lmax * ratio.powf(k as f64 / (n_lambda - 1) as f64))
        .collect()
}

/// Warm-started path. The first value is taken as `λ = ∞` (all zero). With
/// `early_stop`, the path ends once the log-likelihood gain per step becomes
/// negligible relative to the null model.
fn fit_path(x: &Columns, rs: &RiskSets, lambdas: &[f64], alpha: f64, early_stop: bool) -> Vec<(Vec<f64>, f64)> {
    let p = x.cols.len();
    let null_ll = rs.loglik(&vec![0.0; x.n]);
    let mut out: Vec<(Vec<f64>, f64)> = Vec::with_capacity(lambdas.len());
    out.push((vec![0.0; p], null_ll));
    for (k, &lam) in lambdas.iter().enumerate().skip(1) {
        let start = out[k - 1].0.clone();
        let (beta, ll) = solve_lambda(x, rs, lam, alpha, start);
        let prev_ll = out[k - 1].1;
        out.push((beta, ll));
        if early_stop && k >= 5 && null_ll < 0.0 {
            let gain = (ll - prev_ll) / -null_ll;
            let dev_ratio = 1.0 - ll / null_ll;
            if gain < 1e-5 || dev_ratio > 0.999 {
                break;
            }
        }
    }
    out
}

/// Fold labels stratified by event status.
pub fn stratified_folds(events: &[bool], n_folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ev: Vec<usize> = (0..events.len()).filter(|&i| events[i]).collect();
    let mut cens: Vec<usize> = (0..events.len()).filter(|&i| !events[i]).collect();
    ev.shuffle(&mut rng);
    cens.shuffle(&mut rng);
    let mut folds = vec![0; events.len()];
    for (pos, &i) in ev.iter().chain(cens.iter()).enumerate() {
        folds[i] = pos % n_folds;
    }
    folds
}

/// Cross-validated partial-likelihood deviance per `λ`: for each fold,
/// `−2[ℓ_all(β̂₋ₖ) − ℓ₋ₖ(β̂₋ₖ)]`, summed over folds and divided by the number
/// of events.
fn cv_deviance(
    x: &DMatrix<f64>,
    times: &[f64],
    events: &[bool],
    lambdas: &[f64],
    alpha: f64,
    n_folds: usize,
    seed: u64,
    workers: usize,
) -> Vec<f64> {
    let folds = stratified_folds(events, n_folds, seed);
    let full_rs = RiskSets::new(times, events);
    let full_x = Columns::new(x, None);
    let ks: Vec<usize> = (0..n_folds).collect();
    let per_fold = parallel::map(workers, &ks, |&k| {
        let train: Vec<usize> = (0..times.len()).filter(|&i| folds[i] != k).collect();
        let tt: Vec<f64> = train.iter().map(|&i| times[i]).collect();
        let te: Vec<bool> = train.iter().map(|&i| events[i]).collect();
        let rs = RiskSets::new(&tt, &te);
        let xt = Columns::new(x, Some(&train));
        let path = fit_path(&xt, &rs, lambdas, alpha, false);
        path.iter()
            .map(|(beta, ll_train)| -2.0 * (full_rs.loglik(&full_x.eta(beta)) - ll_train))
            .collect::<Vec<f64>>()
    });
    let n_events = events.iter().filter(|&&e| e).count().max(1) as f64;
    (0..lambdas.len())
        .map(|l| per_fold.iter().map(|f| f[l]).sum::<f64>() / n_events)
        .collect()
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Fitted penalized Cox model.
#[derive(Debug, Clone, PartialEq)]
pub struct CoxFit {
    pub layout: DesignLayout,
    /// Coefficients on the original covariate scale (baseline terms first).
    pub coefficients: Vec<f64>,
    /// Coefficients on the scaled design.
    pub scaled_coefficients: Vec<f64>,
    pub lambda_star: f64,
    pub alpha_star: f64,
    pub lambda_path: Vec<f64>,
    pub cv_curve: Vec<f64>,
    /// Cumulative baseline hazard for the centred linear predictor.
    pub baseline_hazard: StepFunction,
    pub penalty: PenaltySpec,
    pub landmark: Option<f64>,
}

impl CoxFit {
    pub fn gamma(&self) -> &[f64] {
        &self.coefficients[..self.layout.n_baseline()]
    }

    pub fn delta(&self) -> &[f64] {
        &self.coefficients[self.layout.n_baseline()..]
    }

    pub fn linear_predictor(&self, scaled_rows: &DMatrix<f64>) -> Vec<f64> {
        linear_predictor(scaled_rows, &self.scaled_coefficients)
    }
}

/// Fits the penalized Cox model with cross-validated `λ` (and `α` for
/// `elnet`), returning coefficients on the original scale and the Breslow
/// hazard at the selected fit.
pub fn fit_penalized_cox(
    design: &DesignMatrix,
    survival: &[SurvivalRecord],
    penalty: &PenaltySpec,
    landmark: Option<f64>,
    workers: usize,
) -> Result<CoxFit, CoxError> {
    penalty.validate()?;
    let (times, events) = time_event(survival);
    let x = &design.values;
    if x.nrows() != survival.len() {
        return Err(CoxError::DimensionMismatch {
            expected: survival.len(),
            got: x.nrows(),
        });
    }
    let rs = RiskSets::new(&times, &events);
    if rs.n_events == 0 {
        return Err(CoxError::NoEvents);
    }
    if design.layout.constant.iter().all(|&c| c) {
        return Err(CoxError::AllConstant);
    }
    let n = survival.len();
    if n < penalty.n_folds {
        return Err(CoxError::TooFewSubjects {
            n,
            folds: penalty.n_folds,
        });
    }
    let cols = Columns::new(x, None);
    let p = x.ncols();

    let path_for = |alpha: f64| -> (Vec<f64>, Vec<(Vec<f64>, f64)>) {
        let lambdas = lambda_path(lambda_max(&cols, &rs, alpha), penalty.n_lambda, n, p);
        let path = fit_path(&cols, &rs, &lambdas, alpha, true);
        (lambdas[..path.len()].to_vec(), path)
    };

    let alpha_star = match penalty.kind {
        PenaltyKind::Elnet => {
            if n < penalty.n_folds_elnet {
                return Err(CoxError::TooFewSubjects {
                    n,
                    folds: penalty.n_folds_elnet,
                });
            }
            let mut best = (f64::INFINITY, penalty.alpha_grid[0]);
            for &alpha in &penalty.alpha_grid {
                let (lambdas, _) = path_for(alpha);
                let cv = cv_deviance(x, &times, &events, &lambdas, alpha, penalty.n_folds_elnet, penalty.seed, workers);
                let m = cv[argmin(&cv)];
                if m < best.0 {
                    best = (m, alpha);
                }
            }
            best.1
        }
        _ => penalty.alphas()[0],
    };

    let (lambdas, path) = path_for(alpha_star);
    let cv_curve = cv_deviance(x, &times, &events, &lambdas, alpha_star, penalty.n_folds, penalty.seed, workers);
    let k = argmin(&cv_curve);
    let scaled = path[k].0.clone();
    let coefficients = scaled
        .iter()
        .zip(&design.layout.scale)
        .map(|(b, s)| b / s)
        .collect();
    let eta = cols.eta(&scaled);
    let baseline_hazard = rs.breslow(&times, &eta);
    Ok(CoxFit {
        layout: design.layout.clone(),
        coefficients,
        scaled_coefficients: scaled,
        lambda_star: lambdas[k],
        alpha_star,
        lambda_path: lambdas,
        cv_curve,
        baseline_hazard,
        penalty: penalty.clone(),
        landmark,
    })
}

/// `Ŝ_i(t) = exp(−Ĥ₀(t)·exp(η_i))` for scaled design rows; `n × times`.
pub fn predict_survival(fit: &CoxFit, scaled_rows: &DMatrix<f64>, times: &[f64]) -> Result<DMatrix<f64>, CoxError> {
    if scaled_rows.ncols() != fit.scaled_coefficients.len() {
        return Err(CoxError::DimensionMismatch {
            expected: fit.scaled_coefficients.len(),
            got: scaled_rows.ncols(),
        });
    }
    if let Some(tl) = fit.landmark {
        if let Some(&t) = times.iter().find(|&&t| t < tl) {
            return Err(CoxError::BeforeLandmark { time: t, landmark: tl });
        }
    }
    let eta = fit.linear_predictor(scaled_rows);
    let h: Vec<f64> = times.iter().map(|&t| fit.baseline_hazard.eval(t)).collect();
    Ok(DMatrix::from_fn(eta.len(), times.len(), |i, j| (-h[j] * eta[i].exp()).exp()))
}

/// Survival predictions for subjects outside the training data: random
/// effects from the trained mixed models, then the training scaling and
/// Cox fit. Rows are in the order of `new_baseline`.
pub fn predict_survival_new_subjects(
    lmm_fits: &[LmmFit],
    cox: &CoxFit,
    new_longitudinal: &[LongitudinalRecord],
    new_baseline: &[BaselineRow],
    times: &[f64],
) -> Result<DMatrix<f64>, CoxError> {
    let mut rows: HashMap<&SubjectId, Vec<&LongitudinalRecord>> = HashMap::new();
    for r in new_longitudinal {
        if cox.landmark.is_none_or(|tl| r.fuptime <= tl) {
            rows.entry(&r.id).or_default().push(r);
        }
    }
    let mut design = DMatrix::zeros(new_baseline.len(), cox.layout.n_columns());
    for (i, b) in new_baseline.iter().enumerate() {
        let recs = rows.get(&b.id).map(|v| v.as_slice()).unwrap_or(&[]);
        let mut extra = Vec::new();
        for fit in lmm_fits {
            match predict_random_effects(fit, recs) {
                Ok(u) => extra.extend(u),
                Err(LmmError::NoObservations) => {
                    return Err(CoxError::MissingCovariate {
                        id: b.id.clone(),
                        covariate: fit.spec.response.clone(),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        let row = cox.layout.scale_row(&cox.layout.raw_row(&b.values, &extra)?);
        for (j, v) in row.into_iter().enumerate() {
            design[(i, j)] = v;
        }
    }
    predict_survival(cox, &design, times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparatorMode {
    /// Each covariate's value at follow-up time 0.
    Baseline,
    /// Each covariate's last non-missing value up to the landmark.
    Locf,
}

/// Scalar per-covariate summaries for the comparator models; covariates
/// missing for any subject are dropped with a warning.
pub fn comparator_summary(dataset: &Dataset, y_names: &[String], mode: ComparatorMode) -> Result<RandomEffectSummary, CoxError> {
    let groups = dataset.rows_by_subject();
    let mut columns = Vec::new();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for name in y_names {
        let c = dataset
            .covariate_index(name)
            .ok_or_else(|| LmmError::UnknownResponse(name.clone()))?;
        let mut vals = Vec::with_capacity(groups.len());
        let mut missing = None;
        for (i, rows) in groups.iter().enumerate() {
            let mut best: Option<(f64, f64)> = None;
            for &j in rows {
                let r = &dataset.longitudinal[j];
                let Some(v) = r.values[c] else { continue };
                let keep = match mode {
                    ComparatorMode::Baseline => r.fuptime == 0.0 && best.is_none(),
                    ComparatorMode::Locf => {
                        dataset.landmark.is_none_or(|tl| r.fuptime <= tl)
                            && best.is_none_or(|(t, _)| r.fuptime >= t)
                    }
                };
                if keep {
                    best = Some((r.fuptime, v));
                }
            }
            match best {
                Some((_, v)) => vals.push(v),
                None => {
                    missing = Some(dataset.survival[i].id.clone());
                    break;
                }
            }
        }
        if let Some(id) = missing {
            warn!("dropping `{name}` from the comparator model: no usable value for subject {id}");
            continue;
        }
        columns.push(name.clone());
        cols.push(vals);
    }
    let n = dataset.n_subjects();
    Ok(RandomEffectSummary {
        subject_ids: dataset.survival.iter().map(|r| r.id.clone()).collect(),
        values: DMatrix::from_fn(n, columns.len(), |i, j| cols[j][i]),
        columns,
    })
}

/// Penalized Cox comparator on baseline-time or last-observed values of the
/// longitudinal covariates.
pub fn fit_locf_baseline_cox(
    dataset: &Dataset,
    mode: ComparatorMode,
    y_names: &[String],
    baseline_formula: &[String],
    penalty: &PenaltySpec,
    standardize: bool,
    workers: usize,
) -> Result<CoxFit, CoxError> {
    let summary = comparator_summary(dataset, y_names, mode)?;
    let design = assemble_design(&summary, dataset, baseline_formula, standardize)?;
    fit_penalized_cox(&design, &dataset.survival, penalty, dataset.landmark, workers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, time: f64, event: bool) -> SurvivalRecord {
        SurvivalRecord {
            id: id.into(),
            time,
            event,
            baseline: vec![],
        }
    }

    #[test]
    fn loglik_distinct_times_null() {
        let s = vec![rec("a", 1.0, true), rec("b", 2.0, true), rec("c", 3.0, true)];
        let x = DMatrix::from_row_slice(3, 1, &[0.3, -1.0, 2.0]);
        let ll = cox_partial_loglik(&[0.0], &x, &s).unwrap();
        assert!((ll - (-(3f64.ln()) - 2f64.ln())).abs() < 1e-12);
        let one = cox_partial_loglik(&[0.7], &x.rows(0, 1).into_owned(), &s[..1]).unwrap();
        assert_eq!(one, 0.0);
    }

    #[test]
    fn breslow_unit_weights() {
        let s = vec![rec("a", 1.0, true), rec("b", 2.0, true), rec("c", 3.0, true)];
        let x = DMatrix::zeros(3, 1);
        let h = breslow_baseline(&[0.0], &x, &s).unwrap();
        assert!((h.eval(1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((h.eval(2.5) - 5.0 / 6.0).abs() < 1e-15);
        assert!((h.eval(3.0) - 11.0 / 6.0).abs() < 1e-15);
        let none = breslow_baseline(&[0.0], &x, &[rec("a", 1.0, false), rec("b", 2.0, false), rec("c", 3.0, false)]).unwrap();
        assert_eq!(none.eval(10.0), 0.0);
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let events: Vec<bool> = (0..23).map(|i| i % 3 == 0).collect();
        let f = stratified_folds(&events, 4, 9);
        assert_eq!(f, stratified_folds(&events, 4, 9));
        for k in 0..4 {
            assert!((0..23).any(|i| f[i] == k && events[i]));
        }
    }

    #[test]
    fn penalty_parsing() {
        assert_eq!("elnet".parse::<PenaltyKind>().unwrap(), PenaltyKind::Elnet);
        assert!("foo".parse::<PenaltyKind>().is_err());
        assert_eq!(PenaltySpec::default().alpha_grid.len(), 9);
    }
}
