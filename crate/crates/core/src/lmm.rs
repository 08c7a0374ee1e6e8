//! Per-covariate linear mixed models fitted by maximum likelihood, and the
//! predicted random effects used as trajectory summaries.
//!
//! The marginal model for subject `i` is `y_i ~ N(W_i β, Z_i D Z_iᵀ + σ² I)`.
//! Internally `D = σ² ΛΛᵀ` with `Λ` lower triangular (log diagonal), so `β`
//! and `σ²` can be profiled out and the search runs over `Λ` only. Design
//! columns are centred and scaled before the search and the estimates are
//! mapped back exactly, which leaves the likelihood unchanged.

use std::f64::consts::PI;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::data::{Dataset, LongitudinalRecord, SubjectId};
use crate::optim::{minimize_bfgs, BfgsOptions};
use crate::parallel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmmError {
    #[error("unknown longitudinal covariate `{0}`")]
    UnknownResponse(String),
    #[error("unknown model term `{0}` (not a regressor or the follow-up time column)")]
    UnknownTerm(String),
    #[error("random term `{0}` is not among the fixed terms")]
    RandomNotFixed(String),
    #[error("too few observations: {n_obs} observations on {n_subjects} subjects for {n_params} parameters")]
    InsufficientData {
        n_obs: usize,
        n_subjects: usize,
        n_params: usize,
    },
    #[error("fixed-effect design is rank deficient")]
    RankDeficient,
    #[error("marginal covariance is numerically singular (condition number {condition:e})")]
    SingularCovariance { condition: f64 },
    #[error("subject has no non-missing response")]
    NoObservations,
    #[error("no mixed-model fits supplied")]
    EmptyFitList,
    #[error("mixed model for `{covariate}` did not converge")]
    NotConverged { covariate: String },
    #[error("mixed model for `{covariate}`: {source}")]
    Covariate {
        covariate: String,
        #[source]
        source: Box<LmmError>,
    },
}

/// Model formula for one longitudinal covariate. Both term lists carry an
/// implicit intercept; grouping is always by subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmSpec {
    pub response: String,
    pub fixed_terms: Vec<String>,
    pub random_terms: Vec<String>,
}

impl LmmSpec {
    pub fn new(response: &str, fixed: &[&str], random: &[&str]) -> Self {
        Self {
            response: response.to_string(),
            fixed_terms: fixed.iter().map(|s| s.to_string()).collect(),
            random_terms: random.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn n_random(&self) -> usize {
        1 + self.random_terms.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TermSource {
    Intercept,
    Fuptime,
    Regressor(usize),
}

impl TermSource {
    fn value(self, row: &LongitudinalRecord) -> f64 {
        match self {
            TermSource::Intercept => 1.0,
            TermSource::Fuptime => row.fuptime,
            TermSource::Regressor(i) => row.regressors[i],
        }
    }
}

/// Column layout of a fitted model, resolved against the training dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermLayout {
    pub response_index: usize,
    pub fixed: Vec<TermSource>,
    pub random: Vec<TermSource>,
}

impl TermLayout {
    pub fn resolve(spec: &LmmSpec, dataset: &Dataset) -> Result<Self, LmmError> {
        let response_index = dataset
            .covariate_index(&spec.response)
            .ok_or_else(|| LmmError::UnknownResponse(spec.response.clone()))?;
        let term = |name: &String| -> Result<TermSource, LmmError> {
            if *name == dataset.schema.fuptime {
                Ok(TermSource::Fuptime)
            } else {
                dataset
                    .regressor_index(name)
                    .map(TermSource::Regressor)
                    .ok_or_else(|| LmmError::UnknownTerm(name.clone()))
            }
        };
        for r in &spec.random_terms {
            if !spec.fixed_terms.contains(r) {
                return Err(LmmError::RandomNotFixed(r.clone()));
            }
        }
        let mut fixed = vec![TermSource::Intercept];
        for t in &spec.fixed_terms {
            fixed.push(term(t)?);
        }
        let mut random = vec![TermSource::Intercept];
        for t in &spec.random_terms {
            random.push(term(t)?);
        }
        Ok(Self {
            response_index,
            fixed,
            random,
        })
    }

    /// Design matrices and response for the rows with a non-missing
    /// response.
    pub fn design(
        &self,
        rows: &[&LongitudinalRecord],
    ) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let used: Vec<(&LongitudinalRecord, f64)> = rows
            .iter()
            .filter_map(|r| r.values[self.response_index].map(|y| (*r, y)))
            .collect();
        let m = used.len();
        let w = DMatrix::from_fn(m, self.fixed.len(), |i, j| self.fixed[j].value(used[i].0));
        let z = DMatrix::from_fn(m, self.random.len(), |i, j| self.random[j].value(used[i].0));
        let y = DVector::from_iterator(m, used.iter().map(|(_, y)| *y));
        (w, z, y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    /// Random-effect covariance estimate is (numerically) singular.
    pub boundary: bool,
    /// Residuals vanish under ordinary least squares; variance components
    /// are reported at zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTableRow {
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub df: f64,
    pub t_value: f64,
    pub p_value: f64,
}

/// Maximum-likelihood fit of one mixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmFit {
    pub spec: LmmSpec,
    pub layout: TermLayout,
    /// `(Intercept)` followed by the fixed terms.
    pub fixed_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Random-effect covariance, `q × q`.
    pub d: DMatrix<f64>,
    pub sigma2: f64,
    pub loglik: f64,
    pub n_obs: usize,
    pub n_subjects: usize,
    pub convergence: Convergence,
    pub t_table: Vec<TTableRow>,
}

impl LmmFit {
    pub fn q(&self) -> usize {
        self.layout.random.len()
    }

    /// Summary column names: `<y>_b_int`, `<y>_b_<term>`.
    pub fn ranef_names(&self) -> Vec<String> {
        let mut names = vec![format!("{}_b_int", self.spec.response)];
        names.extend(
            self.spec
                .random_terms
                .iter()
                .map(|t| format!("{}_b_{}", self.spec.response, t)),
        );
        names
    }

    pub fn random_sd(&self) -> Vec<f64> {
        (0..self.q()).map(|i| self.d[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn random_corr(&self, a: usize, b: usize) -> f64 {
        self.d[(a, b)] / (self.d[(a, a)] * self.d[(b, b)]).sqrt()
    }
}

/// Per-subject sufficient statistics of `(W, Z, y)`.
#[derive(Debug, Clone)]
struct Block {
    m: usize,
    zz: DMatrix<f64>,
    zw: DMatrix<f64>,
    zy: DVector<f64>,
    ww: DMatrix<f64>,
    wy: DVector<f64>,
    yy: f64,
}

impl Block {
    fn new(w: &DMatrix<f64>, z: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        Self {
            m: y.len(),
            zz: z.transpose() * z,
            zw: z.transpose() * w,
            zy: z.transpose() * y,
            ww: w.transpose() * w,
            wy: w.transpose() * y,
            yy: y.dot(y),
        }
    }
}

struct Gls {
    beta: DVector<f64>,
    xtvx: DMatrix<f64>,
    sigma2: f64,
    logdet: f64,
}

struct Eval {
    loglik: f64,
    grad_beta: DVector<f64>,
    /// `Σ Zᵀ A Z` with `A = V⁻¹ − V⁻¹ r rᵀ V⁻¹`; `∂ℓ/∂D = −G/2`.
    g: DMatrix<f64>,
    /// `∂ℓ/∂σ²` at fixed `D`.
    dsigma2: f64,
    /// `Σ Zᵀ V⁻¹ r`.
    z_score: DVector<f64>,
}

/// Mixed-model likelihood over a fixed set of subject blocks.
#[derive(Debug, Clone)]
struct Problem {
    blocks: Vec<Block>,
    n_obs: usize,
    p: usize,
    q: usize,
}

fn vech_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Lower-triangular factor from `θ` (row-major vech, log diagonal).
fn lambda_from_theta(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    l
}

/// Any `L` with `LLᵀ = D` for a symmetric positive semidefinite `D`.
pub fn psd_factor(d: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = d.clone().cholesky() {
        return ch.l();
    }
    let eig = d.clone().symmetric_eigen();
    let mut f = eig.eigenvectors.clone();
    for (j, &v) in eig.eigenvalues.iter().enumerate() {
        let s = v.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

fn ln_det_chol(m: &DMatrix<f64>) -> Option<(nalgebra::Cholesky<f64, nalgebra::Dyn>, f64)> {
    let ch = m.clone().cholesky()?;
    let l = ch.l_dirty();
    let ld = (0..m.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    Some((ch, ld))
}

impl Problem {
    fn gls(&self, lambda: &DMatrix<f64>) -> Result<Gls, LmmError> {
        let (p, q) = (self.p, self.q);
        let mut xtvx = DMatrix::zeros(p, p);
        let mut xtvy = DVector::zeros(p);
        let mut yvy = 0.0;
        let mut logdet = 0.0;
        let lt = lambda.transpose();
        for b in &self.blocks {
            let lk = &lt * &b.zz;
            let m = DMatrix::identity(q, q) + &lk * lambda;
            let (ch, ld) = ln_det_chol(&m).ok_or(LmmError::SingularCovariance {
                condition: f64::INFINITY,
            })?;
            logdet += ld;
            let pm = &lt * &b.zw;
            let py = &lt * &b.zy;
            let mp = ch.solve(&pm);
            let mpy = ch.solve(&py);
            xtvx += &b.ww - pm.transpose() * &mp;
            xtvy += &b.wy - pm.transpose() * &mpy;
            yvy += b.yy - py.dot(&mpy);
        }
        let ch = xtvx.clone().cholesky().ok_or(LmmError::RankDeficient)?;
        let beta = ch.solve(&xtvy);
        let rss = (yvy - beta.dot(&xtvy)).max(0.0);
        Ok(Gls {
            beta,
            xtvx,
            sigma2: rss / self.n_obs as f64,
            logdet,
        })
    }

    fn profiled_loglik(&self, gls: &Gls) -> f64 {
        let n = self.n_obs as f64;
        -0.5 * (n * ((2.0 * PI).ln() + 1.0 + gls.sigma2.ln()) + gls.logdet)
    }

    /// Log-likelihood and derivatives at `(β, D = σ² ΛΛᵀ, σ²)`.
    fn evaluate(&self, beta: &DVector<f64>, lambda: &DMatrix<f64>, sigma2: f64) -> Option<Eval> {
        let (p, q) = (self.p, self.q);
        let lt = lambda.transpose();
        let mut loglik = 0.0;
        let mut grad_beta = DVector::zeros(p);
        let mut g = DMatrix::zeros(q, q);
        let mut dsigma2 = 0.0;
        let mut z_score = DVector::zeros(q);
        let s2 = sigma2;
        let s4 = sigma2 * sigma2;
        for b in &self.blocks {
            let lkl = &lt * &b.zz * lambda;
            let m = DMatrix::identity(q, q) + &lkl;
            let (ch, ld) = ln_det_chol(&m)?;
            let zr = &b.zy - &b.zw * beta;
            let wr = &b.wy - &b.ww * beta;
            let rr = b.yy - 2.0 * beta.dot(&b.wy) + beta.dot(&(&b.ww * beta));
            let a = &lt * &zr;
            let w = ch.solve(&a);
            let rvr = rr - a.dot(&w);
            let mf = b.m as f64;
            loglik += -0.5 * (mf * (2.0 * PI).ln() + mf * s2.ln() + ld + rvr / s2);
            grad_beta += (wr - (&lt * &b.zw).transpose() * &w) / s2;
            let kl = &b.zz * lambda;
            let v = &zr - &kl * &w;
            let zvz = &b.zz - &kl * ch.solve(&kl.transpose());
            g += zvz / s2 - (&v * v.transpose()) / s4;
            z_score += &v / s2;
            let minv_trace: f64 = ch.inverse().trace();
            let tr_vinv = mf - q as f64 + minv_trace;
            let norm_vr2 = rr - 2.0 * a.dot(&w) + w.dot(&(&lkl * &w));
            dsigma2 += -0.5 * (tr_vinv / s2 - norm_vr2 / s4);
        }
        Some(Eval {
            loglik,
            grad_beta,
            g,
            dsigma2,
            z_score,
        })
    }

    /// Negative profiled log-likelihood and its gradient in `θ`.
    fn objective(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let q = self.q;
        let lambda = lambda_from_theta(theta, q);
        let Ok(gls) = self.gls(&lambda) else {
            return (f64::NAN, vec![f64::NAN; theta.len()]);
        };
        if !(gls.sigma2 > 0.0) {
            return (f64::NAN, vec![f64::NAN; theta.len()]);
        }
        let f = -self.profiled_loglik(&gls);
        let Some(ev) = self.evaluate(&gls.beta, &lambda, gls.sigma2) else {
            return (f64::NAN, vec![f64::NAN; theta.len()]);
        };
        // d(−ℓ)/dΛ = σ² G Λ
        let dl = &ev.g * &lambda * gls.sigma2;
        let mut grad = Vec::with_capacity(theta.len());
        for i in 0..q {
            for j in 0..=i {
                grad.push(if i == j { dl[(i, j)] * lambda[(i, i)] } else { dl[(i, j)] });
            }
        }
        (f, grad)
    }
}

/// Column centring/scaling `x = c + s·x_std` for non-intercept columns.
#[derive(Debug, Clone)]
struct ColumnMap {
    center: Vec<f64>,
    scale: Vec<f64>,
}

impl ColumnMap {
    fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows() as f64;
        let mut center = vec![0.0; x.ncols()];
        let mut scale = vec![1.0; x.ncols()];
        for j in 1..x.ncols() {
            let col = x.column(j);
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            center[j] = mean;
            if var.sqrt() > 1e-12 * (1.0 + mean.abs()) {
                scale[j] = var.sqrt();
            }
        }
        Self { center, scale }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x.clone();
        for j in 1..x.ncols() {
            for i in 0..x.nrows() {
                out[(i, j)] = (x[(i, j)] - self.center[j]) / self.scale[j];
            }
        }
        out
    }

    /// `T` with `X = X_std T`.
    fn t_matrix(&self) -> DMatrix<f64> {
        let k = self.center.len();
        let mut t = DMatrix::identity(k, k);
        for j in 1..k {
            t[(0, j)] = self.center[j];
            t[(j, j)] = self.scale[j];
        }
        t
    }
}

fn subject_designs(
    layout: &TermLayout,
    dataset: &Dataset,
) -> Vec<(usize, DMatrix<f64>, DMatrix<f64>, DVector<f64>)> {
    let groups = dataset.rows_by_subject();
    let mut out = Vec::new();
    for (s, rows) in groups.iter().enumerate() {
        let recs: Vec<&LongitudinalRecord> = rows.iter().map(|&j| &dataset.longitudinal[j]).collect();
        let (w, z, y) = layout.design(&recs);
        if !y.is_empty() {
            out.push((s, w, z, y));
        }
    }
    out
}

/// Log-likelihood of a mixed model evaluated on a dataset at arbitrary
/// parameter values, in the original (unscaled) design coordinates.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    problem: Problem,
    pub fixed_names: Vec<String>,
}

/// Unconstrained parameter vector: `β`, the lower-triangular Cholesky
/// factor of `D` (row-major, log diagonal) and `log σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmmParams {
    pub beta: Vec<f64>,
    pub log_chol: Vec<f64>,
    pub log_sigma2: f64,
}

impl LmmParams {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend_from_slice(&self.log_chol);
        v.push(self.log_sigma2);
        v
    }

    pub fn from_slice(v: &[f64], p: usize, q: usize) -> Self {
        Self {
            beta: v[..p].to_vec(),
            log_chol: v[p..p + vech_len(q)].to_vec(),
            log_sigma2: v[p + vech_len(q)],
        }
    }

    /// Parameters for a positive definite `D`.
    pub fn from_estimates(beta: &[f64], d: &DMatrix<f64>, sigma2: f64) -> Option<Self> {
        let l = d.clone().cholesky()?.l();
        let q = d.nrows();
        let mut log_chol = Vec::with_capacity(vech_len(q));
        for i in 0..q {
            for j in 0..=i {
                log_chol.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
            }
        }
        Some(Self {
            beta: beta.to_vec(),
            log_chol,
            log_sigma2: sigma2.ln(),
        })
    }

    pub fn d(&self, q: usize) -> DMatrix<f64> {
        let l = lambda_from_theta(&self.log_chol, q);
        &l * l.transpose()
    }
}

impl LmmProblem {
    pub fn new(spec: &LmmSpec, dataset: &Dataset) -> Result<Self, LmmError> {
        let layout = TermLayout::resolve(spec, dataset)?;
        let blocks: Vec<Block> = subject_designs(&layout, dataset)
            .iter()
            .map(|(_, w, z, y)| Block::new(w, z, y))
            .collect();
        let n_obs = blocks.iter().map(|b| b.m).sum();
        let mut fixed_names = vec!["(Intercept)".to_string()];
        fixed_names.extend(spec.fixed_terms.iter().cloned());
        Ok(Self {
            problem: Problem {
                blocks,
                n_obs,
                p: layout.fixed.len(),
                q: layout.random.len(),
            },
            fixed_names,
        })
    }

    pub fn n_fixed(&self) -> usize {
        self.problem.p
    }

    pub fn n_random(&self) -> usize {
        self.problem.q
    }

    pub fn n_params(&self) -> usize {
        self.problem.p + vech_len(self.problem.q) + 1
    }

    /// Marginal log-likelihood at `(β, D, σ²)`; `D` may be singular.
    pub fn loglik(&self, beta: &[f64], d: &DMatrix<f64>, sigma2: f64) -> f64 {
        let lambda = psd_factor(d) / sigma2.sqrt();
        let beta = DVector::from_column_slice(beta);
        self.problem
            .evaluate(&beta, &lambda, sigma2)
            .map(|e| e.loglik)
            .unwrap_or(f64::NAN)
    }

    pub fn loglik_params(&self, params: &LmmParams) -> f64 {
        self.loglik(&params.beta, &params.d(self.problem.q), params.log_sigma2.exp())
    }

    /// Analytic gradient of the log-likelihood with respect to
    /// [`LmmParams::to_vec`].
    pub fn gradient_params(&self, params: &LmmParams) -> Vec<f64> {
        let q = self.problem.q;
        let sigma2 = params.log_sigma2.exp();
        let l = lambda_from_theta(&params.log_chol, q);
        let lambda = &l / sigma2.sqrt();
        let beta = DVector::from_column_slice(&params.beta);
        let ev = self
            .problem
            .evaluate(&beta, &lambda, sigma2)
            .expect("positive definite marginal covariance");
        let mut out: Vec<f64> = ev.grad_beta.iter().copied().collect();
        let dl = -(&ev.g * &l);
        for i in 0..q {
            for j in 0..=i {
                out.push(if i == j { dl[(i, j)] * l[(i, i)] } else { dl[(i, j)] });
            }
        }
        out.push(ev.dsigma2 * sigma2);
        out
    }

    /// `Σ_i Z_iᵀ V_i⁻¹ (y_i − W_i β)`.
    pub fn random_score(&self, beta: &[f64], d: &DMatrix<f64>, sigma2: f64) -> Vec<f64> {
        let lambda = psd_factor(d) / sigma2.sqrt();
        let beta = DVector::from_column_slice(beta);
        self.problem
            .evaluate(&beta, &lambda, sigma2)
            .map(|e| e.z_score.iter().copied().collect())
            .unwrap_or_default()
    }
}

/// Fits one mixed model by maximum likelihood.
pub fn fit_lmm(spec: &LmmSpec, dataset: &Dataset) -> Result<LmmFit, LmmError> {
    fit_lmm_with(spec, dataset, &BfgsOptions::default())
}

pub(crate) fn fit_lmm_with(
    spec: &LmmSpec,
    dataset: &Dataset,
    opts: &BfgsOptions,
) -> Result<LmmFit, LmmError> {
    let layout = TermLayout::resolve(spec, dataset)?;
    let designs = subject_designs(&layout, dataset);
    let (p, q) = (layout.fixed.len(), layout.random.len());
    let n_obs: usize = designs.iter().map(|d| d.3.len()).sum();
    let n_subjects = designs.len();
    let n_params = p + vech_len(q) + 1;
    if n_subjects < 2 || n_obs <= n_params {
        return Err(LmmError::InsufficientData {
            n_obs,
            n_subjects,
            n_params,
        });
    }

    let all_w = stack(designs.iter().map(|d| &d.1));
    let all_z = stack(designs.iter().map(|d| &d.2));
    let wmap = ColumnMap::fit(&all_w);
    let zmap = ColumnMap::fit(&all_z);
    let blocks: Vec<Block> = designs
        .iter()
        .map(|(_, w, z, y)| Block::new(&wmap.apply(w), &zmap.apply(z), y))
        .collect();
    let problem = Problem {
        blocks,
        n_obs,
        p,
        q,
    };
    let tw_inv = wmap
        .t_matrix()
        .try_inverse()
        .ok_or(LmmError::RankDeficient)?;
    let tz_inv = zmap
        .t_matrix()
        .try_inverse()
        .ok_or(LmmError::RankDeficient)?;

    let mut fixed_names = vec!["(Intercept)".to_string()];
    fixed_names.extend(spec.fixed_terms.iter().cloned());

    // Residual-free data: the likelihood is unbounded, report the OLS line.
    let zero = DMatrix::zeros(q, q);
    let ols = problem.gls(&zero)?;
    let total_ss: f64 = problem.blocks.iter().map(|b| b.yy).sum();
    if ols.sigma2 * n_obs as f64 <= 1e-12 * total_ss.max(f64::MIN_POSITIVE) {
        let sigma2 = ols.sigma2.max(f64::MIN_POSITIVE);
        let beta = &tw_inv * &ols.beta;
        let loglik = -0.5 * n_obs as f64 * ((2.0 * PI).ln() + 1.0 + sigma2.ln());
        warn!("mixed model for `{}`: zero residual variance, boundary fit", spec.response);
        return Ok(LmmFit {
            spec: spec.clone(),
            layout,
            t_table: t_table(&fixed_names, beta.as_slice(), None, n_obs, n_subjects),
            fixed_names,
            beta: beta.iter().copied().collect(),
            d: zero,
            sigma2,
            loglik,
            n_obs,
            n_subjects,
            convergence: Convergence {
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
                boundary: true,
                degenerate: true,
            },
        });
    }

    let theta0 = vec![0.0; vech_len(q)];
    let out = minimize_bfgs(|t| problem.objective(t), theta0, opts);
    let lambda = lambda_from_theta(&out.x, q);
    let gls = problem.gls(&lambda)?;
    let loglik = problem.profiled_loglik(&gls);
    let rel_cov = &lambda * lambda.transpose();
    let min_eig = rel_cov
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v));
    let boundary = min_eig < 1e-10;
    let d = &tz_inv * (rel_cov * gls.sigma2) * tz_inv.transpose();
    let d = (&d + d.transpose()) * 0.5;
    let beta = &tw_inv * &gls.beta;
    let cov_beta = gls
        .xtvx
        .clone()
        .try_inverse()
        .map(|inv| &tw_inv * (inv * gls.sigma2) * tw_inv.transpose());
    let gradient_norm = out.grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !out.converged {
        warn!(
            "mixed model for `{}` stopped after {} iterations (gradient {gradient_norm:e})",
            spec.response, out.iterations
        );
    }
    Ok(LmmFit {
        spec: spec.clone(),
        layout,
        t_table: t_table(&fixed_names, beta.as_slice(), cov_beta.as_ref(), n_obs, n_subjects),
        fixed_names,
        beta: beta.iter().copied().collect(),
        d,
        sigma2: gls.sigma2,
        loglik,
        n_obs,
        n_subjects,
        convergence: Convergence {
            iterations: out.iterations,
            gradient_norm,
            converged: out.converged,
            boundary,
            degenerate: false,
        },
    })
}

fn stack<'a>(mats: impl Iterator<Item = &'a DMatrix<f64>>) -> DMatrix<f64> {
    let mats: Vec<&DMatrix<f64>> = mats.collect();
    let rows = mats.iter().map(|m| m.nrows()).sum();
    let cols = mats.first().map(|m| m.ncols()).unwrap_or(0);
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in mats {
        out.rows_mut(r, m.nrows()).copy_from(m);
        r += m.nrows();
    }
    out
}

/// Containment degrees of freedom: `N − n − (p − 1)` for every coefficient.
fn t_table(
    names: &[String],
    beta: &[f64],
    cov: Option<&DMatrix<f64>>,
    n_obs: usize,
    n_subjects: usize,
) -> Vec<TTableRow> {
    let df = n_obs as f64 - n_subjects as f64 - (names.len() as f64 - 1.0);
    let dist = StudentsT::new(0.0, 1.0, df.max(1.0)).ok();
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = cov.map(|c| c[(j, j)].max(0.0).sqrt()).unwrap_or(f64::NAN);
            let t = beta[j] / se;
            let p = match (&dist, t.is_finite() && df > 0.0) {
                (Some(d), true) => 2.0 * (1.0 - d.cdf(t.abs())),
                _ => f64::NAN,
            };
            TTableRow {
                term: name.clone(),
                estimate: beta[j],
                std_error: se,
                df,
                t_value: t,
                p_value: p,
            }
        })
        .collect()
}

/// Fits one model per covariate with shared fixed/random terms. Results keep
/// the order of `y_names` and are identical for any worker count.
pub fn fit_all_lmms(
    dataset: &Dataset,
    y_names: &[String],
    fixed_terms: &[String],
    random_terms: &[String],
    workers: usize,
) -> Vec<Result<LmmFit, LmmError>> {
    parallel::map(workers, y_names, |name| {
        let spec = LmmSpec {
            response: name.clone(),
            fixed_terms: fixed_terms.to_vec(),
            random_terms: random_terms.to_vec(),
        };
        fit_lmm(&spec, dataset).map_err(|e| LmmError::Covariate {
            covariate: name.clone(),
            source: Box::new(e),
        })
    })
}

/// Conditional mean of the random effects given one subject's rows:
/// `û = D Zᵀ V⁻¹ (y − Wβ)`, evaluated as `Λ M⁻¹ Λᵀ Zᵀ r` with
/// `ΛΛᵀ = D/σ²` and `M = I + Λᵀ Zᵀ Z Λ`.
pub fn predict_random_effects(
    fit: &LmmFit,
    subject_rows: &[&LongitudinalRecord],
) -> Result<Vec<f64>, LmmError> {
    let (w, z, y) = fit.layout.design(subject_rows);
    if y.is_empty() {
        return Err(LmmError::NoObservations);
    }
    let q = fit.q();
    let lambda = psd_factor(&fit.d) / fit.sigma2.sqrt();
    let r = y - w * DVector::from_column_slice(&fit.beta);
    let lt = lambda.transpose();
    let m = DMatrix::identity(q, q) + &lt * z.transpose() * &z * &lambda;
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let condition = hi / lo;
    if !(condition < 1e14) {
        return Err(LmmError::SingularCovariance { condition });
    }
    let ch = m.cholesky().ok_or(LmmError::SingularCovariance { condition })?;
    let u = &lambda * ch.solve(&(&lt * (z.transpose() * r)));
    Ok(u.iter().copied().collect())
}

/// Predicted random effects for every subject across all covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectSummary {
    pub subject_ids: Vec<SubjectId>,
    pub columns: Vec<String>,
    /// `n × Σ q_s`.
    pub values: DMatrix<f64>,
}

/// Predicted random effects for all subjects of `dataset`, one block of
/// columns per fit. Subjects without any observation of a covariate get the
/// prior mean (zero) for that block.
pub fn summarize_lmms(
    fits: &[LmmFit],
    dataset: &Dataset,
    allow_flagged: bool,
) -> Result<RandomEffectSummary, LmmError> {
    if fits.is_empty() {
        return Err(LmmError::EmptyFitList);
    }
    if !allow_flagged {
        if let Some(f) = fits.iter().find(|f| !f.convergence.converged) {
            return Err(LmmError::NotConverged {
                covariate: f.spec.response.clone(),
            });
        }
    }
    let groups = dataset.rows_by_subject();
    let columns: Vec<String> = fits.iter().flat_map(|f| f.ranef_names()).collect();
    let mut values = DMatrix::zeros(dataset.n_subjects(), columns.len());
    let mut offset = 0;
    for fit in fits {
        let q = fit.q();
        for (i, rows) in groups.iter().enumerate() {
            let recs: Vec<&LongitudinalRecord> = rows.iter().map(|&j| &dataset.longitudinal[j]).collect();
            match predict_random_effects(fit, &recs) {
                Ok(u) => {
                    for (k, v) in u.into_iter().enumerate() {
                        values[(i, offset + k)] = v;
                    }
                }
                Err(LmmError::NoObservations) => warn!(
                    "subject {} has no observations of `{}`; using zero random effects",
                    dataset.survival[i].id, fit.spec.response
                ),
                Err(e) => {
                    return Err(LmmError::Covariate {
                        covariate: fit.spec.response.clone(),
                        source: Box::new(e),
                    })
                }
            }
        }
        offset += q;
    }
    Ok(RandomEffectSummary {
        subject_ids: dataset.survival.iter().map(|r| r.id.clone()).collect(),
        columns,
        values,
    })
}
