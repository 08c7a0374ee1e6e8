//! Synthetic data: Weibull survival times driven by subject-level random
//! intercepts and slopes of several longitudinal markers.
//!
//! Survival follows `S(t) = exp(−λ t^ν e^{lp})`, so `λ` is a rate-scale
//! parameter and `λ^{−1/ν}` is the time scale at `lp = 0`.

use nalgebra::{DMatrix, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    BaselineColumn, BaselineKind, BaselineValue, Dataset, LongitudinalRecord, Schema, SubjectId,
    SurvivalRecord,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation setting: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    /// The first `p_relevant` markers' random intercepts enter the hazard.
    pub p_relevant: usize,
    /// Visit grid; every visit after time 0 is moved earlier by a
    /// Uniform(0, `jitter`) amount.
    pub visits: Vec<f64>,
    pub jitter: f64,
    /// Drop visits at or after the subject's event or censoring time.
    pub truncate_at_event: bool,
    pub lambda: f64,
    pub nu: f64,
    /// Log hazard ratio per unit of a relevant random intercept.
    pub effect: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub var_intercept: f64,
    pub var_slope: f64,
    pub corr: f64,
    pub residual_sd: f64,
    /// When set, survival times are `landmark + T` and visits are restricted
    /// to `[0, landmark]`, so every subject is at risk at the landmark.
    pub landmark: Option<f64>,
    /// Administrative censoring (on the time scale of `T`).
    pub admin_censoring: Option<f64>,
    /// Uniform(a, b) random censoring (on the time scale of `T`).
    pub uniform_censoring: Option<(f64, f64)>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 200,
            p: 10,
            p_relevant: 2,
            visits: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            jitter: 0.2,
            truncate_at_event: true,
            lambda: 0.1,
            nu: 1.5,
            effect: 1.0,
            beta0: 2.0,
            beta1: 0.3,
            var_intercept: 1.0,
            var_slope: 0.25,
            corr: 0.3,
            residual_sd: 0.5,
            landmark: Some(2.0),
            admin_censoring: Some(10.0),
            uniform_censoring: Some((0.0, 20.0)),
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Invalid(m.to_string()));
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.p < 1 || self.p_relevant > self.p {
            return bad("need p >= 1 and p_relevant <= p");
        }
        if !(self.lambda > 0.0 && self.nu > 0.0) {
            return bad("lambda and nu must be positive");
        }
        if self.visits.is_empty() || self.visits.iter().any(|v| *v < 0.0) {
            return bad("visits must be a nonempty list of nonnegative times");
        }
        if !(self.var_intercept >= 0.0 && self.var_slope >= 0.0 && self.corr.abs() <= 1.0) {
            return bad("random-effect covariance is not valid");
        }
        if let Some((a, b)) = self.uniform_censoring {
            if !(0.0 <= a && a < b) {
                return bad("uniform censoring window must satisfy 0 <= a < b");
            }
        }
        Ok(())
    }

    /// Random-effect covariance of each marker's (intercept, slope).
    pub fn d(&self) -> Matrix2<f64> {
        let cov = self.corr * (self.var_intercept * self.var_slope).sqrt();
        Matrix2::new(self.var_intercept, cov, cov, self.var_slope)
    }

    pub fn y_names(&self) -> Vec<String> {
        (1..=self.p).map(|s| format!("y{s}")).collect()
    }
}

/// Generating values kept for checks against estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// `n × 2p`: intercept and slope deviation per marker.
    pub random_effects: DMatrix<f64>,
    pub linear_predictor: Vec<f64>,
    /// Uncensored event times (including any landmark offset).
    pub event_times: Vec<f64>,
}

/// `T = (−log U / (λ e^{lp}))^{1/ν}` with `U ~ Uniform(0, 1]`.
pub fn simulate_t_weibull<R: Rng>(lambda: f64, nu: f64, linear_predictor: &[f64], rng: &mut R) -> Vec<f64> {
    linear_predictor
        .iter()
        .map(|lp| {
            let u: f64 = 1.0 - rng.random::<f64>();
            weibull_inverse(u, lambda, nu, *lp)
        })
        .collect()
}

/// Time at which `S(t) = u`.
pub fn weibull_inverse(u: f64, lambda: f64, nu: f64, lp: f64) -> f64 {
    (-u.ln() / (lambda * lp.exp())).powf(1.0 / nu)
}

pub fn weibull_cdf(t: f64, lambda: f64, nu: f64, lp: f64) -> f64 {
    1.0 - (-lambda * t.powf(nu) * lp.exp()).exp()
}

/// Generates a dataset with markers `y1..yp`, one standard-normal baseline
/// covariate `x1`, and the generating truth.
pub fn simulate_prclmm_data(config: &SimConfig) -> Result<(Dataset, SimTruth), SimError> {
    config.validate()?;
    let (n, p) = (config.n, config.p);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let chol = config
        .d()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| {
            // singular covariance: perfectly correlated or degenerate slope
            let a = config.var_intercept.sqrt();
            let b = config.var_slope.sqrt() * config.corr.signum();
            Matrix2::new(a, 0.0, b, 0.0)
        });

    let mut u = DMatrix::zeros(n, 2 * p);
    for i in 0..n {
        for s in 0..p {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            u[(i, 2 * s)] = chol[(0, 0)] * z0;
            u[(i, 2 * s + 1)] = chol[(1, 0)] * z0 + chol[(1, 1)] * z1;
        }
    }
    let lp: Vec<f64> = (0..n)
        .map(|i| config.effect * (0..config.p_relevant).map(|s| u[(i, 2 * s)]).sum::<f64>())
        .collect();
    let residual = simulate_t_weibull(config.lambda, config.nu, &lp, &mut rng);
    let offset = config.landmark.unwrap_or(0.0);

    let mut survival = Vec::with_capacity(n);
    let mut longitudinal = Vec::new();
    let mut event_times = Vec::with_capacity(n);
    for i in 0..n {
        let id = SubjectId(format!("{}", i + 1));
        let mut c = f64::INFINITY;
        if let Some(h) = config.admin_censoring {
            c = c.min(h);
        }
        if let Some((a, b)) = config.uniform_censoring {
            c = c.min(rng.random_range(a..b));
        }
        let t = residual[i];
        let (obs, event) = if t <= c { (t, true) } else { (c, false) };
        let x1: f64 = rng.sample(StandardNormal);
        survival.push(SurvivalRecord {
            id: id.clone(),
            time: offset + obs,
            event,
            baseline: vec![BaselineValue::Numeric(x1)],
        });
        event_times.push(offset + t);

        for (v, &grid) in config.visits.iter().enumerate() {
            let shift = if grid > 0.0 && config.jitter > 0.0 {
                rng.random_range(0.0..config.jitter)
            } else {
                0.0
            };
            let time = (grid - shift).max(0.0);
            let keep = match config.landmark {
                Some(tl) => time <= tl,
                None => !config.truncate_at_event || time < obs || v == 0,
            };
            let values = (0..p)
                .map(|s| {
                    let e: f64 = rng.sample(StandardNormal);
                    Some(
                        config.beta0
                            + u[(i, 2 * s)]
                            + (config.beta1 + u[(i, 2 * s + 1)]) * time
                            + config.residual_sd * e,
                    )
                })
                .collect();
            if keep {
                longitudinal.push(LongitudinalRecord {
                    id: id.clone(),
                    fuptime: time,
                    values,
                    regressors: vec![],
                });
            }
        }
    }
    let mut ds = Dataset {
        survival,
        longitudinal,
        baseline_columns: vec![BaselineColumn {
            name: "x1".into(),
            kind: BaselineKind::Numeric,
        }],
        covariate_names: config.y_names(),
        regressor_names: vec![],
        schema: Schema::default(),
        landmark: None,
    };
    ds.schema = ds.roundtrip_schema();
    Ok((
        ds,
        SimTruth {
            random_effects: u,
            linear_predictor: lp,
            event_times,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_inversion() {
        assert!((weibull_inverse((-1f64).exp(), 1.0, 1.0, 0.0) - 1.0).abs() < 1e-15);
        let t = weibull_inverse(0.3, 0.5, 1.7, 0.2);
        assert!((weibull_cdf(t, 0.5, 1.7, 0.2) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn shape_contract() {
        let cfg = SimConfig {
            n: 10,
            p: 2,
            visits: vec![0.0, 1.0, 2.0],
            landmark: None,
            ..Default::default()
        };
        let (ds, truth) = simulate_prclmm_data(&cfg).unwrap();
        assert_eq!(ds.n_subjects(), 10);
        assert!(ds.longitudinal.len() <= 30);
        assert_eq!(truth.random_effects.shape(), (10, 4));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(simulate_prclmm_data(&SimConfig { n: 1, ..Default::default() }).is_err());
        assert!(simulate_prclmm_data(&SimConfig { lambda: 0.0, ..Default::default() }).is_err());
        assert!(simulate_prclmm_data(&SimConfig { p_relevant: 11, ..Default::default() }).is_err());
    }
}
