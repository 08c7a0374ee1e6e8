//! Toy-data builders and independent reference implementations shared by
//! the integration tests. Oracles here avoid the library's own numerics:
//! dense matrices, direct enumeration and a derivative-free optimizer.

#![allow(dead_code)]

use std::path::PathBuf;

use dynpred::data::{load_dataset, Schema, SurvivalRecord};
use dynpred::Dataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn dataset(survival_csv: &str, longitudinal_csv: &str, schema: &Schema) -> Dataset {
    load_dataset(survival_csv.as_bytes(), longitudinal_csv.as_bytes(), schema).unwrap()
}

pub fn surv(times: &[f64], events: &[bool]) -> Vec<SurvivalRecord> {
    times
        .iter()
        .zip(events)
        .enumerate()
        .map(|(i, (&time, &event))| SurvivalRecord {
            id: format!("s{i}").as_str().into(),
            time,
            event,
            baseline: vec![],
        })
        .collect()
}

/// Directory holding `survival.csv` and `longitudinal.csv` of the PBC2
/// fixture, if available.
pub fn pbc2_dir() -> Option<PathBuf> {
    let candidates = [
        std::env::var_os("DYNPRED_PBC2_DIR").map(PathBuf::from),
        Some(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pbc2")),
    ];
    candidates
        .into_iter()
        .flatten()
        .find(|d| d.join("survival.csv").is_file() && d.join("longitudinal.csv").is_file())
}

// ---------------------------------------------------------------- LMM toys

/// One subject's design: fixed `W`, random `Z`, response `y`.
pub struct Block {
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DVector<f64>,
}

/// Random-intercept-and-slope toy in CSV form plus the same data as
/// dense blocks (intercept and `fuptime` in both `W` and `Z`).
pub fn lmm_toy(seed: u64, n_subjects: usize, visits: usize) -> (Dataset, Vec<Block>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::from("id,time,event\n");
    let mut l = String::from("id,fuptime,y\n");
    let mut blocks = Vec::new();
    for i in 0..n_subjects {
        s.push_str(&format!("{},{},{}\n", i + 1, 5.0 + i as f64, i % 2));
        let u0: f64 = 1.2 * rng.sample::<f64, _>(StandardNormal);
        let u1: f64 = 0.6 * rng.sample::<f64, _>(StandardNormal);
        let m = visits - (i % 2);
        let mut w = DMatrix::zeros(m, 2);
        let mut y = DVector::zeros(m);
        for j in 0..m {
            let t = j as f64 * 0.7 + 0.13 * (i as f64);
            let e: f64 = 0.4 * rng.sample::<f64, _>(StandardNormal);
            let v = 1.0 + u0 + (0.5 + u1) * t + e;
            l.push_str(&format!("{},{},{}\n", i + 1, t, v));
            w[(j, 0)] = 1.0;
            w[(j, 1)] = t;
            y[j] = v;
        }
        blocks.push(Block { z: w.clone(), w, y });
    }
    (dataset(&s, &l, &Schema::default()), blocks)
}

/// Marginal log-likelihood by explicit assembly of each `V_i`.
pub fn dense_lmm_loglik(blocks: &[Block], beta: &DVector<f64>, d: &DMatrix<f64>, sigma2: f64) -> f64 {
    let mut ll = 0.0;
    for b in blocks {
        let m = b.y.len();
        let v = &b.z * d * b.z.transpose() + DMatrix::identity(m, m) * sigma2;
        let lu = v.clone().lu();
        let det = lu.determinant();
        if !(det > 0.0) {
            return f64::NEG_INFINITY;
        }
        let r = &b.y - &b.w * beta;
        let vr = lu.solve(&r).unwrap();
        ll += -0.5 * (m as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln() + r.dot(&vr));
    }
    ll
}

/// `(β, D, σ²)` from `[β (2), L00, L10, L11, log σ²]` with `D = LLᵀ`.
pub fn unpack_lmm(x: &[f64]) -> (DVector<f64>, DMatrix<f64>, f64) {
    let beta = DVector::from_column_slice(&x[..2]);
    let l = DMatrix::from_row_slice(2, 2, &[x[2], 0.0, x[3], x[4]]);
    (beta, &l * l.transpose(), x[5].exp())
}

/// Nelder–Mead minimization with restarts until the value stops improving.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], step: f64) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut best = x0.to_vec();
    let mut fbest = f(&best);
    for _restart in 0..60 {
        let mut simplex: Vec<Vec<f64>> = vec![best.clone()];
        for i in 0..n {
            let mut p = best.clone();
            p[i] += if p[i].abs() > 1e-3 { step * p[i].abs() } else { step };
            simplex.push(p);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
        for _ in 0..20_000 {
            let mut idx: Vec<usize> = (0..=n).collect();
            idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
            vals = idx.iter().map(|&i| vals[i]).collect();
            if (vals[n] - vals[0]).abs() <= 1e-15 * (1.0 + vals[0].abs()) {
                break;
            }
            let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
            let along = |t: f64| -> Vec<f64> { (0..n).map(|j| centroid[j] + t * (simplex[n][j] - centroid[j])).collect() };
            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = f(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    vals[n] = fe;
                } else {
                    simplex[n] = xr;
                    vals[n] = fr;
                }
            } else if fr < vals[n - 1] {
                simplex[n] = xr;
                vals[n] = fr;
            } else {
                let (xc, fc) = if fr < vals[n] {
                    let x = along(-0.5);
                    let v = f(&x);
                    (x, v)
                } else {
                    let x = along(0.5);
                    let v = f(&x);
                    (x, v)
                };
                if fc < vals[n].min(fr) {
                    simplex[n] = xc;
                    vals[n] = fc;
                } else {
                    for i in 1..=n {
                        simplex[i] = (0..n).map(|j| simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j])).collect();
                        vals[i] = f(&simplex[i]);
                    }
                }
            }
        }
        let i0 = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        let improved = fbest - vals[i0];
        if vals[i0] < fbest {
            best = simplex[i0].clone();
            fbest = vals[i0];
        }
        if improved.abs() < 1e-13 && _restart > 2 {
            break;
        }
    }
    (best, fbest)
}

/// `E[u | y] = D Zᵀ (Z D Zᵀ + σ² I)⁻¹ (y − Wβ)` from the joint normal law.
pub fn joint_normal_blup(b: &Block, beta: &DVector<f64>, d: &DMatrix<f64>, sigma2: f64) -> DVector<f64> {
    let m = b.y.len();
    let cov_uy = d * b.z.transpose();
    let var_y = &b.z * d * b.z.transpose() + DMatrix::identity(m, m) * sigma2;
    let r = &b.y - &b.w * beta;
    cov_uy * var_y.lu().solve(&r).unwrap()
}

// ---------------------------------------------------------------- Cox oracles

/// Breslow log partial likelihood by direct enumeration of risk sets.
pub fn breslow_loglik(beta: &[f64], x: &DMatrix<f64>, times: &[f64], events: &[bool]) -> f64 {
    let n = times.len();
    let eta: Vec<f64> = (0..n).map(|i| (0..beta.len()).map(|j| x[(i, j)] * beta[j]).sum()).collect();
    let mut event_times: Vec<f64> = (0..n).filter(|&i| events[i]).map(|i| times[i]).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut ll = 0.0;
    for &t in &event_times {
        let d = (0..n).filter(|&i| events[i] && times[i] == t).count() as f64;
        let s: f64 = (0..n).filter(|&i| events[i] && times[i] == t).map(|i| eta[i]).sum();
        let risk: f64 = (0..n).filter(|&j| times[j] >= t).map(|j| eta[j].exp()).sum();
        ll += s - d * risk.ln();
    }
    ll
}

/// Gradient and Hessian of the Breslow log partial likelihood, enumerated.
pub fn breslow_derivatives(beta: &[f64], x: &DMatrix<f64>, times: &[f64], events: &[bool]) -> (DVector<f64>, DMatrix<f64>) {
    let (n, p) = (times.len(), beta.len());
    let eta: Vec<f64> = (0..n).map(|i| (0..p).map(|j| x[(i, j)] * beta[j]).sum()).collect();
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let mut event_times: Vec<f64> = (0..n).filter(|&i| events[i]).map(|i| times[i]).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    for &t in &event_times {
        let dead: Vec<usize> = (0..n).filter(|&i| events[i] && times[i] == t).collect();
        let risk: Vec<usize> = (0..n).filter(|&j| times[j] >= t).collect();
        let s0: f64 = risk.iter().map(|&j| eta[j].exp()).sum();
        let s1 = DVector::from_fn(p, |k, _| risk.iter().map(|&j| eta[j].exp() * x[(j, k)]).sum::<f64>());
        let s2 = DMatrix::from_fn(p, p, |a, b| risk.iter().map(|&j| eta[j].exp() * x[(j, a)] * x[(j, b)]).sum::<f64>());
        let d = dead.len() as f64;
        for &i in &dead {
            for k in 0..p {
                g[k] += x[(i, k)];
            }
        }
        g -= &s1 * (d / s0);
        h -= (s2 / s0 - &s1 * s1.transpose() / (s0 * s0)) * d;
    }
    (g, h)
}

/// Minimizer of `−ℓ(β)/n + ½λ‖β‖²` by damped Newton on dense derivatives.
pub fn ridge_cox_newton(x: &DMatrix<f64>, times: &[f64], events: &[bool], lambda: f64) -> Vec<f64> {
    let (n, p) = (times.len() as f64, x.ncols());
    let obj = |b: &[f64]| -breslow_loglik(b, x, times, events) / n + 0.5 * lambda * b.iter().map(|v| v * v).sum::<f64>();
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let (g, h) = breslow_derivatives(&beta, x, times, events);
        let grad = -g / n + DVector::from_column_slice(&beta) * lambda;
        let hess = -h / n + DMatrix::identity(p, p) * lambda;
        let step = hess.lu().solve(&grad).unwrap();
        let f0 = obj(&beta);
        let mut t = 1.0;
        let mut next: Vec<f64>;
        loop {
            next = beta.iter().zip(step.iter()).map(|(b, s)| b - t * s).collect();
            if obj(&next) <= f0 + 1e-16 || t < 1e-10 {
                break;
            }
            t *= 0.5;
        }
        let moved = beta.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        beta = next;
        if moved < 1e-14 {
            break;
        }
    }
    beta
}

/// Cumulative Breslow hazard at `t` by enumeration.
pub fn breslow_hazard_at(t: f64, beta: &[f64], x: &DMatrix<f64>, times: &[f64], events: &[bool]) -> f64 {
    let n = times.len();
    let eta: Vec<f64> = (0..n).map(|i| (0..beta.len()).map(|j| x[(i, j)] * beta[j]).sum()).collect();
    let mut event_times: Vec<f64> = (0..n).filter(|&i| events[i] && times[i] <= t).map(|i| times[i]).collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    event_times
        .iter()
        .map(|&tk| {
            let d = (0..n).filter(|&i| events[i] && times[i] == tk).count() as f64;
            let risk: f64 = (0..n).filter(|&j| times[j] >= tk).map(|j| eta[j].exp()).sum();
            d / risk
        })
        .sum()
}

// ---------------------------------------------------------------- metric oracles

/// Harrell's C over all ordered pairs.
pub fn pairwise_c(times: &[f64], events: &[bool], risk: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..times.len() {
        for j in 0..times.len() {
            let comparable = events[i] && (times[i] < times[j] || (times[i] == times[j] && !events[j]));
            if comparable {
                den += 1.0;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Empirical AUC of the label `t_i ≤ t` against the score.
pub fn binary_auc(times: &[f64], risk: &[f64], t: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..times.len() {
        for j in 0..times.len() {
            if times[i] <= t && times[j] > t {
                den += 1.0;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Reverse Kaplan–Meier `Ĝ(s)` (or its left limit) by explicit product.
pub fn censoring_survival(times: &[f64], events: &[bool], s: f64, left: bool) -> f64 {
    let mut cens: Vec<f64> = (0..times.len())
        .filter(|&i| !events[i] && if left { times[i] < s } else { times[i] <= s })
        .map(|i| times[i])
        .collect();
    cens.sort_by(f64::total_cmp);
    cens.dedup();
    cens.iter()
        .map(|&c| {
            // events at the same time leave the risk set first
            let at_risk = (0..times.len()).filter(|&j| times[j] > c || (times[j] == c && !events[j])).count() as f64;
            let d = (0..times.len()).filter(|&j| times[j] == c && !events[j]).count() as f64;
            1.0 - d / at_risk
        })
        .product()
}

pub fn manual_brier(times: &[f64], events: &[bool], surv: &[f64], t: f64) -> f64 {
    let n = times.len() as f64;
    let mut total = 0.0;
    for i in 0..times.len() {
        if times[i] <= t && events[i] {
            total += surv[i] * surv[i] / censoring_survival(times, events, times[i], true);
        } else if times[i] > t {
            total += (1.0 - surv[i]).powi(2) / censoring_survival(times, events, t, false);
        }
    }
    total / n
}
