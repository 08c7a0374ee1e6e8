//! Predictive-performance measures for right-censored data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stepfn::StepFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("no cases (events) by time {0}")]
    NoCases(f64),
    #[error("no controls (subjects at risk) after time {0}")]
    NoControls(f64),
    #[error("censoring survival estimate is zero at time {0}; inverse weight undefined")]
    ZeroCensoringSurvival(f64),
    #[error("input lengths differ")]
    LengthMismatch,
    #[error("empty input")]
    Empty,
    #[error("non-finite time or score")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "tdauc")]
    TdAuc,
    #[serde(rename = "c")]
    CIndex,
    #[serde(rename = "brier")]
    Brier,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::TdAuc, Metric::CIndex, Metric::Brier];

    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Metric::TdAuc => "tdAUC",
            Metric::CIndex => "C",
            Metric::Brier => "Brier",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Brier)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tdauc" => Ok(Metric::TdAuc),
            "c" => Ok(Metric::CIndex),
            "brier" => Ok(Metric::Brier),
            other => Err(format!("unknown metric `{other}` (expected tdauc, c or brier)")),
        }
    }
}

fn check(times: &[f64], events: &[bool], scores: &[f64]) -> Result<(), MetricError> {
    if times.len() != events.len() || times.len() != scores.len() {
        return Err(MetricError::LengthMismatch);
    }
    if times.is_empty() {
        return Err(MetricError::Empty);
    }
    if times.iter().chain(scores).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// Fenwick tree of counts over score ranks.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of entries with rank < `i`.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn ranks(scores: &[f64]) -> (Vec<usize>, usize) {
    let mut u: Vec<f64> = scores.to_vec();
    u.sort_by(f64::total_cmp);
    u.dedup();
    let r = scores
        .iter()
        .map(|s| u.partition_point(|v| v.total_cmp(s).is_lt()))
        .collect();
    (r, u.len())
}

/// Harrell's concordance index for risk scores (higher = riskier).
///
/// A pair is comparable when the subject with the shorter time had an event;
/// at tied times an event is ordered before a censoring. Tied scores count ½.
pub fn concordance_index(times: &[f64], events: &[bool], risk: &[f64]) -> Result<f64, MetricError> {
    check(times, events, risk)?;
    let (rank, m) = ranks(risk);
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    let mut tree = Fenwick(vec![0; m + 1]);
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let end = k + order[k..].iter().take_while(|&&i| times[i] == t).count();
        let group = &order[k..end];
        for &i in group.iter().filter(|&&i| !events[i]) {
            tree.add(rank[i]);
            inserted += 1;
        }
        for &i in group.iter().filter(|&&i| events[i]) {
            let below = tree.prefix(rank[i]);
            let upto = tree.prefix(rank[i] + 1);
            concordant += below;
            tied += upto - below;
            comparable += inserted;
        }
        for &i in group.iter().filter(|&&i| events[i]) {
            tree.add(rank[i]);
            inserted += 1;
        }
        k = end;
    }
    if comparable == 0 {
        return Err(MetricError::NoComparablePairs);
    }
    Ok((concordant as f64 + 0.5 * tied as f64) / comparable as f64)
}

/// Cumulative/dynamic AUC at `t` with Kaplan–Meier weighted sensitivity and
/// specificity: for threshold `c`,
/// `TP(c) = (1 − S_c(t))·P(X > c) / (1 − S(t))` and
/// `FP(c) = S_c(t)·P(X > c) / S(t)`, where `S_c` is the Kaplan–Meier curve
/// of subjects scoring above `c`. The curve is integrated by trapezoids over
/// the distinct scores, so tied scores count ½.
pub fn td_auc(times: &[f64], events: &[bool], risk: &[f64], t: f64) -> Result<f64, MetricError> {
    check(times, events, risk)?;
    let n = times.len();
    if !(0..n).any(|i| times[i] <= t && events[i]) {
        return Err(MetricError::NoCases(t));
    }
    if !(0..n).any(|i| times[i] > t) {
        return Err(MetricError::NoControls(t));
    }
    // distinct event times up to t
    let mut ev_times: Vec<f64> = (0..n).filter(|&i| events[i] && times[i] <= t).map(|i| times[i]).collect();
    ev_times.sort_by(f64::total_cmp);
    ev_times.dedup();
    let k = ev_times.len();

    let km = |d: &[f64], r: &[f64]| -> f64 {
        d.iter()
            .zip(r)
            .map(|(&d, &r)| if r > 0.0 { 1.0 - d / r } else { 1.0 })
            .product()
    };
    let mut d_all = vec![0.0; k];
    let mut r_all = vec![0.0; k];
    let add = |i: usize, d: &mut [f64], r: &mut [f64]| {
        let upto = ev_times.partition_point(|&u| u <= times[i]);
        for v in r[..upto].iter_mut() {
            *v += 1.0;
        }
        if events[i] && times[i] <= t {
            d[upto - 1] += 1.0;
        }
    };
    for i in 0..n {
        add(i, &mut d_all, &mut r_all);
    }
    let s_t = km(&d_all, &r_all);
    if s_t <= 0.0 {
        return Err(MetricError::NoControls(t));
    }
    if s_t >= 1.0 {
        return Err(MetricError::NoCases(t));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| risk[b].total_cmp(&risk[a]));
    let mut d = vec![0.0; k];
    let mut r = vec![0.0; k];
    let mut roc = vec![(0.0, 0.0)];
    let mut j = 0;
    while j < n {
        let c = risk[order[j]];
        while j < n && risk[order[j]] == c {
            add(order[j], &mut d, &mut r);
            j += 1;
        }
        let p_above = j as f64 / n as f64;
        let s_c = km(&d, &r);
        roc.push((s_c * p_above / s_t, (1.0 - s_c) * p_above / (1.0 - s_t)));
    }
    let auc = roc
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) * 0.5)
        .sum::<f64>();
    Ok(auc.clamp(0.0, 1.0))
}

/// Kaplan–Meier estimate of the censoring distribution. Events tied with a
/// censoring time count as occurring first, so they are not at risk of
/// being censored at that time.
pub fn censoring_survival(times: &[f64], events: &[bool]) -> StepFunction {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut at_risk = times.len();
    let mut g = 1.0;
    let (mut knots, mut values) = (Vec::new(), Vec::new());
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let end = k + order[k..].iter().take_while(|&&i| times[i] == t).count();
        let censored = order[k..end].iter().filter(|&&i| !events[i]).count();
        let failed = end - k - censored;
        if censored > 0 {
            g *= 1.0 - censored as f64 / (at_risk - failed) as f64;
            knots.push(t);
            values.push(g);
        }
        at_risk -= end - k;
        k = end;
    }
    StepFunction::new(knots, values, 1.0)
}

/// Inverse-probability-of-censoring weighted Brier score at `t` for
/// predicted survival probabilities `surv` (`Ŝ_i(t)`).
pub fn brier_score(times: &[f64], events: &[bool], surv: &[f64], t: f64) -> Result<f64, MetricError> {
    check(times, events, surv)?;
    let g = censoring_survival(times, events);
    let g_t = g.eval(t);
    let mut total = 0.0;
    for i in 0..times.len() {
        if times[i] <= t && events[i] {
            let w = g.eval_left(times[i]);
            if w <= 0.0 {
                return Err(MetricError::ZeroCensoringSurvival(times[i]));
            }
            total += surv[i] * surv[i] / w;
        } else if times[i] > t {
            if g_t <= 0.0 {
                return Err(MetricError::ZeroCensoringSurvival(t));
            }
            total += (1.0 - surv[i]).powi(2) / g_t;
        }
    }
    Ok(total / times.len() as f64)
}

/// Evaluates `metric` at `t` from predicted survival probabilities; the risk
/// score for the rank-based measures is `1 − Ŝ_i(t)`.
pub fn evaluate(metric: Metric, times: &[f64], events: &[bool], surv: &[f64], t: f64) -> Result<f64, MetricError> {
    let risk = || surv.iter().map(|s| 1.0 - s).collect::<Vec<f64>>();
    match metric {
        Metric::TdAuc => td_auc(times, events, &risk(), t),
        Metric::CIndex => concordance_index(times, events, &risk()),
        Metric::Brier => brier_score(times, events, surv, t),
    }
}
