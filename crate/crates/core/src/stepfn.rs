use serde::{Deserialize, Serialize};

/// Right-continuous step function on the real line.
///
/// `values[k]` holds on `[knots[k], knots[k + 1])`; to the left of the first
/// knot the function equals `value_before_first_knot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    knots: Vec<f64>,
    values: Vec<f64>,
    value_before_first_knot: f64,
}

impl StepFunction {
    /// Builds a step function, panicking if the knots are not strictly
    /// increasing or the lengths disagree.
    pub fn new(knots: Vec<f64>, values: Vec<f64>, value_before_first_knot: f64) -> Self {
        assert_eq!(knots.len(), values.len(), "knots and values must align");
        assert!(
            knots.windows(2).all(|w| w[0] < w[1]),
            "step function knots must be strictly increasing"
        );
        Self {
            knots,
            values,
            value_before_first_knot,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self::new(Vec::new(), Vec::new(), value)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_before_first_knot(&self) -> f64 {
        self.value_before_first_knot
    }

    /// Value at `t` (right-continuous).
    pub fn eval(&self, t: f64) -> f64 {
        // number of knots <= t
        let idx = self.knots.partition_point(|&k| k <= t);
        if idx == 0 {
            self.value_before_first_knot
        } else {
            self.values[idx - 1]
        }
    }

    /// Left limit `f(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        let idx = self.knots.partition_point(|&k| k < t);
        if idx == 0 {
            self.value_before_first_knot
        } else {
            self.values[idx - 1]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn right_continuity_and_left_limits() {
        let f = StepFunction::new(vec![1.0, 2.0], vec![0.5, 0.25], 1.0);
        assert_eq!(f.eval(0.5), 1.0);
        assert_eq!(f.eval(1.0), 0.5);
        assert_eq!(f.eval_left(1.0), 1.0);
        assert_eq!(f.eval(1.999), 0.5);
        assert_eq!(f.eval(2.0), 0.25);
        assert_eq!(f.eval_left(2.0), 0.5);
        assert_eq!(f.eval(100.0), 0.25);
    }

    #[test]
    #[should_panic]
    fn rejects_unsorted_knots() {
        StepFunction::new(vec![2.0, 1.0], vec![0.0, 0.0], 1.0);
    }
}
