//! Small numerical helpers shared across the estimators.

/// Neumaier-compensated accumulator.
///
/// Aggregates over tens of thousands of paths stay accurate to a few ulps,
/// which the time-conservation and EM-monotonicity checks rely on.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if !t.is_finite() {
            self.sum = t;
            return;
        }
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        if self.sum.is_finite() {
            self.sum + self.compensation
        } else {
            self.sum
        }
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for x in iter {
            acc.add(x);
        }
        acc
    }
}

/// Compensated sum of an iterator of floats.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}

/// `log(Σ exp(x_i))` with max subtraction; `-inf` if every entry is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = values.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Normalized exponentials of `values`; `None` when every entry is `-inf`.
pub fn softmax(values: &[f64]) -> Option<Vec<f64>> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = values.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for w in &mut out {
        *w /= total;
    }
    Some(out)
}

/// `count * ln(x)` under the `0 * ln 0 = 0` convention.
#[inline]
pub fn xlogy(count: f64, x: f64) -> f64 {
    if count == 0.0 {
        0.0
    } else {
        count * x.ln()
    }
}

/// Nudges a probability vector so that its left-to-right floating-point sum
/// is exactly 1. One entry moves by a few ulps, the largest one that can
/// absorb the correction.
pub fn close_simplex(row: &mut [f64]) {
    let total = |r: &[f64]| r.iter().fold(0.0, |a, &v| a + v);
    if row.is_empty() || total(row) == 1.0 {
        return;
    }
    let mut order: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    for k in order {
        let original = row[k];
        // the sum is monotone in row[k]; walk one ulp at a time towards 1
        let up = total(row) < 1.0;
        for _ in 0..64 {
            row[k] = if up {
                row[k].next_up()
            } else {
                row[k].next_down()
            };
            let t = total(row);
            if t == 1.0 {
                return;
            }
            if (t > 1.0) == up || row[k] <= 0.0 {
                break;
            }
        }
        row[k] = original;
    }
}
