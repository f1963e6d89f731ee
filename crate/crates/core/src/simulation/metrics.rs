//! Bias, RMSE and interval coverage across simulation replicates.

use serde::{Deserialize, Serialize};

use crate::summaries::Interval;

/// Truth magnitude below which percent bias is replaced by absolute bias.
pub const NEAR_ZERO_TRUTH: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    /// `100 · mean(est − truth) / truth`, or the absolute bias when
    /// `bias_is_absolute` is set.
    pub percent_bias: f64,
    pub bias_is_absolute: bool,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_estimate: f64,
    pub estimate_variance: f64,
    pub mean_width: f64,
    /// Replicates contributing (failed fits are excluded).
    pub n: usize,
}

/// Metrics for one coefficient; `None` entries are failed replicates.
pub fn compute_metrics(estimates: &[Option<Interval>], truth: f64) -> CellMetrics {
    let ok: Vec<&Interval> = estimates.iter().flatten().collect();
    let n = ok.len();
    if n == 0 {
        return CellMetrics {
            percent_bias: f64::NAN,
            bias_is_absolute: truth.abs() < NEAR_ZERO_TRUTH,
            bias: f64::NAN,
            rmse: f64::NAN,
            coverage: f64::NAN,
            mean_estimate: f64::NAN,
            estimate_variance: f64::NAN,
            mean_width: f64::NAN,
            n,
        };
    }
    let nf = n as f64;
    let mean_estimate = ok.iter().map(|e| e.mean).sum::<f64>() / nf;
    let bias = mean_estimate - truth;
    let mse = ok.iter().map(|e| (e.mean - truth).powi(2)).sum::<f64>() / nf;
    let estimate_variance = ok.iter().map(|e| (e.mean - mean_estimate).powi(2)).sum::<f64>() / nf;
    let coverage = ok.iter().filter(|e| e.contains(truth)).count() as f64 / nf;
    let bias_is_absolute = truth.abs() < NEAR_ZERO_TRUTH;
    CellMetrics {
        percent_bias: if bias_is_absolute { bias } else { 100.0 * bias / truth },
        bias_is_absolute,
        bias,
        rmse: mse.sqrt(),
        coverage,
        mean_estimate,
        estimate_variance,
        mean_width: ok.iter().map(|e| e.width()).sum::<f64>() / nf,
        n,
    }
}
