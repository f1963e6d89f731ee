//! Natural cubic spline bases for covariate adjustment.

use serde::{Deserialize, Serialize};

use crate::error::{EdvcmError, Result};
use crate::summaries::quantile_sorted;

/// A fitted natural cubic spline basis (truncated-power form) on one covariate.
///
/// `x` is first mapped to `[0, 1]` using the sample range. Knots sit at the
/// boundary values and at the `i/df` sample quantiles, giving `df` columns;
/// columns are centered at their sample means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSplineBasis {
    pub min: f64,
    pub max: f64,
    /// Knots on the scaled axis, boundary knots included.
    pub knots: Vec<f64>,
    pub means: Vec<f64>,
}

fn cube_plus(v: f64) -> f64 {
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

impl NaturalSplineBasis {
    pub fn fit(values: &[f64], df: usize) -> Result<Self> {
        if df == 0 {
            return Err(EdvcmError::Config("spline df must be at least 1".into()));
        }
        if values.is_empty() {
            return Err(EdvcmError::Empty("covariate values"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EdvcmError::NonFinite("covariate value".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
        if !(max > min) {
            return Err(EdvcmError::Config(
                "constant covariate gives a degenerate spline basis".into(),
            ));
        }
        let scale = |x: f64| (x - min) / (max - min);
        let mut knots = vec![0.0];
        for i in 1..df {
            knots.push(scale(quantile_sorted(&sorted, i as f64 / df as f64)));
        }
        knots.push(1.0);
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(EdvcmError::Config(format!(
                "covariate has too few distinct values for {df} spline degrees of freedom"
            )));
        }
        let mut basis = Self {
            min,
            max,
            knots,
            means: vec![0.0; df],
        };
        let mut sums = vec![0.0; df];
        for &v in values {
            for (s, b) in sums.iter_mut().zip(basis.raw(v)) {
                *s += b;
            }
        }
        basis.means = sums.into_iter().map(|s| s / values.len() as f64).collect();
        Ok(basis)
    }

    pub fn df(&self) -> usize {
        self.knots.len() - 1
    }

    fn raw(&self, x: f64) -> Vec<f64> {
        let u = (x - self.min) / (self.max - self.min);
        let k = self.knots.len();
        let last = self.knots[k - 1];
        let dk = |j: usize| (cube_plus(u - self.knots[j]) - cube_plus(u - last)) / (last - self.knots[j]);
        let mut out = Vec::with_capacity(k - 1);
        out.push(u);
        let d_pen = if k > 2 { dk(k - 2) } else { 0.0 };
        for j in 0..k.saturating_sub(2) {
            out.push(dk(j) - d_pen);
        }
        out
    }

    /// Centered basis columns at `x`.
    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        self.raw(x).into_iter().zip(&self.means).map(|(b, m)| b - m).collect()
    }
}

/// Expand each covariate column of `rows` into `df` spline columns.
///
/// Returns the expanded rows and the fitted bases, one per input column.
pub fn build_covariate_design(rows: &[Vec<f64>], df: usize) -> Result<(Vec<Vec<f64>>, Vec<NaturalSplineBasis>)> {
    let k = rows.first().map_or(0, |r| r.len());
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(EdvcmError::Dimension {
            context: "covariate row",
            expected: k,
            got: r.len(),
        });
    }
    let bases = (0..k)
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            NaturalSplineBasis::fit(&col, df)
                .map_err(|e| EdvcmError::Config(format!("covariate {}: {e}", j + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let expanded = rows
        .iter()
        .map(|r| r.iter().zip(&bases).flat_map(|(&x, b)| b.evaluate(x)).collect())
        .collect();
    Ok((expanded, bases))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<f64> {
        (0..200).map(|i| ((i * 37) % 200) as f64 * 0.35 - 10.0 + (i as f64 * 0.1).sin()).collect()
    }

    #[test]
    fn df_one_is_centered_linear() {
        let x = sample();
        let b = NaturalSplineBasis::fit(&x, 1).unwrap();
        assert_eq!(b.df(), 1);
        let cols: Vec<f64> = x.iter().map(|&v| b.evaluate(v)[0]).collect();
        let mean = cols.iter().sum::<f64>() / cols.len() as f64;
        assert!(mean.abs() < 1e-12);
        // linear in x
        let slope = (b.evaluate(1.0)[0] - b.evaluate(0.0)[0]) / 1.0;
        for &v in &x {
            assert!((b.evaluate(v)[0] - b.evaluate(0.0)[0] - slope * v).abs() < 1e-9);
        }
    }

    #[test]
    fn knots_at_tertiles() {
        let x: Vec<f64> = (0..=300).map(f64::from).collect();
        let b = NaturalSplineBasis::fit(&x, 3).unwrap();
        assert_eq!(b.knots.len(), 4);
        assert!((b.knots[1] - 1.0 / 3.0).abs() < 1e-9);
        assert!((b.knots[2] - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn natural_boundary_conditions() {
        let x = sample();
        let b = NaturalSplineBasis::fit(&x, 3).unwrap();
        let h = 1e-3 * (b.max - b.min);
        let second = |at: f64, j: usize| {
            (b.evaluate(at + h)[j] - 2.0 * b.evaluate(at)[j] + b.evaluate(at - h)[j]) / (h * h)
        };
        let scale = (b.max - b.min).powi(-2);
        for j in 0..3 {
            // linear beyond the boundary knots: second derivative vanishes at and past them
            assert!(second(b.min - h, j).abs() < 1e-6 * scale.max(1.0), "col {j} lower");
            assert!(second(b.max + h, j).abs() < 1e-6 * scale.max(1.0), "col {j} upper");
            assert!(second(b.min, j).abs() < 0.01 * scale * 6.0, "col {j} at lower knot");
        }
        // interior curvature is non-zero for the nonlinear columns
        let mid = 0.5 * (b.min + b.max);
        assert!(second(mid, 1).abs() > 1e-3 * scale);
    }

    #[test]
    fn constant_covariate_rejected() {
        assert!(NaturalSplineBasis::fit(&[2.0; 10], 3).is_err());
    }

    #[test]
    fn six_covariates_three_df_gives_eighteen_columns() {
        let x = sample();
        let rows: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| (0..6).map(|j| v * (j + 1) as f64 + ((i * j) % 7) as f64).collect())
            .collect();
        let (expanded, bases) = build_covariate_design(&rows, 3).unwrap();
        assert_eq!(bases.len(), 6);
        assert!(expanded.iter().all(|r| r.len() == 18));
    }
}
