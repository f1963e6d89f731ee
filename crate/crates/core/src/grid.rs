//! Triangular and rectangular coefficient grids.
//!
//! Exposure coefficients live on the triangle `{(d, t) : 1 <= t <= d <= D}`,
//! vectorized duration-major: `(1,1), (2,1), (2,2), (3,1), ...`. Lag
//! coefficients live on a `D x L` rectangle, also duration-major.

use serde::{Deserialize, Serialize};

use crate::error::{EdvcmError, Result};

/// Number of cells in the exposure triangle for maximum duration `max_duration`.
pub fn triangle_len(max_duration: u32) -> usize {
    let n = max_duration as usize;
    n * (n + 1) / 2
}

/// Position of `(d, t)` in the duration-major vectorization of the triangle.
pub fn grid_index(d: u32, t: u32, max_duration: u32) -> Result<usize> {
    if t < 1 || t > d || d > max_duration {
        return Err(EdvcmError::GridIndex {
            d,
            t,
            max_duration,
        });
    }
    let d = d as usize;
    Ok(d * (d - 1) / 2 + (t as usize - 1))
}

/// Inverse of [`grid_index`].
pub fn inverse_grid_index(index: usize, max_duration: u32) -> Result<(u32, u32)> {
    if index >= triangle_len(max_duration) {
        return Err(EdvcmError::Dimension {
            context: "triangle index",
            expected: triangle_len(max_duration),
            got: index,
        });
    }
    // largest d with d(d-1)/2 <= index
    let mut d = ((((8 * index + 1) as f64).sqrt() + 1.0) / 2.0).floor() as usize;
    while d * (d - 1) / 2 > index {
        d -= 1;
    }
    while (d + 1) * d / 2 <= index {
        d += 1;
    }
    let t = index - d * (d - 1) / 2 + 1;
    Ok((d as u32, t as u32))
}

/// Position of `(d, l)` in the duration-major lag grid.
pub fn lag_index(d: u32, l: u32, max_duration: u32, max_lag: u32) -> Result<usize> {
    if d < 1 || d > max_duration || l < 1 || l > max_lag {
        return Err(EdvcmError::LagIndex {
            d,
            l,
            max_duration,
            max_lag,
        });
    }
    Ok((d as usize - 1) * max_lag as usize + (l as usize - 1))
}

/// `(d, t)` coordinates of every triangle cell in vectorization order.
pub fn triangle_cells(max_duration: u32) -> Vec<(u32, u32)> {
    (1..=max_duration)
        .flat_map(|d| (1..=d).map(move |t| (d, t)))
        .collect()
}

/// `(d, l)` coordinates of every lag cell in vectorization order.
pub fn lag_cells(max_duration: u32, max_lag: u32) -> Vec<(u32, u32)> {
    (1..=max_duration)
        .flat_map(|d| (1..=max_lag).map(move |l| (d, l)))
        .collect()
}

/// Lower-triangular matrix of duration- and day-specific coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientGrid {
    max_duration: u32,
    values: Vec<f64>,
}

impl CoefficientGrid {
    pub fn new(max_duration: u32, values: Vec<f64>) -> Result<Self> {
        let expected = triangle_len(max_duration);
        if values.len() != expected {
            return Err(EdvcmError::Dimension {
                context: "coefficient grid",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            max_duration,
            values,
        })
    }

    pub fn zeros(max_duration: u32) -> Self {
        Self {
            max_duration,
            values: vec![0.0; triangle_len(max_duration)],
        }
    }

    pub fn max_duration(&self) -> u32 {
        self.max_duration
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, d: u32, t: u32) -> Result<f64> {
        Ok(self.values[grid_index(d, t, self.max_duration)?])
    }

    pub fn set(&mut self, d: u32, t: u32, value: f64) -> Result<()> {
        let i = grid_index(d, t, self.max_duration)?;
        self.values[i] = value;
        Ok(())
    }

    /// Coefficients of one duration, `t = 1..=d`.
    pub fn row(&self, d: u32) -> Result<&[f64]> {
        let start = grid_index(d, 1, self.max_duration)?;
        Ok(&self.values[start..start + d as usize])
    }
}

/// `D x L` matrix of lagged coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCoefficientGrid {
    max_duration: u32,
    max_lag: u32,
    values: Vec<f64>,
}

impl LagCoefficientGrid {
    pub fn new(max_duration: u32, max_lag: u32, values: Vec<f64>) -> Result<Self> {
        let expected = max_duration as usize * max_lag as usize;
        if values.len() != expected {
            return Err(EdvcmError::Dimension {
                context: "lag coefficient grid",
                expected,
                got: values.len(),
            });
        }
        Ok(Self {
            max_duration,
            max_lag,
            values,
        })
    }

    pub fn zeros(max_duration: u32, max_lag: u32) -> Self {
        Self {
            max_duration,
            max_lag,
            values: vec![0.0; max_duration as usize * max_lag as usize],
        }
    }

    pub fn max_duration(&self) -> u32 {
        self.max_duration
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, d: u32, l: u32) -> Result<f64> {
        Ok(self.values[lag_index(d, l, self.max_duration, self.max_lag)?])
    }

    pub fn set(&mut self, d: u32, l: u32, value: f64) -> Result<()> {
        let i = lag_index(d, l, self.max_duration, self.max_lag)?;
        self.values[i] = value;
        Ok(())
    }
}
