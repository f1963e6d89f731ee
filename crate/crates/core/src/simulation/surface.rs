//! Ground-truth coefficient surfaces: a thin-plate radial basis expansion
//! plus iid Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EdvcmError, Result};
use crate::grid::{lag_cells, triangle_cells, CoefficientGrid, LagCoefficientGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurfaceSpec {
    pub max_duration: u32,
    /// Noise variance as a multiple of the spline's sample variance.
    pub noise_fraction: f64,
    pub n_tps_basis: usize,
    /// Sample SD of the spline component on the log-rate scale.
    pub surface_sd: f64,
    /// Constant added to the spline component.
    pub surface_mean: f64,
    pub seed: u64,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            max_duration: 14,
            noise_fraction: 0.25,
            n_tps_basis: 5,
            surface_sd: 0.1,
            surface_mean: 0.0,
            seed: 1,
        }
    }
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_duration == 0 {
            return Err(EdvcmError::Duration(0));
        }
        if !(self.noise_fraction >= 0.0 && self.noise_fraction.is_finite()) {
            return Err(EdvcmError::Config(format!(
                "noise_fraction must be non-negative, got {}",
                self.noise_fraction
            )));
        }
        if !(self.surface_sd >= 0.0) || !self.surface_mean.is_finite() {
            return Err(EdvcmError::Config("surface_sd must be non-negative and surface_mean finite".into()));
        }
        if self.n_tps_basis == 0 {
            return Err(EdvcmError::Config("n_tps_basis must be positive".into()));
        }
        Ok(())
    }
}

/// Surface values before and after adding noise, in cell order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceValues {
    pub spline: Vec<f64>,
    pub surface: Vec<f64>,
}

/// `r² log r`, continuous at 0.
pub fn thin_plate_kernel(r: f64) -> f64 {
    if r <= 0.0 {
        0.0
    } else {
        r * r * r.ln()
    }
}

fn dist(a: (u32, u32), b: (u32, u32)) -> f64 {
    let dx = a.0 as f64 - b.0 as f64;
    let dy = a.1 as f64 - b.1 as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Greedy maximin knot placement.
///
/// The first knot is the cell closest to the centroid; each further knot
/// maximizes the distance to the knots chosen so far. Ties go to the earlier
/// cell in `cells` order.
pub fn knot_positions(cells: &[(u32, u32)], n: usize) -> Vec<(u32, u32)> {
    if cells.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(cells.len());
    let cx = cells.iter().map(|c| c.0 as f64).sum::<f64>() / cells.len() as f64;
    let cy = cells.iter().map(|c| c.1 as f64).sum::<f64>() / cells.len() as f64;
    let centroid_dist = |c: &(u32, u32)| ((c.0 as f64 - cx).powi(2) + (c.1 as f64 - cy).powi(2)).sqrt();
    let mut first = 0;
    for (i, c) in cells.iter().enumerate() {
        if centroid_dist(c) < centroid_dist(&cells[first]) - 1e-12 {
            first = i;
        }
    }
    let mut knots = vec![cells[first]];
    let mut nearest: Vec<f64> = cells.iter().map(|&c| dist(c, cells[first])).collect();
    while knots.len() < n {
        let mut best = 0;
        for i in 1..cells.len() {
            if nearest[i] > nearest[best] + 1e-12 {
                best = i;
            }
        }
        knots.push(cells[best]);
        for (i, &c) in cells.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(c, cells[best]));
        }
    }
    knots
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, 0.0);
    }
    (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0))
}

/// Generate a surface over arbitrary integer coordinates.
pub fn generate_surface_on(cells: &[(u32, u32)], spec: &SurfaceSpec) -> Result<SurfaceValues> {
    spec.validate()?;
    if cells.is_empty() {
        return Err(EdvcmError::Empty("surface cells"));
    }
    if spec.n_tps_basis > cells.len() {
        log::warn!(
            "reducing thin-plate knots from {} to the {} available cells",
            spec.n_tps_basis,
            cells.len()
        );
    }
    let knots = knot_positions(cells, spec.n_tps_basis);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = knots.iter().map(|_| StandardNormal.sample(&mut rng)).collect();
    let raw: Vec<f64> = cells
        .iter()
        .map(|&c| {
            knots
                .iter()
                .zip(&weights)
                .map(|(&k, w)| w * thin_plate_kernel(dist(c, k)))
                .sum()
        })
        .collect();
    let (m, v) = mean_var(&raw);
    let scale = if v > 0.0 { spec.surface_sd / v.sqrt() } else { 0.0 };
    let spline: Vec<f64> = raw.iter().map(|x| spec.surface_mean + scale * (x - m)).collect();
    let noise_sd = (spec.noise_fraction * mean_var(&spline).1).sqrt();
    let surface = spline
        .iter()
        .map(|s| {
            let e: f64 = StandardNormal.sample(&mut rng);
            s + noise_sd * e
        })
        .collect();
    Ok(SurfaceValues { spline, surface })
}

/// Exposure-coefficient truth over the triangle `1 ≤ t ≤ d ≤ D`.
pub fn generate_true_surface(spec: &SurfaceSpec) -> Result<(CoefficientGrid, SurfaceValues)> {
    let cells = triangle_cells(spec.max_duration);
    let values = generate_surface_on(&cells, spec)?;
    let grid = CoefficientGrid::new(spec.max_duration, values.surface.clone())?;
    Ok((grid, values))
}

/// Lag-coefficient truth over the rectangle `d ≤ D`, `l ≤ max_lag`.
pub fn generate_lag_surface(spec: &SurfaceSpec, max_lag: u32) -> Result<(LagCoefficientGrid, SurfaceValues)> {
    let cells = lag_cells(spec.max_duration, max_lag);
    let values = generate_surface_on(&cells, spec)?;
    let grid = LagCoefficientGrid::new(spec.max_duration, max_lag, values.surface.clone())?;
    Ok((grid, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64, seed: u64) -> SurfaceSpec {
        SurfaceSpec {
            noise_fraction: noise,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_noise_is_pure_spline() {
        let (g, v) = generate_true_surface(&spec(0.0, 3)).unwrap();
        assert_eq!(v.spline, v.surface);
        assert_eq!(g.values(), &v.spline[..]);
        let (_, var) = mean_var(&v.spline);
        assert!((var.sqrt() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        let a = generate_true_surface(&spec(1.0, 11)).unwrap();
        let b = generate_true_surface(&spec(1.0, 11)).unwrap();
        assert_eq!(a, b);
        let c = generate_true_surface(&spec(1.0, 12)).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn noise_variance_matches_fraction() {
        let mut ratios = Vec::new();
        for seed in 0..200 {
            let (_, v) = generate_true_surface(&spec(1.0, seed)).unwrap();
            let diff: Vec<f64> = v.surface.iter().zip(&v.spline).map(|(a, b)| a - b).collect();
            ratios.push(mean_var(&diff).1 / mean_var(&v.spline).1);
        }
        let avg = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((avg - 1.0).abs() < 0.25, "{avg}");
        // each single draw of 105 cells is also close
        let within = ratios.iter().filter(|r| (**r - 1.0).abs() < 0.25).count();
        assert!(within as f64 / ratios.len() as f64 > 0.8);
    }

    #[test]
    fn knots_are_distinct_and_spread() {
        let cells = triangle_cells(14);
        let k = knot_positions(&cells, 5);
        assert_eq!(k.len(), 5);
        for i in 0..5 {
            for j in 0..i {
                assert!(dist(k[i], k[j]) >= 3.0);
            }
        }
        assert_eq!(knot_positions(&triangle_cells(1), 5), vec![(1, 1)]);
    }

    #[test]
    fn tiny_grid_reduces_knots() {
        let s = SurfaceSpec {
            max_duration: 1,
            ..spec(0.25, 1)
        };
        let (g, v) = generate_true_surface(&s).unwrap();
        assert_eq!(g.values().len(), 1);
        assert_eq!(v.spline, vec![0.0]);
    }

    #[test]
    fn thin_plate_kernel_values() {
        assert_eq!(thin_plate_kernel(0.0), 0.0);
        assert_eq!(thin_plate_kernel(1.0), 0.0);
        assert!((thin_plate_kernel(2.0) - 4.0 * 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_negative_noise() {
        assert!(generate_true_surface(&spec(-0.1, 1)).is_err());
    }
}
