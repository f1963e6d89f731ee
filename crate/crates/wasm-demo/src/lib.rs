//! Browser bindings: ground-truth surfaces, kernel correlations and GP prior draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

use edvcm_core::gp::{exponential_correlation, GpFactor, KernelSpec};
use edvcm_core::grid::triangle_cells;
use edvcm_core::simulation::surface::{generate_true_surface, SurfaceSpec};

fn surface(max_duration: u32, noise_fraction: f64, seed: u32) -> Result<Vec<f64>, String> {
    let spec = SurfaceSpec {
        max_duration,
        noise_fraction,
        seed: u64::from(seed),
        ..SurfaceSpec::default()
    };
    let (grid, _) = generate_true_surface(&spec).map_err(|e| e.to_string())?;
    Ok(grid.into_values())
}

fn correlation_row(max_duration: u32, phi: f64, tau: f64, d: u32, t: u32) -> Result<Vec<f64>, String> {
    if !(phi > 0.0 && tau > 0.0) {
        return Err("lengthscales must be positive".into());
    }
    if t < 1 || t > d || d > max_duration {
        return Err(format!("cell ({d}, {t}) is outside the triangle"));
    }
    Ok(triangle_cells(max_duration)
        .into_iter()
        .map(|(d2, t2)| {
            exponential_correlation(f64::from(d.abs_diff(d2)), phi)
                * exponential_correlation(f64::from(t.abs_diff(t2)), tau)
        })
        .collect())
}

fn prior_draw(max_duration: u32, sigma: f64, phi: f64, tau: f64, seed: u32) -> Result<Vec<f64>, String> {
    let spec = KernelSpec::exposure(max_duration, 1e-8);
    let gp = GpFactor::new(&spec, sigma, phi, tau).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let z: Vec<f64> = (0..spec.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(gp.transform(&z))
}

fn js(r: Result<Vec<f64>, String>) -> Result<Vec<f64>, JsError> {
    r.map_err(|e| JsError::new(&e))
}

/// Number of cells in the coefficient triangle.
#[wasm_bindgen]
pub fn triangle_size(max_duration: u32) -> usize {
    triangle_cells(max_duration).len()
}

/// Smooth-plus-noise simulation surface, row-major by duration.
#[wasm_bindgen]
pub fn true_surface(max_duration: u32, noise_fraction: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    js(surface(max_duration, noise_fraction, seed))
}

/// Prior correlation between cell `(d, t)` and every cell of the triangle.
#[wasm_bindgen]
pub fn kernel_correlation_row(max_duration: u32, phi: f64, tau: f64, d: u32, t: u32) -> Result<Vec<f64>, JsError> {
    js(correlation_row(max_duration, phi, tau, d, t))
}

/// One draw of the coefficient triangle from the GP prior.
#[wasm_bindgen]
pub fn gp_prior_draw(max_duration: u32, sigma: f64, phi: f64, tau: f64, seed: u32) -> Result<Vec<f64>, JsError> {
    js(prior_draw(max_duration, sigma, phi, tau, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_row_peaks_at_the_cell() {
        let row = correlation_row(5, 2.0, 1.0, 3, 2).unwrap();
        let idx = triangle_cells(5).iter().position(|&c| c == (3, 2)).unwrap();
        assert_eq!(row[idx], 1.0);
        assert!(row.iter().all(|&r| r > 0.0 && r <= 1.0));
        assert!(correlation_row(5, 2.0, 1.0, 3, 4).is_err());
    }

    #[test]
    fn draws_are_seeded() {
        let a = prior_draw(4, 0.5, 2.0, 2.0, 9).unwrap();
        assert_eq!(a, prior_draw(4, 0.5, 2.0, 2.0, 9).unwrap());
        assert_ne!(a, prior_draw(4, 0.5, 2.0, 2.0, 10).unwrap());
        assert_eq!(a.len(), triangle_size(4));
    }

    #[test]
    fn surface_has_triangle_shape() {
        assert_eq!(surface(6, 0.25, 1).unwrap().len(), 21);
    }
}
