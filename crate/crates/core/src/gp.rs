//! Separable exponential product kernels over the coefficient grids.
//!
//! `Cov(b[a,b], b[a',b']) = s2 * exp(-|a-a'|/len_a) * exp(-|b-b'|/len_b)`,
//! with `(a, b) = (d, t)` for exposure coefficients and `(d, l)` for lag
//! coefficients. Coefficients are sampled non-centered: `coef = L z`.

use serde::{Deserialize, Serialize};

use crate::error::{EdvcmError, Result};
use crate::grid::{lag_cells, triangle_cells};
use crate::linalg::{cholesky, solve_lower, Matrix};
use crate::priors::{HyperKind, PriorSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Largest jitter (relative to the mean diagonal) tried before giving up.
pub const JITTER_CAP: f64 = 1e-4;

fn check_positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(EdvcmError::Hyperparameter { name, value: v })
    }
}

/// One-dimensional exponential correlation `exp(-dist / lengthscale)`.
#[inline]
pub fn exponential_correlation(dist: f64, lengthscale: f64) -> f64 {
    (-dist / lengthscale).exp()
}

/// Covariance between cells `(d, t)` and `(d2, t2)`.
pub fn kernel_value(sigma2: f64, phi: f64, tau: f64, d: u32, t: u32, d2: u32, t2: u32) -> Result<f64> {
    check_positive("sigma2", sigma2)?;
    check_positive("phi", phi)?;
    check_positive("tau", tau)?;
    let dd = (d as f64 - d2 as f64).abs();
    let dt = (t as f64 - t2 as f64).abs();
    Ok(sigma2 * exponential_correlation(dd, phi) * exponential_correlation(dt, tau))
}

/// Coordinates of a coefficient vector plus the relative diagonal jitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub coords: Vec<(u32, u32)>,
    pub jitter: f64,
}

impl KernelSpec {
    pub fn exposure(max_duration: u32, jitter: f64) -> Self {
        Self {
            coords: triangle_cells(max_duration),
            jitter,
        }
    }

    pub fn lag(max_duration: u32, max_lag: u32, jitter: f64) -> Self {
        Self {
            coords: lag_cells(max_duration, max_lag),
            jitter,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Kernel matrix with `jitter * sigma2` added to the diagonal.
pub fn build_covariance(sigma2: f64, len_a: f64, len_b: f64, spec: &KernelSpec) -> Result<Matrix> {
    check_positive("sigma2", sigma2)?;
    check_positive("lengthscale", len_a)?;
    check_positive("lengthscale", len_b)?;
    if !(spec.jitter >= 0.0) {
        return Err(EdvcmError::Config("jitter must be non-negative".into()));
    }
    // Coordinates are integers, so exp(-k / len) is tabulated once per call.
    let max_a = spec.coords.iter().map(|c| c.0).max().unwrap_or(0) as usize;
    let max_b = spec.coords.iter().map(|c| c.1).max().unwrap_or(0) as usize;
    let table = |len: f64, max: usize| -> Vec<f64> { (0..=max).map(|k| exponential_correlation(k as f64, len)).collect() };
    let (ta, tb) = (table(len_a, max_a), table(len_b, max_b));
    let n = spec.len();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        let (ai, bi) = spec.coords[i];
        for j in 0..=i {
            let (aj, bj) = spec.coords[j];
            let v = sigma2 * ta[ai.abs_diff(aj) as usize] * tb[bi.abs_diff(bj) as usize];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += spec.jitter * sigma2;
    }
    Ok(m)
}

/// Cholesky factor together with any extra diagonal that was needed.
#[derive(Debug, Clone)]
pub struct JitteredFactor {
    pub factor: Matrix,
    /// Absolute amount added to the diagonal beyond the input matrix.
    pub added_jitter: f64,
}

/// Factor `sigma`, escalating diagonal jitter tenfold on failure up to
/// [`JITTER_CAP`] times the mean diagonal.
pub fn cholesky_with_jitter(sigma: &Matrix) -> Result<JitteredFactor> {
    if !sigma.is_symmetric() {
        return Err(EdvcmError::Config("covariance matrix is not symmetric".into()));
    }
    let first = match cholesky(sigma) {
        Ok(factor) => {
            return Ok(JitteredFactor {
                factor,
                added_jitter: 0.0,
            })
        }
        Err(f) => f,
    };
    let n = sigma.rows();
    let mean_diag = (0..n).map(|i| sigma[(i, i)].abs()).sum::<f64>() / n.max(1) as f64;
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let cap = JITTER_CAP * scale;
    let mut jitter = 1e-10 * scale;
    if !(jitter.is_normal() && cap.is_finite()) {
        return Err(EdvcmError::NotPositiveDefinite {
            row: first.row,
            pivot: first.pivot,
            jitter: 0.0,
        });
    }
    let mut last = first;
    while jitter <= cap * (1.0 + 1e-12) {
        let mut m = sigma.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        match cholesky(&m) {
            Ok(factor) => {
                log::debug!("cholesky needed extra jitter {jitter:e}");
                return Ok(JitteredFactor {
                    factor,
                    added_jitter: jitter,
                });
            }
            Err(f) => last = f,
        }
        jitter *= 10.0;
    }
    Err(EdvcmError::NotPositiveDefinite {
        row: last.row,
        pivot: last.pivot,
        jitter: cap,
    })
}

/// `coef = L z`.
pub fn noncentered_transform(z: &[f64], factor: &Matrix) -> Result<Vec<f64>> {
    if factor.rows() != z.len() || factor.cols() != z.len() {
        return Err(EdvcmError::Dimension {
            context: "non-centered transform",
            expected: factor.rows(),
            got: z.len(),
        });
    }
    Ok(factor.lower_matvec(z))
}

/// Centered density `log N(x; 0, L Lᵀ)`.
pub fn mvn_log_density(x: &[f64], factor: &Matrix) -> f64 {
    let w = solve_lower(factor, x);
    let n = x.len() as f64;
    let log_det: f64 = (0..x.len()).map(|i| factor[(i, i)].ln()).sum();
    -0.5 * n * LN_2PI - log_det - 0.5 * w.iter().map(|v| v * v).sum::<f64>()
}

/// `sum log N(z_i; 0, 1)` and its gradient `-z`.
pub fn standard_normal_log_density(z: &[f64]) -> (f64, Vec<f64>) {
    let n = z.len() as f64;
    let ss: f64 = z.iter().map(|v| v * v).sum();
    (-0.5 * n * LN_2PI - 0.5 * ss, z.iter().map(|v| -v).collect())
}

/// Value and gradients of the non-centered prior.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPrior {
    pub value: f64,
    pub grad_z: Vec<f64>,
    pub grad_log_hyper: Vec<f64>,
}

/// Prior on the whitened coefficients and log-hyperparameters.
///
/// `log_hyper` pairs each hyperparameter kind with its log value; the
/// returned density includes the log-transform Jacobian.
pub fn log_prior(z: &[f64], log_hyper: &[(HyperKind, f64)], spec: &PriorSpec) -> Result<LogPrior> {
    spec.validate()?;
    let (mut value, grad_z) = standard_normal_log_density(z);
    let mut grad_log_hyper = Vec::with_capacity(log_hyper.len());
    for &(kind, u) in log_hyper {
        if !u.is_finite() {
            return Err(EdvcmError::Hyperparameter {
                name: kind.name(),
                value: u.exp(),
            });
        }
        let (v, g) = spec.family(kind).log_density_log_scale(u);
        value += v;
        grad_log_hyper.push(g);
    }
    Ok(LogPrior {
        value,
        grad_z,
        grad_log_hyper,
    })
}

/// A factored GP block: coordinates, hyperparameters and `L`.
#[derive(Debug, Clone)]
pub struct GpFactor {
    spec: KernelSpec,
    len_a: f64,
    len_b: f64,
    cov: Matrix,
    factor: Matrix,
}

/// Gradients of a scalar through `coef = L(sigma, len_a, len_b) z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpGradient {
    pub z: Vec<f64>,
    pub log_sigma: f64,
    pub log_len_a: f64,
    pub log_len_b: f64,
}

/// Overwrite `x` with `L⁻ᵀ x`, processing whole rows so the inner loop
/// vectorizes.
fn solve_lower_transpose_rows(l: &Matrix, x: &mut Matrix) {
    let n = l.rows();
    let cols = x.cols();
    for i in (0..n).rev() {
        let (head, tail) = x.as_mut_slice().split_at_mut(i * cols);
        let xi = &mut tail[..cols];
        let inv = 1.0 / l[(i, i)];
        xi.iter_mut().for_each(|v| *v *= inv);
        let li = l.row(i);
        for k in 0..i {
            let f = li[k];
            if f != 0.0 {
                for (a, b) in head[k * cols..(k + 1) * cols].iter_mut().zip(xi.iter()) {
                    *a -= f * b;
                }
            }
        }
    }
}

impl GpFactor {
    /// `sigma` is the marginal standard deviation.
    pub fn new(spec: &KernelSpec, sigma: f64, len_a: f64, len_b: f64) -> Result<Self> {
        check_positive("sigma", sigma)?;
        let cov = build_covariance(sigma * sigma, len_a, len_b, spec)?;
        let jf = cholesky_with_jitter(&cov)?;
        Ok(Self {
            spec: spec.clone(),
            len_a,
            len_b,
            factor: jf.factor,
            cov,
        })
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn transform(&self, z: &[f64]) -> Vec<f64> {
        self.factor.lower_matvec(z)
    }

    /// Pull `g = d f / d coef` back to `z` and the log-hyperparameters.
    ///
    /// Lengthscale terms use the reverse-mode Cholesky identity
    /// `Sigma_bar = L⁻ᵀ Φ(Lᵀ L_bar) L⁻¹` with `L_bar = g zᵀ`, where Φ keeps the
    /// lower triangle and halves the diagonal.
    pub fn backprop(&self, z: &[f64], coef: &[f64], g: &[f64]) -> GpGradient {
        let n = z.len();
        let v = self.factor.lower_transpose_matvec(g);
        let log_sigma = g.iter().zip(coef).map(|(a, b)| a * b).sum();

        // X = L⁻ᵀ Φ(v zᵀ); Sigma_barᵀ = L⁻ᵀ Xᵀ.
        let mut x = Matrix::zeros(n, n);
        for i in 0..n {
            let row = x.row_mut(i);
            for j in 0..i {
                row[j] = v[i] * z[j];
            }
            row[i] = 0.5 * v[i] * z[i];
        }
        solve_lower_transpose_rows(&self.factor, &mut x);
        let mut y = x.transpose();
        solve_lower_transpose_rows(&self.factor, &mut y);
        let mut log_len_a = 0.0;
        let mut log_len_b = 0.0;
        for i in 0..n {
            let (ai, bi) = self.spec.coords[i];
            let krow = self.cov.row(i);
            let yrow = y.row(i);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let (aj, bj) = self.spec.coords[j];
                let w = yrow[j] * krow[j];
                log_len_a += w * ai.abs_diff(aj) as f64;
                log_len_b += w * bi.abs_diff(bj) as f64;
            }
        }
        log_len_a /= self.len_a;
        log_len_b /= self.len_b;
        GpGradient {
            z: v,
            log_sigma,
            log_len_a,
            log_len_b,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::PriorSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn kernel_examples() {
        assert_eq!(kernel_value(1.0, 1.0, 1.0, 2, 1, 2, 1).unwrap(), 1.0);
        let v = kernel_value(1.0, 1.0, 1.0, 2, 1, 3, 1).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
        let v = kernel_value(2.0, 2.0, 0.5, 1, 1, 3, 2).unwrap();
        assert!((v - 2.0 * (-1.0f64).exp() * (-2.0f64).exp()).abs() < 1e-15);
        assert!(kernel_value(0.0, 1.0, 1.0, 1, 1, 1, 1).is_err());
        assert!(kernel_value(1.0, -1.0, 1.0, 1, 1, 1, 1).is_err());
    }

    #[test]
    fn kernel_symmetric_and_decaying() {
        for &(d, t, d2, t2) in &[(3, 1, 5, 4), (2, 2, 2, 1), (7, 3, 1, 1)] {
            let a = kernel_value(1.3, 0.7, 2.1, d, t, d2, t2).unwrap();
            let b = kernel_value(1.3, 0.7, 2.1, d2, t2, d, t).unwrap();
            assert_eq!(a, b);
        }
        let mut prev = f64::INFINITY;
        for t2 in 1..=8 {
            let v = kernel_value(1.0, 0.5, 0.9, 8, 1, 8, t2).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn covariance_examples() {
        let s = build_covariance(1.7, 1.0, 1.0, &KernelSpec::exposure(1, 1e-8)).unwrap();
        assert_eq!(s.rows(), 1);
        assert!((s[(0, 0)] - 1.7 * (1.0 + 1e-8)).abs() < 1e-15);

        let s = build_covariance(1.0, 1.0, 1.0, &KernelSpec::exposure(2, 0.0)).unwrap();
        let e1 = (-1.0f64).exp();
        let e2 = (-2.0f64).exp();
        assert!((s[(0, 1)] - e1).abs() < 1e-15);
        assert!((s[(0, 2)] - e2).abs() < 1e-15);
        assert!((s[(1, 2)] - e1).abs() < 1e-15);
        assert!(s.is_symmetric());

        let l = cholesky_with_jitter(&s).unwrap().factor;
        assert!(l.matmul(&l.transpose()).max_abs_diff(&s) < 1e-10);
    }

    #[test]
    fn cholesky_identity_and_failure() {
        let l = cholesky_with_jitter(&Matrix::identity(4)).unwrap();
        assert_eq!(l.factor, Matrix::identity(4));
        assert_eq!(l.added_jitter, 0.0);

        let mut m = Matrix::identity(3);
        m[(1, 1)] = -1.0;
        match cholesky_with_jitter(&m) {
            Err(EdvcmError::NotPositiveDefinite { row, pivot, .. }) => {
                assert_eq!(row, 1);
                assert!(pivot < 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        // rank-one matrix
        let m = Matrix::from_rows(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let jf = cholesky_with_jitter(&m).unwrap();
        assert!(jf.added_jitter > 0.0 && jf.added_jitter <= JITTER_CAP);
    }

    #[test]
    fn underflowing_scale_errors_instead_of_looping() {
        let tiny = 1e-315;
        let m = Matrix::from_rows(2, 2, vec![tiny, tiny, tiny, tiny]).unwrap();
        assert!(matches!(cholesky_with_jitter(&m), Err(EdvcmError::NotPositiveDefinite { .. })));
    }

    #[test]
    fn transform_examples() {
        let s = build_covariance(1.0, 1.0, 1.0, &KernelSpec::exposure(2, 0.0)).unwrap();
        let l = cholesky_with_jitter(&s).unwrap().factor;
        assert_eq!(noncentered_transform(&[0.0; 3], &l).unwrap(), vec![0.0; 3]);
        let z = [0.3, -1.2, 2.0];
        assert_eq!(noncentered_transform(&z, &Matrix::identity(3)).unwrap(), z.to_vec());
        assert!(noncentered_transform(&[1.0; 2], &l).is_err());
    }

    #[test]
    fn transform_reproduces_covariance() {
        let s = build_covariance(1.0, 1.0, 1.0, &KernelSpec::exposure(2, 0.0)).unwrap();
        let l = cholesky_with_jitter(&s).unwrap().factor;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut acc = [[0.0; 3]; 3];
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let b = noncentered_transform(&z, &l).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    acc[i][j] += b[i] * b[j] / n as f64;
                }
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                let rel = (acc[i][j] - s[(i, j)]).abs() / s[(i, j)];
                assert!(rel < 0.05, "({i},{j}) {} vs {}", acc[i][j], s[(i, j)]);
            }
        }
    }

    #[test]
    fn prior_examples() {
        let spec = PriorSpec::simulation();
        let z = vec![0.0; 6];
        let lp = log_prior(&z, &[], &spec).unwrap();
        assert!((lp.value + 3.0 * LN_2PI).abs() < 1e-12);
        let z = vec![0.4, -1.0, 2.5];
        let lp = log_prior(&z, &[], &spec).unwrap();
        assert_eq!(lp.grad_z, vec![-0.4, 1.0, -2.5]);
    }

    #[test]
    fn prior_hyper_gradient_matches_fd() {
        let spec = PriorSpec::simulation();
        let z = vec![0.1, 0.2];
        let at = |u: f64| {
            log_prior(&z, &[(HyperKind::SigmaBeta, -0.5), (HyperKind::Phi, u)], &spec)
                .unwrap()
        };
        for u in [-1.5, -1.2, 0.3] {
            let h = 1e-4;
            let fd = (at(u + h).value - at(u - h).value) / (2.0 * h);
            let g = at(u).grad_log_hyper[1];
            assert!((g - fd).abs() / fd.abs().max(1e-12) < 1e-6, "{g} {fd}");
        }
    }

    #[test]
    fn centered_and_noncentered_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let spec = KernelSpec::exposure(4, 1e-8);
            let sigma: f64 = rng.gen_range(0.2..2.0);
            let gp = GpFactor::new(&spec, sigma, rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)).unwrap();
            let z: Vec<f64> = (0..spec.len()).map(|_| rng.sample(StandardNormal)).collect();
            let beta = gp.transform(&z);
            let log_det: f64 = (0..z.len()).map(|i| gp.factor()[(i, i)].ln()).sum();
            let (std, _) = standard_normal_log_density(&z);
            let centered = mvn_log_density(&beta, gp.factor());
            assert!((centered + log_det - std).abs() < 1e-8);
        }
    }

    #[test]
    fn backprop_matches_fd() {
        let spec = KernelSpec::lag(3, 2, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = spec.len();
        let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // f(coef) = sum w_i coef_i^2 / 2 so g = w * coef
        let f = |s: f64, a: f64, b: f64, z: &[f64]| {
            let gp = GpFactor::new(&spec, s, a, b).unwrap();
            gp.transform(z).iter().zip(&w).map(|(c, w)| 0.5 * w * c * c).sum::<f64>()
        };
        let (s, a, b) = (0.8, 1.3, 0.6);
        let gp = GpFactor::new(&spec, s, a, b).unwrap();
        let coef = gp.transform(&z);
        let g: Vec<f64> = coef.iter().zip(&w).map(|(c, w)| c * w).collect();
        let grad = gp.backprop(&z, &coef, &g);
        let h = 1e-5;
        let fd_s = (f(s * (h as f64).exp(), a, b, &z) - f(s * (-h as f64).exp(), a, b, &z)) / (2.0 * h);
        let fd_a = (f(s, a * (h as f64).exp(), b, &z) - f(s, a * (-h as f64).exp(), b, &z)) / (2.0 * h);
        let fd_b = (f(s, a, b * (h as f64).exp(), &z) - f(s, a, b * (-h as f64).exp(), &z)) / (2.0 * h);
        assert!((grad.log_sigma - fd_s).abs() < 1e-6 * fd_s.abs().max(1.0));
        assert!((grad.log_len_a - fd_a).abs() < 1e-6 * fd_a.abs().max(1.0), "{} {}", grad.log_len_a, fd_a);
        assert!((grad.log_len_b - fd_b).abs() < 1e-6 * fd_b.abs().max(1.0), "{} {}", grad.log_len_b, fd_b);
        for k in 0..n {
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (f(s, a, b, &zp) - f(s, a, b, &zm)) / (2.0 * h);
            assert!((grad.z[k] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
