//! Noisy logistic map `X_{t+1} = (4X_t(1−X_t) + ξ_t) mod 1` with trigonometric noise.
//!
//! The noise density `∝ cos^N(πξ)` on `[−½, ½]` is a trigonometric polynomial of
//! degree `N/2`, so the transition kernel `p(x, y) = ρ(y − f(x))` splits into `N + 1`
//! separable terms. The oracle discretizes the kernel on a midpoint grid and keeps it
//! in factored form `K = A Bᵀ`, which makes large grids cheap.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::ndcore::{eigenvalue_order, general_eig, svd, Matrix, Vector};
use crate::scores::Covariances;

const TAU: f64 = std::f64::consts::TAU;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticMap {
    /// Even noise order `N`.
    #[serde(default = "default_order")]
    pub noise_order: u32,
    /// Steps discarded before recording a trajectory.
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_order() -> u32 {
    20
}

fn default_burn_in() -> usize {
    1000
}

impl Default for LogisticMap {
    fn default() -> Self {
        LogisticMap { noise_order: default_order(), burn_in: default_burn_in() }
    }
}

/// `4x(1 − x)`
#[inline]
pub fn logistic(x: f64) -> f64 {
    4.0 * x * (1.0 - x)
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl LogisticMap {
    pub fn new(noise_order: u32) -> Result<LogisticMap> {
        let map = LogisticMap { noise_order, ..Default::default() };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_order == 0 || self.noise_order % 2 != 0 {
            return Err(Error::Config(format!("noise order must be even and positive, got {}", self.noise_order)));
        }
        Ok(())
    }

    /// Fourier coefficients `a_k = C(N, N/2+k) / C(N, N/2)`, `k = 1..=N/2`, so that
    /// `ρ(ξ) = 1 + 2 Σ a_k cos(2πkξ)`.
    pub fn noise_coefficients(&self) -> Vec<f64> {
        let n = self.noise_order;
        let center = binomial(n, n / 2);
        (1..=n / 2).map(|k| binomial(n, n / 2 + k) / center).collect()
    }

    /// Normalized noise density, periodic with period 1.
    pub fn noise_density(&self, xi: f64) -> f64 {
        1.0 + 2.0
            * self
                .noise_coefficients()
                .iter()
                .enumerate()
                .map(|(k, a)| a * (TAU * (k + 1) as f64 * xi).cos())
                .sum::<f64>()
    }

    /// Transition density `p(x, y)`.
    pub fn kernel(&self, x: f64, y: f64) -> f64 {
        self.noise_density(y - logistic(x))
    }

    /// Draws `ξ` by rejection from the uniform proposal on `[−½, ½]`.
    pub fn sample_noise(&self, rng: &mut impl Rng) -> f64 {
        let n = self.noise_order as i32;
        loop {
            let xi: f64 = rng.random::<f64>() - 0.5;
            let accept = (std::f64::consts::PI * xi).cos().powi(n);
            if rng.random::<f64>() < accept {
                return xi;
            }
        }
    }

    pub fn step(&self, x: f64, rng: &mut impl Rng) -> f64 {
        (logistic(x) + self.sample_noise(rng)).rem_euclid(1.0)
    }

    /// `n` consecutive pairs `(x_t, x_{t+1})` of one trajectory after burn-in.
    pub fn sample_trajectory(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: f64 = rng.random();
        for _ in 0..self.burn_in {
            x = self.step(x, &mut rng);
        }
        let mut states = Vec::with_capacity(n + 1);
        states.push(x);
        for _ in 0..n {
            x = self.step(x, &mut rng);
            states.push(x);
        }
        Ok(Dataset::new(
            Matrix::from_row_slice(1, n, &states[..n]),
            Matrix::from_row_slice(1, n, &states[1..]),
            None,
        ))
    }

    pub fn oracle(&self, grid: usize) -> Result<LogisticOracle> {
        LogisticOracle::new(self, grid)
    }
}

/// Discretized transfer operator of the logistic map on a uniform midpoint grid.
///
/// Functions are represented by their values at the grid points, and integrals by
/// the midpoint rule. `K = A Bᵀ` is row-stochastic, with `K_ab = p(x_a, y_b)/G`.
/// Inner products are taken in `L²_π` with the discrete invariant weights `w`.
#[derive(Clone, Debug)]
pub struct LogisticOracle {
    pub system: LogisticMap,
    pub grid: Vec<f64>,
    /// Invariant weights on the grid, summing to one.
    pub weights: Vector,
    a: Matrix,
    b: Matrix,
    /// Nonzero part of the spectrum, sorted by descending modulus.
    pub eigenvalues: Vec<Complex64>,
    /// Singular values of `T` on `L²_π`, descending.
    pub singular_values: Vec<f64>,
    /// Left singular functions on the grid (columns).
    pub left_singular: Matrix,
    /// Right singular functions on the grid (columns); `T v_i = σ_i u_i`.
    pub right_singular: Matrix,
}

impl LogisticOracle {
    pub fn new(system: &LogisticMap, grid: usize) -> Result<LogisticOracle> {
        system.validate()?;
        if grid < 256 {
            return Err(Error::Config(format!("oracle grid must have at least 256 points, got {grid}")));
        }
        let coeffs = system.noise_coefficients();
        let q = coeffs.len() * 2 + 1;
        let points: Vec<f64> = (0..grid).map(|i| (i as f64 + 0.5) / grid as f64).collect();
        let inv_g = 1.0 / grid as f64;

        let mut a = Matrix::zeros(grid, q);
        let mut b = Matrix::zeros(grid, q);
        for (i, &x) in points.iter().enumerate() {
            let fx = logistic(x);
            a[(i, 0)] = 1.0;
            b[(i, 0)] = inv_g;
            for (k, ak) in coeffs.iter().enumerate() {
                let freq = TAU * (k + 1) as f64;
                a[(i, 2 * k + 1)] = 2.0 * ak * (freq * fx).cos();
                a[(i, 2 * k + 2)] = 2.0 * ak * (freq * fx).sin();
                b[(i, 2 * k + 1)] = (freq * x).cos() * inv_g;
                b[(i, 2 * k + 2)] = (freq * x).sin() * inv_g;
            }
        }

        let weights = invariant_weights(&a, &b)?;
        let small = b.transpose() * &a;
        let mut eigenvalues = general_eig(&small)?.eigenvalues;
        eigenvalues.sort_by(eigenvalue_order);

        // M = W^{1/2} K W^{-1/2} = (W^{1/2} A)(W^{-1/2} B)ᵀ
        let sw = weights.map(f64::sqrt);
        let mut wa = a.clone();
        let mut wb = b.clone();
        for i in 0..grid {
            wa.row_mut(i).scale_mut(sw[i]);
            wb.row_mut(i).scale_mut(1.0 / sw[i]);
        }
        let qa = wa.qr();
        let qb = wb.qr();
        let core = qa.r() * qb.r().transpose();
        let s = svd(&core)?;
        let mut left = qa.q() * &s.u;
        let mut right = qb.q() * &s.v;
        for i in 0..grid {
            left.row_mut(i).scale_mut(1.0 / sw[i]);
            right.row_mut(i).scale_mut(1.0 / sw[i]);
        }
        for j in 0..left.ncols() {
            let pivot = left.column(j).iter().fold(0.0_f64, |p, &v| if v.abs() > p.abs() { v } else { p });
            if pivot < 0.0 {
                left.column_mut(j).neg_mut();
                right.column_mut(j).neg_mut();
            }
        }

        Ok(LogisticOracle {
            system: system.clone(),
            grid: points,
            weights,
            a,
            b,
            eigenvalues,
            singular_values: s.singular_values.iter().copied().collect(),
            left_singular: left,
            right_singular: right,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    /// Rank of the factorization, `N + 1`.
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    /// The full `G×G` row-stochastic matrix.
    pub fn dense_kernel(&self) -> Matrix {
        &self.a * self.b.transpose()
    }

    /// `(T g)(x_a) = Σ_b K_ab g(y_b)` for a function given on the grid.
    pub fn apply(&self, g: &Vector) -> Vector {
        &self.a * (self.b.transpose() * g)
    }

    /// `E[f(X') | X = x]` for `f` given on the grid, at arbitrary `x`.
    pub fn conditional_expectation(&self, f: &Vector, x: f64) -> f64 {
        let inv_g = 1.0 / self.grid_size() as f64;
        self.grid.iter().zip(f.iter()).map(|(&y, &fy)| self.system.kernel(x, y) * fy).sum::<f64>() * inv_g
    }

    /// Features evaluated on the grid, `r×G`.
    pub fn tabulate(&self, map: &dyn FeatureMap) -> Result<Matrix> {
        if map.input_dim() != 1 {
            return Err(Error::Dimension("logistic-map features must take scalar states".into()));
        }
        map.eval(&Matrix::from_row_slice(1, self.grid.len(), &self.grid))
    }

    /// Population covariances of `(ψ(X), ψ'(X'))` with `X ~ π` by quadrature.
    pub fn covariances_tabulated(&self, psi: &Matrix, psi_next: &Matrix) -> Result<Covariances> {
        let g = self.grid_size();
        if psi.ncols() != g || psi_next.ncols() != g {
            return Err(Error::Dimension(format!("tabulated features must have {g} columns")));
        }
        let mut pw = psi.clone();
        let mut nw = psi_next.clone();
        for j in 0..g {
            pw.column_mut(j).scale_mut(self.weights[j]);
            nw.column_mut(j).scale_mut(self.weights[j]);
        }
        let cx = crate::ndcore::symmetrize(&(&pw * psi.transpose()));
        let cy = crate::ndcore::symmetrize(&(&nw * psi_next.transpose()));
        let cxy = (&pw * &self.a) * (psi_next * &self.b).transpose();
        Ok(Covariances { cx, cy, cxy, samples: g })
    }

    pub fn covariances(&self, psi: &dyn FeatureMap, psi_next: &dyn FeatureMap) -> Result<Covariances> {
        self.covariances_tabulated(&self.tabulate(psi)?, &self.tabulate(psi_next)?)
    }

    /// Eigenvalues of `P_H T|_H` for `H = span ψ`, sorted by descending modulus.
    pub fn compressed_eigenvalues(&self, psi: &dyn FeatureMap, rtol: f64) -> Result<Vec<Complex64>> {
        let tab = self.tabulate(psi)?;
        let cov = self.covariances_tabulated(&tab, &tab)?;
        let t = crate::ndcore::pinv_psd(&cov.cx, rtol)? * &cov.cxy;
        let mut ev = general_eig(&t)?.eigenvalues;
        ev.sort_by(eigenvalue_order);
        Ok(ev)
    }

    /// `Σ_{i≤r} σ_i²`
    pub fn top_singular_energy(&self, r: usize) -> f64 {
        self.singular_values.iter().take(r).map(|s| s * s).sum()
    }
}

/// Stationary weights `w = wK` by power iteration in the factor space:
/// with `u = Aᵀw`, the fixed point satisfies `u = AᵀB u` and `w = B u`.
fn invariant_weights(a: &Matrix, b: &Matrix) -> Result<Vector> {
    let small = a.transpose() * b;
    let g = a.nrows();
    let mut w = Vector::from_element(g, 1.0 / g as f64);
    let mut u = a.transpose() * &w;
    for _ in 0..100_000 {
        let next = &small * &u;
        let norm = next[0];
        if !(norm.is_finite() && norm != 0.0) {
            return Err(Error::NonFinite("invariant density iteration".into()));
        }
        let next = next / norm;
        let delta = (&next - &u).amax();
        u = next;
        if delta < 1e-15 {
            break;
        }
    }
    w = b * u;
    let total = w.sum();
    w /= total;
    if w.min() < -1e-12 {
        return Err(Error::NonFinite("invariant density has negative mass".into()));
    }
    Ok(w.map(|v| v.max(0.0)))
}
