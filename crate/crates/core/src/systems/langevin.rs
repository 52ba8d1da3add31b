//! Overdamped Langevin dynamics `dX = −V'(X) dt + √(2/β) dW` in one dimension.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::ndcore::{sym_eig, symmetrize, Matrix, Vector};
use crate::scores::GeneratorCovariances;
use crate::sde::ItoSde;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Langevin {
    /// Polynomial coefficients of `V`, lowest degree first.
    #[serde(default = "default_potential")]
    pub potential: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Euler–Maruyama step.
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_domain")]
    pub domain: [f64; 2],
    /// Integration steps between recorded pairs (mean of the geometric law if enabled).
    #[serde(default = "default_lag")]
    pub lag_steps: usize,
    #[serde(default)]
    pub geometric_lag: bool,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

fn default_potential() -> Vec<f64> {
    vec![1.0, 0.0, -2.0, 0.0, 1.0]
}

fn default_beta() -> f64 {
    1.0
}

fn default_dt() -> f64 {
    1e-3
}

fn default_domain() -> [f64; 2] {
    [-2.5, 2.5]
}

fn default_lag() -> usize {
    100
}

fn default_burn_in() -> usize {
    100_000
}

impl Default for Langevin {
    fn default() -> Self {
        Langevin {
            potential: default_potential(),
            beta: default_beta(),
            dt: default_dt(),
            domain: default_domain(),
            lag_steps: default_lag(),
            geometric_lag: false,
            burn_in: default_burn_in(),
        }
    }
}

fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs.iter().enumerate().skip(1).map(|(k, &c)| k as f64 * c).collect()
}

impl Langevin {
    /// Ornstein–Uhlenbeck process `dX = −θX dt + √(2/β) dW` on `[−width, width]`.
    pub fn ornstein_uhlenbeck(theta: f64, beta: f64, width: f64) -> Langevin {
        Langevin { potential: vec![0.0, 0.0, 0.5 * theta], beta, domain: [-width, width], ..Default::default() }
    }

    pub fn v(&self, x: f64) -> f64 {
        horner(&self.potential, x)
    }

    pub fn dv(&self, x: f64) -> f64 {
        horner(&derivative(&self.potential), x)
    }

    pub fn d2v(&self, x: f64) -> f64 {
        horner(&derivative(&derivative(&self.potential)), x)
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.domain;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid domain [{lo}, {hi}]")));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("β must be positive, got {}", self.beta)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("time step must be positive, got {}", self.dt)));
        }
        if self.potential.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("potential coefficients must be finite".into()));
        }
        if self.lag_steps == 0 {
            return Err(Error::Config("lag_steps must be positive".into()));
        }
        Ok(())
    }

    /// `dt · max|V''|` over a fine sampling of the domain.
    pub fn stiffness(&self) -> f64 {
        let [lo, hi] = self.domain;
        (0..=1000).map(|i| self.d2v(lo + (hi - lo) * i as f64 / 1000.0).abs()).fold(0.0, f64::max) * self.dt
    }

    /// Rejects step sizes for which Euler–Maruyama is unstable on the domain.
    pub fn check_stable(&self) -> Result<()> {
        let s = self.stiffness();
        if s >= 2.0 {
            return Err(Error::UnstableStep(s));
        }
        Ok(())
    }

    fn reflect(&self, mut x: f64) -> f64 {
        let [lo, hi] = self.domain;
        for _ in 0..8 {
            if x > hi {
                x = 2.0 * hi - x;
            } else if x < lo {
                x = 2.0 * lo - x;
            } else {
                return x;
            }
        }
        x.clamp(lo, hi)
    }

    fn advance(&self, x: f64, steps: usize, rng: &mut impl Rng) -> f64 {
        let noise = (2.0 * self.dt / self.beta).sqrt();
        let force = derivative(&self.potential);
        let mut x = x;
        for _ in 0..steps {
            let z: f64 = StandardNormal.sample(rng);
            x = self.reflect(x - horner(&force, x) * self.dt + noise * z);
        }
        x
    }

    /// `n` pairs `(x_t, x_{t+τ})` from one trajectory, with reflection at the domain
    /// boundary. Consecutive pairs are chained (`x_{t+τ}` is the next `x`). With
    /// `geometric_lag` the number of steps per pair is geometric with mean `lag_steps`.
    pub fn sample_trajectory(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        self.check_stable()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [lo, hi] = self.domain;
        let start = self.reflect(0.5 * (lo + hi));
        let mut x = self.advance(start, self.burn_in, &mut rng);
        let geometric = if self.geometric_lag {
            Some(Geometric::new(1.0 / self.lag_steps as f64).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut lags = Vec::with_capacity(n);
        for _ in 0..n {
            let steps = match &geometric {
                Some(g) => 1 + g.sample(&mut rng) as usize,
                None => self.lag_steps,
            };
            let next = self.advance(x, steps, &mut rng);
            xs.push(x);
            ys.push(next);
            lags.push(steps as f64 * self.dt);
            x = next;
        }
        Ok(Dataset::new(
            Matrix::from_row_slice(1, n, &xs),
            Matrix::from_row_slice(1, n, &ys),
            self.geometric_lag.then_some(lags),
        ))
    }

    /// Normalized Boltzmann weights `e^{−βV}` at the given points.
    pub fn boltzmann_weights(&self, points: &[f64]) -> Vector {
        let vmin = points.iter().map(|&x| self.v(x)).fold(f64::INFINITY, f64::min);
        let w = Vector::from_iterator(points.len(), points.iter().map(|&x| (-self.beta * (self.v(x) - vmin)).exp()));
        let total = w.sum();
        w / total
    }

    pub fn oracle(&self, grid: usize) -> Result<LangevinOracle> {
        LangevinOracle::new(self, grid)
    }
}

impl ItoSde for Langevin {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![-self.dv(x[0])]
    }

    fn drift_batch(&self, x: &Matrix) -> Matrix {
        let force = derivative(&self.potential);
        x.map(|v| -horner(&force, v))
    }

    fn diffusion(&self, _x: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, (2.0 / self.beta).sqrt())
    }
}

/// Finite-volume generator of the Langevin dynamics on a uniform cell-centred grid.
///
/// Neighbouring cells exchange probability at rates
/// `L_{a,a±1} = exp(−β(V_{a±1} − V_a)/2) / (βh²)`, which is a second-order
/// discretization of `−V'f' + β⁻¹f''` with reflecting boundaries and satisfies detailed
/// balance with respect to the discrete Boltzmann weights.
#[derive(Clone, Debug)]
pub struct LangevinOracle {
    pub system: Langevin,
    pub grid: Vec<f64>,
    pub spacing: f64,
    /// Discrete Boltzmann weights, summing to one.
    pub weights: Vector,
    /// Eigenvalues of the generator, descending (the first is ≈ 0).
    pub eigenvalues: Vec<f64>,
    /// Eigenfunctions on the grid (columns), orthonormal in `L²_π`.
    pub eigenfunctions: Matrix,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl LangevinOracle {
    pub fn new(system: &Langevin, grid: usize) -> Result<LangevinOracle> {
        system.validate()?;
        if grid < 16 {
            return Err(Error::Config(format!("generator grid must have at least 16 points, got {grid}")));
        }
        let [lo, hi] = system.domain;
        let h = (hi - lo) / grid as f64;
        let points: Vec<f64> = (0..grid).map(|i| lo + (i as f64 + 0.5) * h).collect();
        let potential: Vec<f64> = points.iter().map(|&x| system.v(x)).collect();
        let scale = 1.0 / (system.beta * h * h);
        let rate = |from: usize, to: usize| scale * (-0.5 * system.beta * (potential[to] - potential[from])).exp();
        let upper: Vec<f64> = (0..grid - 1).map(|a| rate(a, a + 1)).collect();
        let lower: Vec<f64> = (1..grid).map(|a| rate(a, a - 1)).collect();
        let weights = system.boltzmann_weights(&points);

        // D^{1/2} L D^{-1/2} is symmetric with constant off-diagonal 1/(βh²).
        let mut sym = Matrix::zeros(grid, grid);
        for a in 0..grid {
            let mut out = 0.0;
            if a + 1 < grid {
                out += upper[a];
                let s = (weights[a] / weights[a + 1]).sqrt() * upper[a];
                sym[(a, a + 1)] = s;
                sym[(a + 1, a)] = s;
            }
            if a > 0 {
                out += lower[a - 1];
            }
            sym[(a, a)] = -out;
        }
        let eig = sym_eig(&symmetrize(&sym))?;
        let mut functions = eig.eigenvectors.clone();
        for a in 0..grid {
            functions.row_mut(a).scale_mut(1.0 / weights[a].sqrt());
        }
        for j in 0..grid {
            let pivot = functions.column(j).iter().fold(0.0_f64, |p, &v| if v.abs() > p.abs() { v } else { p });
            if pivot < 0.0 {
                functions.column_mut(j).neg_mut();
            }
        }
        Ok(LangevinOracle {
            system: system.clone(),
            grid: points,
            spacing: h,
            weights,
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenfunctions: functions,
            lower,
            upper,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    /// `L f` for a function given on the grid.
    pub fn apply(&self, f: &Vector) -> Vector {
        let g = self.grid_size();
        Vector::from_fn(g, |a, _| {
            let mut v = 0.0;
            if a + 1 < g {
                v += self.upper[a] * (f[a + 1] - f[a]);
            }
            if a > 0 {
                v += self.lower[a - 1] * (f[a - 1] - f[a]);
            }
            v
        })
    }

    pub fn dense(&self) -> Matrix {
        let g = self.grid_size();
        let mut l = Matrix::zeros(g, g);
        for a in 0..g {
            if a + 1 < g {
                l[(a, a + 1)] = self.upper[a];
                l[(a, a)] -= self.upper[a];
            }
            if a > 0 {
                l[(a, a - 1)] = self.lower[a - 1];
                l[(a, a)] -= self.lower[a - 1];
            }
        }
        l
    }

    /// Population `(C_X, C_X∂)` for functions tabulated on the grid (`r×G`), with the
    /// generator applied by finite differences.
    pub fn covariances_tabulated(&self, psi: &Matrix) -> Result<GeneratorCovariances> {
        let g = self.grid_size();
        if psi.ncols() != g {
            return Err(Error::Dimension(format!("tabulated features must have {g} columns")));
        }
        let mut lpsi = Matrix::zeros(psi.nrows(), g);
        for i in 0..psi.nrows() {
            let row = self.apply(&psi.row(i).transpose());
            lpsi.set_row(i, &row.transpose());
        }
        let mut pw = psi.clone();
        for j in 0..g {
            pw.column_mut(j).scale_mut(self.weights[j]);
        }
        Ok(GeneratorCovariances { cx: symmetrize(&(&pw * psi.transpose())), cxd: &pw * lpsi.transpose(), samples: g })
    }

    pub fn tabulate(&self, map: &dyn FeatureMap) -> Result<Matrix> {
        map.eval(&Matrix::from_row_slice(1, self.grid.len(), &self.grid))
    }

    /// The `k` largest nonzero eigenvalues (skipping the stationary one).
    pub fn leading_nonzero(&self, k: usize) -> Vec<f64> {
        self.eigenvalues.iter().skip(1).take(k).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_helpers() {
        let s = Langevin::default();
        assert_eq!(s.v(1.0), 0.0);
        assert_eq!(s.v(0.0), 1.0);
        assert_eq!(s.dv(2.0), 4.0 * 8.0 - 4.0 * 2.0);
        assert_eq!(s.d2v(1.0), 12.0 - 4.0);
    }

    #[test]
    fn unstable_step_is_rejected() {
        let s = Langevin { dt: 0.1, ..Default::default() };
        assert!(matches!(s.check_stable(), Err(Error::UnstableStep(_))));
        assert!(matches!(s.sample_trajectory(10, 0), Err(Error::UnstableStep(_))));
        assert!(Langevin::default().check_stable().is_ok());
    }

    #[test]
    fn ou_spectrum_converges_to_integers() {
        let ou = Langevin::ornstein_uhlenbeck(1.0, 1.0, 8.0);
        let coarse = ou.oracle(400).unwrap();
        let fine = ou.oracle(800).unwrap();
        for k in 0..5 {
            let ec = (coarse.eigenvalues[k] + k as f64).abs();
            let ef = (fine.eigenvalues[k] + k as f64).abs();
            assert!(ef < 2e-3, "λ_{k} = {}", fine.eigenvalues[k]);
            // Second order: halving h cuts the error by about four.
            if k > 0 {
                assert!(ef < 0.35 * ec, "k={k}: {ec} -> {ef}");
            }
        }
    }

    #[test]
    fn generator_annihilates_constants_and_has_negative_spectrum() {
        let o = Langevin::default().oracle(256).unwrap();
        let ones = Vector::from_element(256, 1.0);
        assert!(o.apply(&ones).amax() < 1e-12);
        assert!(o.dense().row_iter().all(|r| r.sum().abs() < 1e-9));
        assert!(o.eigenvalues[0].abs() < 1e-8);
        assert!(o.eigenvalues[1..].iter().all(|&l| l < 0.0));
    }

    #[test]
    fn eigenfunctions_are_orthonormal_and_solve_the_eigenproblem() {
        let o = Langevin::default().oracle(300).unwrap();
        let w = Matrix::from_diagonal(&o.weights);
        let f = o.eigenfunctions.columns(0, 5).into_owned();
        assert!((f.transpose() * &w * &f - Matrix::identity(5, 5)).amax() < 1e-9);
        for k in 0..5 {
            // Residual in L²_π; pointwise values in the far tails are dominated by round-off.
            let res = o.apply(&f.column(k).into_owned()) - f.column(k) * o.eigenvalues[k];
            let norm = res.component_mul(&res).dot(&o.weights).sqrt();
            assert!(norm < 1e-8 * (1.0 + o.eigenvalues[k].abs()), "k={k}: {norm}");
        }
    }

    #[test]
    fn high_barrier_gives_spectral_gap() {
        let s = Langevin { beta: 5.0, ..Default::default() };
        let o = s.oracle(400).unwrap();
        assert!(o.eigenvalues[1].abs() * 20.0 < o.eigenvalues[2].abs());
    }

    #[test]
    fn long_trajectory_matches_boltzmann_histogram() {
        let s = Langevin { lag_steps: 10, ..Default::default() };
        let n = 1_000_000;
        let data = s.sample_trajectory(n, 1).unwrap();
        let bins = 50;
        let [lo, hi] = s.domain;
        let width = (hi - lo) / bins as f64;
        let mut hist = vec![0.0; bins];
        for &x in data.x.iter() {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            hist[b] += 1.0 / n as f64;
        }
        // Boltzmann mass per bin by fine midpoint quadrature.
        let fine = 200;
        let pts: Vec<f64> = (0..bins * fine).map(|i| lo + (i as f64 + 0.5) * width / fine as f64).collect();
        let w = s.boltzmann_weights(&pts);
        let tv: f64 = (0..bins).map(|b| (hist[b] - w.rows(b * fine, fine).sum()).abs()).sum::<f64>() * 0.5;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn geometric_lags_are_recorded() {
        let s = Langevin { geometric_lag: true, lag_steps: 20, burn_in: 100, ..Default::default() };
        let d = s.sample_trajectory(2000, 4).unwrap();
        let lags = d.lag.as_ref().unwrap();
        let mean = lags.iter().sum::<f64>() / lags.len() as f64 / s.dt;
        assert!((mean - 20.0).abs() < 2.0, "mean lag {mean}");
        assert!(lags.iter().any(|&l| l != lags[0]));
    }
}
