//! Diagonal linear system `X' = a ⊙ X + s ε` with standard Gaussian `ε`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::ndcore::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystem {
    /// Per-coordinate coefficients, each in `(−1, 1)`.
    pub a: Vec<f64>,
    pub noise_std: f64,
}

impl LinearSystem {
    pub fn scalar(a: f64, noise_std: f64) -> LinearSystem {
        LinearSystem { a: vec![a], noise_std }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() {
            return Err(Error::Config("linear system needs at least one coefficient".into()));
        }
        if let Some(a) = self.a.iter().find(|a| !(a.abs() < 1.0)) {
            return Err(Error::Config(format!("coefficient {a} is not in (-1, 1)")));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise std must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }

    /// Stationary variance `s²/(1 − a²)` per coordinate.
    pub fn stationary_variance(&self) -> Vec<f64> {
        self.a.iter().map(|a| self.noise_std * self.noise_std / (1.0 - a * a)).collect()
    }

    /// `E[X_t | X_0 = x] = a^t x`
    pub fn conditional_mean(&self, x: &[f64], t: u32) -> Vec<f64> {
        x.iter().zip(&self.a).map(|(x, a)| a.powi(t as i32) * x).collect()
    }

    /// `n` chained pairs started from the stationary law. Without noise the chain
    /// starts from standard normal draws instead (the stationary law is degenerate).
    pub fn sample_trajectory(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let var = self.stationary_variance();
        let mut x: Vec<f64> = (0..d)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if self.noise_std > 0.0 {
                    z * var[i].sqrt()
                } else {
                    z
                }
            })
            .collect();
        let mut xs = Matrix::zeros(d, n);
        let mut ys = Matrix::zeros(d, n);
        for t in 0..n {
            let next: Vec<f64> = (0..d)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.a[i] * x[i] + self.noise_std * z
                })
                .collect();
            xs.column_mut(t).copy_from_slice(&x);
            ys.column_mut(t).copy_from_slice(&next);
            x = next;
        }
        Ok(Dataset::new(xs, ys, None))
    }
}
