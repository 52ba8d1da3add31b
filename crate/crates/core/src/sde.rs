//! Itô diffusions `dX_t = A(X_t) dt + B(X_t) dW_t`.

use crate::ndcore::Matrix;

/// Drift and diffusion coefficients of an Itô SDE on `R^d`.
pub trait ItoSde: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of independent Brownian components (columns of `B`).
    fn noise_dim(&self) -> usize {
        self.dim()
    }

    /// `A(x)`, length `dim()`.
    fn drift(&self, x: &[f64]) -> Vec<f64>;

    /// `B(x)`, a `dim() × noise_dim()` matrix.
    fn diffusion(&self, x: &[f64]) -> Matrix;

    /// Drift evaluated on every column of a `d×m` batch.
    fn drift_batch(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.dim(), x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let a = self.drift(col.as_slice());
            out.column_mut(j).copy_from_slice(&a);
        }
        out
    }

    /// Columns of `B(x)` as direction fields: entry `k` is the `d×m` matrix whose
    /// column `j` is `B(x_j) e_k`.
    fn diffusion_columns(&self, x: &Matrix) -> Vec<Matrix> {
        let q = self.noise_dim();
        let mut out = vec![Matrix::zeros(self.dim(), x.ncols()); q];
        for (j, col) in x.column_iter().enumerate() {
            let b = self.diffusion(col.as_slice());
            for (k, field) in out.iter_mut().enumerate() {
                field.column_mut(j).copy_from(&b.column(k));
            }
        }
        out
    }
}

/// SDE given by two closures; handy for tests and ad-hoc systems.
pub struct FnSde<A, B> {
    pub dim: usize,
    pub noise_dim: usize,
    pub drift: A,
    pub diffusion: B,
}

impl<A, B> ItoSde for FnSde<A, B>
where
    A: Fn(&[f64]) -> Vec<f64> + Send + Sync,
    B: Fn(&[f64]) -> Matrix + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        (self.drift)(x)
    }

    fn diffusion(&self, x: &[f64]) -> Matrix {
        (self.diffusion)(x)
    }
}

/// Ornstein–Uhlenbeck process `dX = −θ X dt + σ dW` in one dimension.
#[derive(Clone, Copy, Debug)]
pub struct OrnsteinUhlenbeck {
    pub theta: f64,
    pub sigma: f64,
}

impl ItoSde for OrnsteinUhlenbeck {
    fn dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &[f64]) -> Vec<f64> {
        vec![-self.theta * x[0]]
    }

    fn diffusion(&self, _x: &[f64]) -> Matrix {
        Matrix::from_element(1, 1, self.sigma)
    }
}
