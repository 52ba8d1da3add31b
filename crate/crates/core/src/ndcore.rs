//! Dense linear-algebra backbone.
//!
//! Decompositions are backed by `nalgebra`; this module adds the conventions the rest of
//! the crate relies on: descending eigenvalue order, relative rank tolerances, truncated
//! spectral functions of PSD matrices together with their derivatives, and a
//! biorthonormal eigendecomposition of general real matrices.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen, SVD};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type CMatrix = DMatrix<Complex64>;
pub type Vector = DVector<f64>;

/// Default relative tolerance for rank decisions (relative to the largest eigenvalue).
pub const DEFAULT_RTOL: f64 = 1e-6;

/// Relative asymmetry accepted by [`sym_eig`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Condition number of the eigenvector basis above which [`GeneralEig`] is flagged.
pub const EIGVEC_CONDITION_WARN: f64 = 1e8;

/// Builds a matrix from row-major data, rejecting empty shapes and non-finite entries.
pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("matrix dimensions must be positive, got {rows}x{cols}")));
    }
    if data.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{rows}x{cols} matrix needs {} entries, got {}",
            rows * cols,
            data.len()
        )));
    }
    let m = Matrix::from_row_slice(rows, cols, data);
    ensure_finite(&m, "matrix entries")?;
    Ok(m)
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn ensure_square(a: &Matrix, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{what} must be square and non-empty, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// `(A + Aᵀ) / 2`
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub eigenvalues: DVector<f64>,
    /// Orthonormal eigenvectors stored as columns, matching `eigenvalues`.
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Largest eigenvalue.
    pub fn lambda_max(&self) -> f64 {
        self.eigenvalues[0]
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[self.dim() - 1]
    }

    /// `V · diag(f(λ)) · Vᵀ`
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let scaled = scale_columns(&self.eigenvectors, self.eigenvalues.iter().map(|&l| f(l)));
        scaled * self.eigenvectors.transpose()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.map(|l| l)
    }

    /// Cutoff below which eigenvalues count as zero: `rtol · max(λ_max, 0)`.
    pub fn threshold(&self, rtol: f64) -> f64 {
        rtol * self.lambda_max().max(0.0)
    }

    /// Fails when an eigenvalue lies significantly below zero.
    pub fn check_psd(&self, rtol: f64) -> Result<()> {
        let scale = self.eigenvalues.iter().fold(0.0_f64, |m, l| m.max(l.abs()));
        let tol = self.threshold(rtol) + 64.0 * f64::EPSILON * scale * self.dim() as f64;
        let lmin = self.lambda_min();
        if lmin < -tol {
            return Err(Error::NotPsd { eigenvalue: lmin, threshold: -tol });
        }
        Ok(())
    }

    /// Ratio `λ_1 / λ_r`; infinite for singular matrices.
    pub fn condition(&self) -> f64 {
        let lmin = self.lambda_min();
        if lmin <= 0.0 {
            f64::INFINITY
        } else {
            self.lambda_max() / lmin
        }
    }
}

fn scale_columns(m: &Matrix, factors: impl Iterator<Item = f64>) -> Matrix {
    let mut out = m.clone();
    for (mut col, f) in out.column_iter_mut().zip(factors) {
        col *= f;
    }
    out
}

/// Symmetric eigendecomposition with eigenvalues sorted in descending order.
///
/// The input must be symmetric to within `1e-8·‖A‖_F`; it is symmetrized before
/// factorization. Eigenvector signs are fixed so that the largest-magnitude entry
/// of each column is positive.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    ensure_square(a, "symmetric eigendecomposition input")?;
    ensure_finite(a, "symmetric eigendecomposition input")?;
    let norm = a.norm();
    let asymmetry = (a - a.transpose()).norm();
    let tolerance = SYMMETRY_TOL * norm;
    if asymmetry > tolerance {
        return Err(Error::NotSymmetric { asymmetry, tolerance });
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    let n = a.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(i);
        let pivot = col.iter().fold(0.0_f64, |best, &v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        eigenvectors.set_column(k, &(col * sign));
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// Truncated inverse square root `Σ_{λ_i > rtol·λ_max} λ_i^{-1/2} v_i v_iᵀ` of a PSD matrix.
pub fn pinv_sqrt(a: &Matrix, rtol: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    eig.check_psd(rtol)?;
    let cut = eig.threshold(rtol);
    Ok(eig.map(|l| if l > cut { l.sqrt().recip() } else { 0.0 }))
}

/// Truncated pseudo-inverse of a PSD matrix, same cutoff as [`pinv_sqrt`].
pub fn pinv_psd(a: &Matrix, rtol: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    eig.check_psd(rtol)?;
    let cut = eig.threshold(rtol);
    Ok(eig.map(|l| if l > cut { l.recip() } else { 0.0 }))
}

/// Moore–Penrose pseudo-inverse of a general matrix; singular values at or below
/// `rtol·σ_1` are dropped.
pub fn pinv(a: &Matrix, rtol: f64) -> Result<Matrix> {
    ensure_finite(a, "pseudo-inverse input")?;
    let s = svd(a)?;
    let cut = rtol * s.singular_values.get(0).copied().unwrap_or(0.0);
    let inv = s.singular_values.map(|v| if v > cut && v > 0.0 { v.recip() } else { 0.0 });
    Ok(scale_columns(&s.v, inv.iter().copied()) * s.u.transpose())
}

/// Matrix of divided differences `(f(λ_i) − f(λ_j)) / (λ_i − λ_j)` for a spectral
/// function, as needed by [`spectral_pullback`].
///
/// `dd(a, b)` must return the divided difference for any pair, including `a == b`
/// where it must equal `f'(a)`.
pub fn divided_differences(eig: &SymEig, dd: impl Fn(f64, f64) -> f64) -> Matrix {
    let n = eig.dim();
    Matrix::from_fn(n, n, |i, j| dd(eig.eigenvalues[i], eig.eigenvalues[j]))
}

/// Reverse-mode derivative of a symmetric matrix function `F(A) = V f(Λ) Vᵀ`.
///
/// Given `G = ∂L/∂F`, returns the symmetric `∂L/∂A = V (D ∘ (Vᵀ sym(G) V)) Vᵀ`
/// where `D` holds the divided differences of `f`.
pub fn spectral_pullback(eig: &SymEig, divided: &Matrix, upstream: &Matrix) -> Matrix {
    let v = &eig.eigenvectors;
    let inner = v.transpose() * symmetrize(upstream) * v;
    let weighted = inner.component_mul(divided);
    v * weighted * v.transpose()
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`, σ descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: DVector<f64>,
    pub v: Matrix,
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Err(Error::Dimension("svd of an empty matrix".into()));
    }
    ensure_finite(a, "svd input")?;
    let s = SVD::new(a.clone(), true, true);
    let u = s.u.ok_or_else(|| Error::Format("svd did not produce U".into()))?;
    let v_t = s.v_t.ok_or_else(|| Error::Format("svd did not produce V".into()))?;
    // nalgebra already sorts, but the 2x2/3x3 special paths are only "always ordered"
    // by contract; reorder defensively.
    let k = s.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s.singular_values[j].total_cmp(&s.singular_values[i]));
    let singular_values = DVector::from_iterator(k, order.iter().map(|&i| s.singular_values[i]));
    let u = Matrix::from_fn(a.nrows(), k, |r, c| u[(r, order[c])]);
    let v = Matrix::from_fn(a.ncols(), k, |r, c| v_t[(order[c], r)]);
    Ok(Svd { u, singular_values, v })
}

/// Squared Hilbert–Schmidt (Frobenius) norm.
pub fn hs_norm_sq(a: &Matrix) -> f64 {
    a.norm_squared()
}

/// Operator (spectral) norm `σ_1(A)`.
pub fn op_norm(a: &Matrix) -> Result<f64> {
    Ok(svd(a)?.singular_values[0])
}

/// Eigendecomposition of a general real matrix.
///
/// Eigenvalues are sorted by descending modulus, then descending real part, then
/// descending imaginary part. Right eigenvectors are unit-norm columns of `right`;
/// the columns of `left` satisfy `leftᵢ* · rightₖ = δᵢₖ`.
#[derive(Clone, Debug)]
pub struct GeneralEig {
    pub eigenvalues: Vec<Complex64>,
    pub right: CMatrix,
    pub left: CMatrix,
    /// 2-norm condition number of the right eigenvector basis.
    pub condition: f64,
    /// Set when the eigenvector basis is nearly singular (near-defective input).
    pub ill_conditioned: bool,
}

impl GeneralEig {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Σ λ_i v_i u_i*`
    pub fn reconstruct(&self) -> CMatrix {
        let lam = CMatrix::from_diagonal(&DVector::from_vec(self.eigenvalues.clone()));
        &self.right * lam * self.left.adjoint()
    }
}

/// Total order used for eigenvalue lists throughout the crate.
pub fn eigenvalue_order(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    b.norm()
        .total_cmp(&a.norm())
        .then(b.re.total_cmp(&a.re))
        .then(b.im.total_cmp(&a.im))
}

pub fn general_eig(a: &Matrix) -> Result<GeneralEig> {
    ensure_square(a, "eigendecomposition input")?;
    ensure_finite(a, "eigendecomposition input")?;
    let n = a.nrows();
    let scale = a.norm().max(f64::MIN_POSITIVE);

    let schur = Schur::try_new(a.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::NonFinite("Schur iteration did not converge".into()))?;
    let mut eigenvalues: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    // Conjugate pairs from the real Schur form are exact; real eigenvalues carry im == 0.
    eigenvalues.sort_by(eigenvalue_order);

    // Group numerically repeated eigenvalues so each cluster gets an orthonormal set
    // of null vectors rather than the same vector repeated.
    let cluster_tol = 1e-10 * scale.max(1.0);
    let mut clusters: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=n {
        if i == n || (eigenvalues[i] - eigenvalues[start]).norm() > cluster_tol {
            clusters.push((start, i));
            start = i;
        }
    }

    let mut right = CMatrix::zeros(n, n);
    let mut filled = vec![false; n];
    for &(s, e) in &clusters {
        if filled[s] {
            continue;
        }
        let k = e - s;
        let mu = eigenvalues[s..e].iter().sum::<Complex64>() / k as f64;
        let vectors = null_vectors(a, mu, k)?;
        for (offset, v) in vectors.into_iter().enumerate() {
            right.set_column(s + offset, &v);
            filled[s + offset] = true;
        }
        if mu.im != 0.0 {
            // Fill the conjugate partner cluster with conjugated vectors.
            let partner = clusters.iter().find(|&&(ps, pe)| {
                !filled[ps] && pe - ps == k && (eigenvalues[ps] - eigenvalues[s].conj()).norm() <= cluster_tol
            });
            if let Some(&(ps, _)) = partner {
                for offset in 0..k {
                    let conj = right.column(s + offset).map(|z| z.conj());
                    right.set_column(ps + offset, &conj);
                    filled[ps + offset] = true;
                }
            }
        }
    }

    let right_svd = SVD::new(right.clone(), false, false);
    let smax = right_svd.singular_values.max();
    let smin = right_svd.singular_values.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    let inverse = match right.clone().try_inverse() {
        Some(inv) if condition.is_finite() => inv,
        _ => SVD::new(right.clone(), true, true)
            .pseudo_inverse(f64::EPSILON * smax * n as f64)
            .map_err(|e| Error::NonFinite(e.to_string()))?,
    };
    let left = inverse.adjoint();

    Ok(GeneralEig {
        eigenvalues,
        right,
        left,
        condition,
        ill_conditioned: !(condition < EIGVEC_CONDITION_WARN),
    })
}

/// The `k` right singular vectors of `A − μI` with smallest singular values,
/// unit-normalized with the largest-magnitude entry rotated onto the positive real axis.
fn null_vectors(a: &Matrix, mu: Complex64, k: usize) -> Result<Vec<DVector<Complex64>>> {
    let n = a.nrows();
    let shifted: CMatrix = CMatrix::from_fn(n, n, |i, j| {
        let base = Complex64::new(a[(i, j)], 0.0);
        if i == j {
            base - mu
        } else {
            base
        }
    });
    let decomposition = SVD::new(shifted, false, true);
    let sigma = decomposition.singular_values.clone();
    let v_t = decomposition
        .v_t
        .ok_or_else(|| Error::Format("svd did not produce V".into()))?;
    // nalgebra does not sort singular values; order rows by ascending σ.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[i].total_cmp(&sigma[j]));
    // Geometric multiplicity: a defective cluster repeats its eigenvector, which the
    // caller then detects through the conditioning of the basis.
    let null_tol = 1e-8 * a.norm().max(1.0);
    let geometric = order.iter().take(k).filter(|&&i| sigma[i] <= null_tol).count().max(1);
    let mut out = Vec::with_capacity(k);
    for slot in 0..k {
        let row = order[slot.min(geometric - 1)];
        let mut v: DVector<Complex64> = DVector::from_iterator(n, v_t.row(row).iter().map(|z| z.conj()));
        if mu.im == 0.0 {
            // Real eigenvalue of a real matrix: the null space is spanned by real vectors.
            let pivot = v.iter().copied().fold(Complex64::new(0.0, 0.0), |b, z| if z.norm() > b.norm() { z } else { b });
            if pivot.norm() > 0.0 {
                let phase = pivot.conj() / pivot.norm();
                v *= phase;
            }
            for z in v.iter_mut() {
                z.im = 0.0;
            }
        }
        let norm = v.norm();
        if norm > 0.0 {
            v /= Complex64::new(norm, 0.0);
        }
        let pivot = v.iter().copied().fold(Complex64::new(0.0, 0.0), |b, z| if z.norm() > b.norm() { z } else { b });
        if pivot.norm() > 0.0 {
            v *= pivot.conj() / pivot.norm();
        }
        out.push(v);
    }
    Ok(out)
}

/// Promotes a real matrix to complex.
pub fn to_complex(a: &Matrix) -> CMatrix {
    a.map(|v| Complex64::new(v, 0.0))
}
