//! Empirical covariances and the projection scores built from them.
//!
//! Every score is a function of covariance matrices only. Gradients are returned with
//! respect to those matrices ([`CovGrad`]) and mapped back to the feature batches by
//! [`Covariances::pullback`] or [`GeneratorCovariances::pullback`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ito_dpsi_from, SmoothFeatureMap};
use crate::ndcore::{divided_differences, ensure_finite, hs_norm_sq, spectral_pullback, sym_eig, symmetrize, Matrix, SymEig, Vector};

/// Eigenvalues are clamped to this value before taking logarithms in the distortion loss.
pub const LOG_EPS: f64 = 1e-10;

/// `C_X = ΨΨᵀ/m`, `C_Y = Ψ'Ψ'ᵀ/m`, `C_XY = ΨΨ'ᵀ/m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Covariances {
    pub cx: Matrix,
    pub cy: Matrix,
    pub cxy: Matrix,
    pub samples: usize,
}

fn check_batch(psi: &Matrix, what: &str) -> Result<()> {
    if psi.ncols() == 0 {
        return Err(Error::DegenerateBatch(format!("{what} has no samples")));
    }
    ensure_finite(psi, what)
}

fn gram(a: &Matrix, b: &Matrix, m: usize) -> Matrix {
    a * b.transpose() / m as f64
}

impl Covariances {
    pub fn estimate(psi: &Matrix, psi_next: &Matrix) -> Result<Covariances> {
        check_batch(psi, "feature batch")?;
        check_batch(psi_next, "evolved feature batch")?;
        if psi.shape() != psi_next.shape() {
            return Err(Error::Dimension(format!(
                "feature batches differ in shape: {:?} vs {:?}",
                psi.shape(),
                psi_next.shape()
            )));
        }
        let m = psi.ncols();
        Ok(Covariances {
            cx: symmetrize(&gram(psi, psi, m)),
            cy: symmetrize(&gram(psi_next, psi_next, m)),
            cxy: gram(psi, psi_next, m),
            samples: m,
        })
    }

    pub fn dim(&self) -> usize {
        self.cx.nrows()
    }

    /// Maps covariance gradients to `(∂/∂Ψ, ∂/∂Ψ')`.
    pub fn pullback(&self, grad: &CovGrad, psi: &Matrix, psi_next: &Matrix) -> (Matrix, Matrix) {
        let m = psi.ncols() as f64;
        let gx = &grad.cx + grad.cx.transpose();
        let gy = &grad.cy + grad.cy.transpose();
        let d_psi = (gx * psi + &grad.cxy * psi_next) / m;
        let d_next = (gy * psi_next + grad.cxy.transpose() * psi) / m;
        (d_psi, d_next)
    }
}

/// [`Covariances::estimate`] as a free function.
pub fn estimate_covariances(psi: &Matrix, psi_next: &Matrix) -> Result<Covariances> {
    Covariances::estimate(psi, psi_next)
}

/// `C_X = ΨΨᵀ/m` and `C_X∂ = Ψ dΨᵀ/m`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorCovariances {
    pub cx: Matrix,
    pub cxd: Matrix,
    pub samples: usize,
}

impl GeneratorCovariances {
    pub fn estimate(psi: &Matrix, dpsi: &Matrix) -> Result<GeneratorCovariances> {
        check_batch(psi, "feature batch")?;
        check_batch(dpsi, "Itô feature batch")?;
        if psi.shape() != dpsi.shape() {
            return Err(Error::Dimension(format!(
                "feature batches differ in shape: {:?} vs {:?}",
                psi.shape(),
                dpsi.shape()
            )));
        }
        let m = psi.ncols();
        Ok(GeneratorCovariances { cx: symmetrize(&gram(psi, psi, m)), cxd: gram(psi, dpsi, m), samples: m })
    }

    /// Maps gradients (`cx`, `cxy` read as `C_X∂`) to `(∂/∂Ψ, ∂/∂dΨ)`.
    pub fn pullback(&self, grad: &CovGrad, psi: &Matrix, dpsi: &Matrix) -> (Matrix, Matrix) {
        let m = psi.ncols() as f64;
        let gx = &grad.cx + grad.cx.transpose();
        let d_psi = (gx * psi + &grad.cxy * dpsi) / m;
        let d_dpsi = grad.cxy.transpose() * psi / m;
        (d_psi, d_dpsi)
    }
}

/// Gradient of a score with respect to its covariance arguments.
///
/// For the generator score `cxy` holds the gradient with respect to `C_X∂` and `cy`
/// is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct CovGrad {
    pub cx: Matrix,
    pub cy: Matrix,
    pub cxy: Matrix,
}

/// A score evaluation: `total = correlation − γ·(distortion_x + distortion_y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreValue {
    pub total: f64,
    pub correlation: f64,
    pub distortion_x: f64,
    pub distortion_y: f64,
    pub gamma: f64,
    /// `λ_1/λ_r` of `C_X` (infinite when singular).
    pub cond_x: f64,
    pub cond_y: f64,
    /// `‖C_X∂ − C_X∂ᵀ‖_F / 2` for generator scores, zero otherwise.
    pub asymmetry: f64,
}

impl ScoreValue {
    pub fn distortion_penalty(&self) -> f64 {
        self.distortion_x + self.distortion_y
    }

    pub const CSV_HEADER: &'static str = "step,score_total,correlation_term,distortion_X,distortion_Xprime,cond_CX,cond_CXprime";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.total, self.correlation, self.distortion_x, self.distortion_y, self.cond_x, self.cond_y
        )
    }
}

/// Which score to maximize.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreKind {
    /// Whitened projection score.
    P,
    /// Inversion-free relaxed score.
    S,
    /// Ridge-regularized whitened score with regularization `reg > 0`.
    Ridge { reg: f64 },
    /// Generator score (requires drift and diffusion).
    Generator,
}

impl ScoreKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreKind::P => "P",
            ScoreKind::S => "S",
            ScoreKind::Ridge { .. } => "ridge",
            ScoreKind::Generator => "generator",
        }
    }

    /// Evaluates a transfer-operator score. Use [`score_generator`] for generators.
    pub fn evaluate(&self, cov: &Covariances, gamma: f64, rtol: f64, with_grad: bool) -> Result<(ScoreValue, Option<CovGrad>)> {
        match *self {
            ScoreKind::P => score_p(cov, gamma, rtol, with_grad),
            ScoreKind::S => score_s(cov, gamma, with_grad),
            ScoreKind::Ridge { reg } => score_ridge(cov, reg, gamma, with_grad),
            ScoreKind::Generator => Err(Error::Config("the generator score needs generator covariances".into())),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Config(format!("γ must be a non-negative number, got {gamma}")));
    }
    Ok(())
}

fn psd_eig(c: &Matrix) -> Result<SymEig> {
    let eig = sym_eig(c)?;
    eig.check_psd(crate::ndcore::DEFAULT_RTOL)?;
    Ok(eig)
}

fn distortion_of(eig: &SymEig) -> f64 {
    eig.eigenvalues.iter().map(|&l| l * l - l - l.max(LOG_EPS).ln()).sum()
}

/// `∂R/∂C = 2C − I − C^{-1}` with the inverse restricted to eigenvalues above [`LOG_EPS`].
fn distortion_grad(eig: &SymEig) -> Matrix {
    eig.map(|l| 2.0 * l - 1.0 - if l > LOG_EPS { l.recip() } else { 0.0 })
}

/// `R(C) = tr(C² − C − ln C)`, with eigenvalues clamped to [`LOG_EPS`] inside the log.
pub fn metric_distortion(c: &Matrix) -> Result<f64> {
    Ok(distortion_of(&psd_eig(c)?))
}

/// Divided differences of `x ↦ x^{-1/2}` truncated to zero at or below `cut`.
fn inv_sqrt_dd(cut: f64) -> impl Fn(f64, f64) -> f64 {
    move |a: f64, b: f64| {
        let (ka, kb) = (a > cut, b > cut);
        match (ka, kb) {
            (true, true) => {
                let (sa, sb) = (a.sqrt(), b.sqrt());
                -1.0 / (sa * sb * (sa + sb))
            }
            (true, false) => a.sqrt().recip() / (a - b),
            (false, true) => b.sqrt().recip() / (b - a),
            (false, false) => 0.0,
        }
    }
}

/// Divided differences of `x ↦ 1/x` truncated to zero at or below `cut`.
fn inv_dd(cut: f64) -> impl Fn(f64, f64) -> f64 {
    move |a: f64, b: f64| match (a > cut, b > cut) {
        (true, true) => -1.0 / (a * b),
        (true, false) => a.recip() / (a - b),
        (false, true) => b.recip() / (b - a),
        (false, false) => 0.0,
    }
}

/// Shared core of the whitened scores: `‖A C_XY B‖²` for `A = f(C_X)`, `B = f(C_Y)`.
struct Whitened {
    correlation: f64,
    grad: Option<CovGrad>,
}

fn whitened(
    cov: &Covariances,
    ex: &SymEig,
    ey: &SymEig,
    f: impl Fn(f64) -> f64,
    dd: impl Fn(f64, f64) -> f64,
    with_grad: bool,
) -> Whitened {
    let a = ex.map(&f);
    let b = ey.map(&f);
    let ac = &a * &cov.cxy;
    let cb = &cov.cxy * &b;
    let m = &ac * &b;
    let correlation = hs_norm_sq(&m);
    let grad = with_grad.then(|| {
        let two_m = &m * 2.0;
        let g_a = &two_m * cb.transpose();
        let g_b = ac.transpose() * &two_m;
        let g_xy = &a * &two_m * &b;
        let cx = spectral_pullback(ex, &divided_differences(ex, &dd), &g_a);
        let cy = spectral_pullback(ey, &divided_differences(ey, &dd), &g_b);
        CovGrad { cx, cy, cxy: g_xy }
    });
    Whitened { correlation, grad }
}

fn assemble(
    correlation: f64,
    grad: Option<CovGrad>,
    ex: &SymEig,
    ey: &SymEig,
    gamma: f64,
) -> (ScoreValue, Option<CovGrad>) {
    let distortion_x = distortion_of(ex);
    let distortion_y = distortion_of(ey);
    let value = ScoreValue {
        total: correlation - gamma * (distortion_x + distortion_y),
        correlation,
        distortion_x,
        distortion_y,
        gamma,
        cond_x: ex.condition(),
        cond_y: ey.condition(),
        asymmetry: 0.0,
    };
    let grad = grad.map(|mut g| {
        if gamma > 0.0 {
            g.cx -= distortion_grad(ex) * gamma;
            g.cy -= distortion_grad(ey) * gamma;
        }
        g
    });
    (value, grad)
}

/// Projection score `‖C_X^{†/2} C_XY C_Y^{†/2}‖²_F − γ(R(C_X) + R(C_Y))`.
///
/// Eigenvalues at or below `rtol·λ_max` are truncated. The gradient differentiates
/// the truncated inverse square root exactly; it is discontinuous when an eigenvalue
/// crosses the cutoff, which shows up as a large `cond_x`/`cond_y`.
pub fn score_p(cov: &Covariances, gamma: f64, rtol: f64, with_grad: bool) -> Result<(ScoreValue, Option<CovGrad>)> {
    check_gamma(gamma)?;
    let ex = psd_eig(&cov.cx)?;
    let ey = psd_eig(&cov.cy)?;
    let (cut_x, cut_y) = (ex.threshold(rtol), ey.threshold(rtol));
    // Cutoffs can differ between the two sides, so whiten each with its own.
    let a = ex.map(|l| if l > cut_x { l.sqrt().recip() } else { 0.0 });
    let b = ey.map(|l| if l > cut_y { l.sqrt().recip() } else { 0.0 });
    let ac = &a * &cov.cxy;
    let cb = &cov.cxy * &b;
    let m = &ac * &b;
    let correlation = hs_norm_sq(&m);
    let grad = with_grad.then(|| {
        let two_m = &m * 2.0;
        let g_a = &two_m * cb.transpose();
        let g_b = ac.transpose() * &two_m;
        let cx = spectral_pullback(&ex, &divided_differences(&ex, inv_sqrt_dd(cut_x)), &g_a);
        let cy = spectral_pullback(&ey, &divided_differences(&ey, inv_sqrt_dd(cut_y)), &g_b);
        CovGrad { cx, cy, cxy: &a * &two_m * &b }
    });
    Ok(assemble(correlation, grad, &ex, &ey, gamma))
}

/// Relaxed score `‖C_XY‖²_F / (‖C_X‖‖C_Y‖) − γ(R(C_X) + R(C_Y))`.
///
/// The operator norm of a PSD matrix is its top eigenvalue; its gradient is taken
/// along the first eigenvector in sorted order.
pub fn score_s(cov: &Covariances, gamma: f64, with_grad: bool) -> Result<(ScoreValue, Option<CovGrad>)> {
    check_gamma(gamma)?;
    let ex = psd_eig(&cov.cx)?;
    let ey = psd_eig(&cov.cy)?;
    let (nx, ny) = (ex.lambda_max(), ey.lambda_max());
    if nx <= 0.0 || ny <= 0.0 {
        return Err(Error::DegenerateBatch("relaxed score of a zero covariance".into()));
    }
    let cross = hs_norm_sq(&cov.cxy);
    let correlation = cross / (nx * ny);
    let grad = with_grad.then(|| {
        let vx = ex.eigenvectors.column(0);
        let vy = ey.eigenvectors.column(0);
        CovGrad {
            cx: vx * vx.transpose() * (-correlation / nx),
            cy: vy * vy.transpose() * (-correlation / ny),
            cxy: &cov.cxy * (2.0 / (nx * ny)),
        }
    });
    Ok(assemble(correlation, grad, &ex, &ey, gamma))
}

/// Ridge-whitened score `‖(C_X+λI)^{-1/2} C_XY (C_Y+λI)^{-1/2}‖²_F − γ(R(C_X) + R(C_Y))`.
pub fn score_ridge(cov: &Covariances, reg: f64, gamma: f64, with_grad: bool) -> Result<(ScoreValue, Option<CovGrad>)> {
    check_gamma(gamma)?;
    if !(reg > 0.0 && reg.is_finite()) {
        return Err(Error::Config(format!("ridge regularization must be positive, got {reg}")));
    }
    let ex = psd_eig(&cov.cx)?;
    let ey = psd_eig(&cov.cy)?;
    let f = |l: f64| (l + reg).max(f64::MIN_POSITIVE).sqrt().recip();
    let dd = |a: f64, b: f64| {
        let (sa, sb) = ((a + reg).max(f64::MIN_POSITIVE).sqrt(), (b + reg).max(f64::MIN_POSITIVE).sqrt());
        -1.0 / (sa * sb * (sa + sb))
    };
    let w = whitened(cov, &ex, &ey, f, dd, with_grad);
    Ok(assemble(w.correlation, w.grad, &ex, &ey, gamma))
}

/// Generator score `tr(C_X^† sym(C_X∂)) − γ R(C_X)`.
pub fn score_generator(
    cov: &GeneratorCovariances,
    gamma: f64,
    rtol: f64,
    with_grad: bool,
) -> Result<(ScoreValue, Option<CovGrad>)> {
    check_gamma(gamma)?;
    let ex = psd_eig(&cov.cx)?;
    let cut = ex.threshold(rtol);
    let pinv = ex.map(|l| if l > cut { l.recip() } else { 0.0 });
    let s = symmetrize(&cov.cxd);
    let correlation = pinv.component_mul(&s).sum();
    let distortion_x = distortion_of(&ex);
    let value = ScoreValue {
        total: correlation - gamma * distortion_x,
        correlation,
        distortion_x,
        distortion_y: 0.0,
        gamma,
        cond_x: ex.condition(),
        cond_y: 1.0,
        asymmetry: 0.5 * (&cov.cxd - cov.cxd.transpose()).norm(),
    };
    let grad = with_grad.then(|| {
        let mut cx = spectral_pullback(&ex, &divided_differences(&ex, inv_dd(cut)), &s);
        if gamma > 0.0 {
            cx -= distortion_grad(&ex) * gamma;
        }
        let r = cov.cx.nrows();
        CovGrad { cx, cy: Matrix::zeros(r, r), cxy: pinv }
    });
    Ok((value, grad))
}

/// `dψ(x) = ∇ψ(x)ᵀA(x) + ½ tr(B(x)ᵀ∇²ψ(x)B(x))` for each feature.
pub fn ito_dpsi(map: &dyn SmoothFeatureMap, x: &[f64], drift: &[f64], diffusion: &Matrix) -> Result<Vector> {
    let sd = map.spatial_derivatives(x)?;
    ito_dpsi_from(&sd, drift, diffusion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Activation, Features, Mlp, MlpSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_column_slice(v))
    }

    fn cov(cx: Matrix, cy: Matrix, cxy: Matrix) -> Covariances {
        Covariances { cx, cy, cxy, samples: 1 }
    }

    fn random(r: usize, m: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, m, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn covariance_examples() {
        let psi = Matrix::identity(2, 2);
        let c = estimate_covariances(&psi, &psi).unwrap();
        let half = Matrix::identity(2, 2) * 0.5;
        assert_eq!(c.cx, half);
        assert_eq!(c.cy, half);
        assert_eq!(c.cxy, half);

        let one = Matrix::from_element(2, 1, 1.0);
        let c = estimate_covariances(&one, &one).unwrap();
        assert_eq!(c.cx, Matrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn covariances_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (psi, next) = (random(3, 100, &mut rng), random(3, 100, &mut rng));
        let c = estimate_covariances(&psi, &next).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let sx: f64 = (0..100).map(|k| psi[(i, k)] * psi[(j, k)]).sum::<f64>() / 100.0;
                let sxy: f64 = (0..100).map(|k| psi[(i, k)] * next[(j, k)]).sum::<f64>() / 100.0;
                assert!((c.cx[(i, j)] - sx).abs() < 1e-12);
                assert!((c.cxy[(i, j)] - sxy).abs() < 1e-12);
            }
        }
        assert_eq!(c.cx, c.cx.transpose());
    }

    #[test]
    fn covariance_errors() {
        assert!(matches!(
            estimate_covariances(&Matrix::zeros(2, 0), &Matrix::zeros(2, 0)),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            estimate_covariances(&Matrix::zeros(2, 3), &Matrix::zeros(2, 4)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn distortion_examples() {
        assert_eq!(metric_distortion(&Matrix::identity(3, 3)).unwrap(), 0.0);
        let r = metric_distortion(&diag(&[2.0, 1.0])).unwrap();
        assert!((r - (2.0 - 2f64.ln())).abs() < 1e-12);
        assert!((r - 1.306853).abs() < 1e-6);
        assert!(matches!(metric_distortion(&diag(&[1.0, -0.5])), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn distortion_is_positive_away_from_identity() {
        // h(λ) = λ² − λ − ln λ has h'(1) = 0 and h'' = 2 + 1/λ² > 0: unique minimum 0 at λ = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let lams: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
            let q = crate::ndcore::svd(&random(4, 4, &mut rng)).unwrap().u;
            let c = &q * diag(&lams) * q.transpose();
            let expected: f64 = lams.iter().map(|l| l * l - l - l.ln()).sum();
            let r = metric_distortion(&symmetrize(&c)).unwrap();
            assert!(r > 0.0);
            assert!((r - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn score_examples() {
        let c = cov(Matrix::identity(2, 2), Matrix::identity(2, 2), diag(&[0.9, 0.5]));
        assert!((score_p(&c, 0.0, 1e-6, false).unwrap().0.total - 1.06).abs() < 1e-12);

        let c = cov(diag(&[2.0, 1.0]), Matrix::identity(2, 2), diag(&[1.0, 0.5]));
        let p = score_p(&c, 0.0, 1e-6, false).unwrap().0.total;
        let s = score_s(&c, 0.0, false).unwrap().0.total;
        assert!((p - 0.75).abs() < 1e-12);
        assert!((s - 0.625).abs() < 1e-12);
        assert!(s <= p);

        let c = cov(Matrix::identity(2, 2), Matrix::identity(2, 2), Matrix::identity(2, 2));
        assert!((score_s(&c, 0.0, false).unwrap().0.total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_value_bookkeeping() {
        let c = cov(diag(&[2.0, 1.0]), diag(&[1.0, 0.5]), diag(&[0.3, 0.1]));
        let (v, _) = score_p(&c, 0.7, 1e-6, false).unwrap();
        assert!((v.total - (v.correlation - 0.7 * v.distortion_penalty())).abs() < 1e-14);
        assert!(v.distortion_penalty() >= 0.0);
        assert_eq!(v.cond_x, 2.0);
        assert_eq!(v.csv_row(4).split(',').count(), ScoreValue::CSV_HEADER.split(',').count());
    }

    #[test]
    fn s_rejects_zero_covariance() {
        let z = Matrix::zeros(2, 2);
        assert!(matches!(score_s(&cov(z.clone(), z.clone(), z), 0.0, false), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn ridge_examples() {
        let c = cov(Matrix::identity(1, 1), Matrix::identity(1, 1), Matrix::identity(1, 1));
        assert!((score_ridge(&c, 1.0, 0.0, false).unwrap().0.total - 0.25).abs() < 1e-15);
        let c = cov(Matrix::identity(2, 2), Matrix::identity(2, 2), Matrix::identity(2, 2));
        assert!((score_ridge(&c, 1.0, 0.0, false).unwrap().0.total - 0.5).abs() < 1e-15);
        assert!(score_ridge(&c, 0.0, 0.0, false).is_err());
    }

    #[test]
    fn ridge_approaches_p_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = estimate_covariances(&random(3, 40, &mut rng), &random(3, 40, &mut rng)).unwrap();
        let p = score_p(&c, 0.0, 1e-12, false).unwrap().0.total;
        let near = score_ridge(&c, 1e-10, 0.0, false).unwrap().0.total;
        assert!((p - near).abs() < 1e-7);
        let mut prev = f64::INFINITY;
        for k in -8..=4 {
            let v = score_ridge(&c, 10f64.powi(k), 0.0, false).unwrap().0.total;
            assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    #[test]
    fn generator_examples() {
        let g = GeneratorCovariances { cx: Matrix::identity(2, 2), cxd: diag(&[-0.1, -0.5]), samples: 1 };
        let (v, _) = score_generator(&g, 0.0, 1e-6, false).unwrap();
        assert!((v.total + 0.6).abs() < 1e-14);
        let (v, _) = score_generator(&g, 3.0, 1e-6, false).unwrap();
        assert!((v.total + 0.6).abs() < 1e-14);
        assert_eq!(v.distortion_x, 0.0);
    }

    #[test]
    fn p_truncates_rank_deficient_side() {
        let c = cov(diag(&[1.0, 1e-12]), Matrix::identity(2, 2), diag(&[0.5, 1e-7]));
        let (v, g) = score_p(&c, 0.0, 1e-6, true).unwrap();
        assert!((v.total - 0.25).abs() < 1e-12);
        assert!(v.cond_x > 1e11);
        assert!(g.unwrap().cx.iter().all(|x| x.is_finite()));
    }

    fn relerr(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    fn check_transfer_grad(kind: ScoreKind, gamma: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, m) = (3, 12);
        let psi = random(r, m, &mut rng);
        let next = &psi * 0.6 + random(r, m, &mut rng) * 0.8;
        let eval = |a: &Matrix, b: &Matrix| kind.evaluate(&estimate_covariances(a, b).unwrap(), gamma, 1e-6, false).unwrap().0.total;
        let c = estimate_covariances(&psi, &next).unwrap();
        let (_, g) = kind.evaluate(&c, gamma, 1e-6, true).unwrap();
        let (gp, gn) = c.pullback(&g.unwrap(), &psi, &next);
        let h = 1e-6;
        for (which, analytic) in [(0, &gp), (1, &gn)] {
            for i in 0..r {
                for j in 0..m {
                    let (mut a, mut b) = (psi.clone(), next.clone());
                    let target = if which == 0 { &mut a } else { &mut b };
                    target[(i, j)] += h;
                    let up = eval(&a, &b);
                    let target = if which == 0 { &mut a } else { &mut b };
                    target[(i, j)] -= 2.0 * h;
                    let down = eval(&a, &b);
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        relerr(fd, analytic[(i, j)]) < 1e-4,
                        "{kind:?} γ={gamma} seed {seed}: fd {fd} vs {}",
                        analytic[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn transfer_score_gradients_match_finite_differences() {
        for seed in 0..5 {
            for kind in [ScoreKind::P, ScoreKind::S, ScoreKind::Ridge { reg: 0.1 }] {
                for gamma in [0.0, 1.0] {
                    check_transfer_grad(kind, gamma, seed);
                }
            }
        }
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (r, m) = (3, 10);
            let psi = random(r, m, &mut rng);
            let dpsi = random(r, m, &mut rng);
            for gamma in [0.0, 0.5] {
                let eval = |a: &Matrix, b: &Matrix| {
                    score_generator(&GeneratorCovariances::estimate(a, b).unwrap(), gamma, 1e-6, false).unwrap().0.total
                };
                let c = GeneratorCovariances::estimate(&psi, &dpsi).unwrap();
                let (_, g) = score_generator(&c, gamma, 1e-6, true).unwrap();
                let (gp, gd) = c.pullback(&g.unwrap(), &psi, &dpsi);
                let h = 1e-6;
                for i in 0..r {
                    for j in 0..m {
                        let mut a = psi.clone();
                        a[(i, j)] += h;
                        let up = eval(&a, &dpsi);
                        a[(i, j)] -= 2.0 * h;
                        let fd = (up - eval(&a, &dpsi)) / (2.0 * h);
                        assert!(relerr(fd, gp[(i, j)]) < 1e-4);
                        let mut b = dpsi.clone();
                        b[(i, j)] += h;
                        let up = eval(&psi, &b);
                        b[(i, j)] -= 2.0 * h;
                        let fd = (up - eval(&psi, &b)) / (2.0 * h);
                        assert!(relerr(fd, gd[(i, j)]) < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn whitened_features_make_p_equal_s() {
        // Rows orthonormal under the empirical inner product: C_X = C_Y = I.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (r, m) = (3, 30);
        let whiten = |x: Matrix| {
            let c = estimate_covariances(&x, &x).unwrap().cx;
            crate::ndcore::pinv_sqrt(&c, 1e-12).unwrap() * x
        };
        let psi = whiten(random(r, m, &mut rng));
        let next = whiten(random(r, m, &mut rng));
        let c = estimate_covariances(&psi, &next).unwrap();
        let p = score_p(&c, 1.0, 1e-6, false).unwrap().0.total;
        let s = score_s(&c, 1.0, false).unwrap().0.total;
        assert!((p - s).abs() < 1e-10);
    }

    #[test]
    fn ito_examples() {
        let sq = Features::Monomials(vec![2]);
        for x in [-1.0, 0.25, 2.0] {
            let v = ito_dpsi(&sq, &[x], &[-x], &Matrix::from_element(1, 1, 2f64.sqrt())).unwrap();
            assert!((v[0] - (2.0 - 2.0 * x * x)).abs() < 1e-12);
        }
        let lin = Features::Identity(1);
        let v = ito_dpsi(&lin, &[0.4], &[1.7], &Matrix::from_element(1, 1, 0.3)).unwrap();
        assert_eq!(v[0], 1.7);
        let leaky = Features::Mlp(Mlp::init(&MlpSpec::new(1, &[3, 2], Activation::LeakyRelu, 0)).unwrap());
        assert!(matches!(
            ito_dpsi(&leaky, &[0.1], &[0.0], &Matrix::identity(1, 1)),
            Err(Error::UnsupportedActivation(_))
        ));
    }

    fn psd_strategy() -> impl Strategy<Value = (Matrix, Matrix, Matrix)> {
        (2usize..5, any::<u64>()).prop_map(|(r, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.random_range(1..3 * r);
            let psi = random(r, m, &mut rng);
            let next = random(r, m, &mut rng);
            let c = estimate_covariances(&psi, &next).unwrap();
            (c.cx, c.cy, c.cxy)
        })
    }

    proptest! {
        #[test]
        fn relaxed_score_never_exceeds_projection_score((cx, cy, cxy) in psd_strategy(), gi in 0usize..3) {
            let gamma = [0.0, 0.1, 1.0][gi];
            let c = cov(cx, cy, cxy);
            let s = score_s(&c, gamma, false).unwrap().0.total;
            let p = score_p(&c, gamma, 1e-6, false).unwrap().0.total;
            prop_assert!(s <= p + 1e-10, "S {} > P {}", s, p);
        }

        #[test]
        fn distortion_nonnegative((cx, _, _) in psd_strategy()) {
            prop_assert!(metric_distortion(&cx).unwrap() >= 0.0);
        }
    }
}
