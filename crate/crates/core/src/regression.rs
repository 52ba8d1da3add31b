//! Operator regression on a fixed representation: least-squares transfer and
//! generator matrices, their spectral decompositions, predictions and modal
//! forecasts, implied timescales, and a binary model format.

use std::io::{Read, Write};
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMap, FeatureSpec, Features, SmoothFeatureMap};
use crate::ndcore::{general_eig, pinv_psd, sym_eig, to_complex, CMatrix, GeneralEig, Matrix};
use crate::sde::ItoSde;
use crate::systems::Dataset;

/// Modes with `|λ|` below this are treated as zero in spectral forecasts.
const ZERO_MODE: f64 = 1e-14;

/// Values of an observable on the training outputs `x'_i` (`n×ℓ`).
#[derive(Clone, Debug, PartialEq)]
pub struct Observable {
    pub name: String,
    pub values: Matrix,
}

/// Eigen-triplets of a fitted operator matrix, with `uᵢ* vₖ = δᵢₖ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralModel {
    /// Sorted by descending modulus.
    pub eigenvalues: Vec<Complex64>,
    /// Columns `vᵢ`; the right eigenfunction is `f̂ᵢ(x) = ψ(x)ᵀvᵢ`.
    pub right: CMatrix,
    /// Columns `uᵢ`; the left eigenfunction is `ĝᵢ(x) = uᵢ*ψ(x)`.
    pub left: CMatrix,
    pub condition: f64,
    pub ill_conditioned: bool,
}

impl SpectralModel {
    fn from_eig(eig: GeneralEig) -> SpectralModel {
        SpectralModel {
            eigenvalues: eig.eigenvalues,
            right: eig.right,
            left: eig.left,
            condition: eig.condition,
            ill_conditioned: eig.ill_conditioned,
        }
    }

    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `f̂ᵢ` at the feature columns `psi` (`r×q` → `r×q`, row `i` is mode `i`).
    pub fn right_functions(&self, psi: &Matrix) -> CMatrix {
        self.right.transpose() * to_complex(psi)
    }

    /// `ĝᵢ` at the feature columns `psi`.
    pub fn left_functions(&self, psi: &Matrix) -> CMatrix {
        self.left.adjoint() * to_complex(psi)
    }

    /// Modal coefficients `uᵢ*β` of regression coefficients `β` (`r×ℓ`).
    pub fn modes(&self, beta: &Matrix) -> CMatrix {
        self.left.adjoint() * to_complex(beta)
    }

    /// `Σᵢ λᵢ vᵢ uᵢ*`
    pub fn reconstruct(&self) -> CMatrix {
        let lam = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.eigenvalues.clone()));
        &self.right * lam * self.left.adjoint()
    }

    /// `Σᵢ wᵢ (ψᵀvᵢ)(uᵢ*β)` for per-mode weights `w`, as an `ℓ×q` complex matrix.
    fn expand(&self, weights: &[Complex64], beta: &Matrix, psi: &Matrix) -> CMatrix {
        let f = self.right_functions(psi);
        let modes = self.modes(beta);
        let mut out = CMatrix::zeros(beta.ncols(), psi.ncols());
        for (i, w) in weights.iter().enumerate() {
            if *w == Complex64::new(0.0, 0.0) {
                continue;
            }
            for l in 0..beta.ncols() {
                let c = w * modes[(i, l)];
                for q in 0..psi.ncols() {
                    out[(l, q)] += c * f[(i, q)];
                }
            }
        }
        out
    }
}

fn check_values(values: &Matrix, n: usize) -> Result<()> {
    if values.nrows() != n {
        return Err(Error::Dimension(format!(
            "observable has {} rows but the model was fitted on {n} samples",
            values.nrows()
        )));
    }
    crate::ndcore::ensure_finite(values, "observable values")
}

/// Inverse used for regression: `C^†` or `(C + λI)^{-1}`.
fn regression_inverse(c: &Matrix, ridge: Option<f64>, rtol: f64) -> Result<Matrix> {
    match ridge {
        None => pinv_psd(c, rtol),
        Some(reg) => {
            if !(reg > 0.0 && reg.is_finite()) {
                return Err(Error::Config(format!("ridge regularization must be positive, got {reg}")));
            }
            let eig = sym_eig(c)?;
            eig.check_psd(rtol)?;
            Ok(eig.map(|l| 1.0 / (l.max(0.0) + reg)))
        }
    }
}

/// Numerical rank of a covariance under `rtol`.
fn covariance_rank(c: &Matrix, rtol: f64) -> Result<usize> {
    let eig = sym_eig(c)?;
    let cut = eig.threshold(rtol);
    Ok(eig.eigenvalues.iter().filter(|&&l| l > cut && l > 0.0).count())
}

fn gram(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.ncols() as f64;
    let mut c = a * b.transpose();
    c /= n;
    c
}

/// `T̂ = C_X^† C_XX'` fitted on `ψ(x_i), ψ(x'_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferModel {
    pub features: Features,
    /// Second map of an untied pair, kept for evaluation only.
    pub features_next: Option<Features>,
    /// `r×r`; acts on coefficient vectors: `T̂ h_z = h_{T̂z}`.
    pub operator: Matrix,
    /// Training input features `Ψ̂` (`r×n`).
    pub psi: Matrix,
    /// Training output features `Ψ̂'` (`r×n`).
    pub psi_next: Matrix,
    pub rtol: f64,
    pub ridge: Option<f64>,
    /// Physical time between `x` and `x'`.
    pub lag_time: f64,
    pub observables: Vec<Observable>,
    pub warnings: Vec<String>,
    cx_inv: Matrix,
    cy_inv: Matrix,
}

impl TransferModel {
    /// Least-squares fit `T̂ = (Ψ̂ᵀ)^† Ψ̂'ᵀ`.
    pub fn fit(features: Features, data: &Dataset, rtol: f64) -> Result<TransferModel> {
        Self::fit_with(features, data, None, rtol)
    }

    /// Ridge fit `T̂_λ = (Ĉ_X + λI)^{-1} Ĉ_XX'`.
    pub fn fit_ridge(features: Features, data: &Dataset, reg: f64, rtol: f64) -> Result<TransferModel> {
        Self::fit_with(features, data, Some(reg), rtol)
    }

    fn fit_with(features: Features, data: &Dataset, ridge: Option<f64>, rtol: f64) -> Result<TransferModel> {
        if data.is_empty() {
            return Err(Error::DegenerateBatch("cannot fit on an empty dataset".into()));
        }
        let psi = features.eval(&data.x)?;
        let psi_next = features.eval(&data.y)?;
        Self::from_features(features, psi, psi_next, ridge, rtol, 1.0)
    }

    /// Fit from precomputed feature matrices.
    pub fn from_features(
        features: Features,
        psi: Matrix,
        psi_next: Matrix,
        ridge: Option<f64>,
        rtol: f64,
        lag_time: f64,
    ) -> Result<TransferModel> {
        if psi.shape() != psi_next.shape() || psi.nrows() != features.output_dim() {
            return Err(Error::Dimension("feature matrices do not match the feature map".into()));
        }
        crate::ndcore::ensure_finite(&psi, "features")?;
        crate::ndcore::ensure_finite(&psi_next, "features")?;
        let cx = gram(&psi, &psi);
        let cy = gram(&psi_next, &psi_next);
        let cxy = gram(&psi, &psi_next);
        let cx_inv = regression_inverse(&cx, ridge, rtol)?;
        let cy_inv = regression_inverse(&cy, ridge, rtol)?;
        let operator = &cx_inv * cxy;
        let mut warnings = Vec::new();
        let rank = covariance_rank(&cx, rtol)?;
        if rank == 0 {
            warnings.push("features vanish on the data: the fitted operator has rank 0".to_string());
        } else if rank < psi.nrows() {
            warnings.push(format!("feature covariance has numerical rank {rank} < {}", psi.nrows()));
        }
        Ok(TransferModel {
            features,
            features_next: None,
            operator,
            psi,
            psi_next,
            rtol,
            ridge,
            lag_time,
            observables: Vec::new(),
            warnings,
            cx_inv,
            cy_inv,
        })
    }

    pub fn with_features_next(mut self, features_next: Features) -> TransferModel {
        self.features_next = Some(features_next);
        self
    }

    pub fn with_lag_time(mut self, lag_time: f64) -> TransferModel {
        self.lag_time = lag_time;
        self
    }

    pub fn rank(&self) -> usize {
        self.operator.nrows()
    }

    pub fn samples(&self) -> usize {
        self.psi.ncols()
    }

    /// `‖Ψ̂' − T̂ᵀΨ̂‖²_F / n` for an arbitrary operator matrix.
    pub fn empirical_risk(&self, operator: &Matrix) -> f64 {
        (&self.psi_next - operator.transpose() * &self.psi).norm_squared() / self.samples() as f64
    }

    /// Regression coefficients `β = (Ψ̂ᵀ)^† F̂'` (`r×ℓ`) of outputs on input features.
    pub fn coefficients(&self, values: &Matrix) -> Result<Matrix> {
        check_values(values, self.samples())?;
        let mut b = &self.psi * values;
        b /= self.samples() as f64;
        Ok(&self.cx_inv * b)
    }

    /// One-step conditional expectation `ψ(x)ᵀ C_X^† Ψ̂ F̂' / n` at queries `x` (`d×q`),
    /// returned as `ℓ×q`.
    pub fn predict(&self, values: &Matrix, x: &Matrix) -> Result<Matrix> {
        let beta = self.coefficients(values)?;
        Ok(beta.transpose() * self.features.eval(x)?)
    }

    pub fn spectral(&self) -> Result<SpectralModel> {
        Ok(SpectralModel::from_eig(general_eig(&self.operator)?))
    }

    /// Complex modal forecast `Σᵢ λᵢ^{t−1}(ψ(x)ᵀvᵢ)(uᵢ*β)` over nonzero modes.
    pub fn modal_forecast(&self, spectral: &SpectralModel, values: &Matrix, t: usize, x: &Matrix) -> Result<CMatrix> {
        if t == 0 {
            return Err(Error::Config("modal forecasts start at t = 1".into()));
        }
        let beta = self.coefficients(values)?;
        let psi = self.features.eval(x)?;
        let weights: Vec<Complex64> = spectral
            .eigenvalues
            .iter()
            .map(|l| if t == 1 { Complex64::new(1.0, 0.0) } else if l.norm() <= ZERO_MODE { Complex64::new(0.0, 0.0) } else { l.powu(t as u32 - 1) })
            .collect();
        Ok(spectral.expand(&weights, &beta, &psi))
    }

    /// `E[f(X_t) | X_0 = x]` estimated at queries `x`, as `ℓ×q`.
    ///
    /// `t = 0` regresses `f` onto the features, `t = 1` is [`predict`](Self::predict),
    /// and later horizons expand in the nonzero eigenmodes.
    pub fn forecast(&self, values: &Matrix, t: usize, x: &Matrix) -> Result<Matrix> {
        match t {
            0 => {
                check_values(values, self.samples())?;
                let mut b = &self.psi_next * values;
                b /= self.samples() as f64;
                let beta = &self.cy_inv * b;
                Ok(beta.transpose() * self.features.eval(x)?)
            }
            1 => self.predict(values, x),
            _ => {
                let spectral = self.spectral()?;
                Ok(self.modal_forecast(&spectral, values, t, x)?.map(|z| z.re))
            }
        }
    }

    pub fn register_observable(&mut self, name: &str, values: Matrix) -> Result<()> {
        check_values(&values, self.samples())?;
        self.observables.retain(|o| o.name != name);
        self.observables.push(Observable { name: name.to_string(), values });
        Ok(())
    }

    pub fn observable(&self, name: &str) -> Result<&Matrix> {
        self.observables
            .iter()
            .find(|o| o.name == name)
            .map(|o| &o.values)
            .ok_or_else(|| Error::Config(format!("no observable named {name:?}")))
    }

    /// `−Δt / ln|λᵢ|` per eigenvalue; infinite for `|λ| ≥ 1`, zero for `λ = 0`.
    pub fn implied_timescales(&self, spectral: &SpectralModel) -> Vec<f64> {
        spectral.eigenvalues.iter().map(|l| discrete_timescale(*l, self.lag_time)).collect()
    }
}

pub fn discrete_timescale(lambda: Complex64, lag_time: f64) -> f64 {
    let m = lambda.norm();
    if m >= 1.0 {
        f64::INFINITY
    } else if m == 0.0 {
        0.0
    } else {
        -lag_time / m.ln()
    }
}

pub fn continuous_timescale(lambda: Complex64) -> f64 {
    if lambda.re < 0.0 {
        -1.0 / lambda.re
    } else {
        f64::INFINITY
    }
}

/// `L̂ = Ĉ_X^† Ĉ_X∂` fitted from Itô features of samples of the invariant law.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub features: Features,
    pub operator: Matrix,
    pub psi: Matrix,
    pub dpsi: Matrix,
    pub rtol: f64,
    pub observables: Vec<Observable>,
    pub warnings: Vec<String>,
    cx_inv: Matrix,
}

impl GeneratorModel {
    pub fn fit(features: Features, x: &Matrix, sde: &dyn ItoSde, rtol: f64) -> Result<GeneratorModel> {
        if x.ncols() == 0 {
            return Err(Error::DegenerateBatch("cannot fit on an empty sample".into()));
        }
        let (psi, dpsi) = features.ito_features(x, sde)?;
        Self::from_features(features, psi, dpsi, rtol)
    }

    pub fn from_features(features: Features, psi: Matrix, dpsi: Matrix, rtol: f64) -> Result<GeneratorModel> {
        if psi.shape() != dpsi.shape() || psi.nrows() != features.output_dim() {
            return Err(Error::Dimension("feature matrices do not match the feature map".into()));
        }
        crate::ndcore::ensure_finite(&psi, "features")?;
        crate::ndcore::ensure_finite(&dpsi, "Itô features")?;
        let cx = gram(&psi, &psi);
        let cxd = gram(&psi, &dpsi);
        let cx_inv = pinv_psd(&cx, rtol)?;
        let operator = &cx_inv * cxd;
        let mut warnings = Vec::new();
        let rank = covariance_rank(&cx, rtol)?;
        if rank < psi.nrows() {
            warnings.push(format!("feature covariance has numerical rank {rank} < {}", psi.nrows()));
        }
        Ok(GeneratorModel { features, operator, psi, dpsi, rtol, observables: Vec::new(), warnings, cx_inv })
    }

    pub fn rank(&self) -> usize {
        self.operator.nrows()
    }

    pub fn samples(&self) -> usize {
        self.psi.ncols()
    }

    /// Coefficients of `f` (values at the samples, `n×ℓ`) regressed onto the features.
    pub fn coefficients(&self, values: &Matrix) -> Result<Matrix> {
        check_values(values, self.samples())?;
        let mut b = &self.psi * values;
        b /= self.samples() as f64;
        Ok(&self.cx_inv * b)
    }

    pub fn spectral(&self) -> Result<SpectralModel> {
        Ok(SpectralModel::from_eig(general_eig(&self.operator)?))
    }

    /// `Σᵢ e^{λᵢt}(ψ(x)ᵀvᵢ)(uᵢ*β)` as an `ℓ×q` complex matrix.
    pub fn modal_forecast(&self, spectral: &SpectralModel, values: &Matrix, t: f64, x: &Matrix) -> Result<CMatrix> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("forecast time must be non-negative, got {t}")));
        }
        let beta = self.coefficients(values)?;
        let psi = self.features.eval(x)?;
        let weights: Vec<Complex64> = spectral.eigenvalues.iter().map(|l| (l * t).exp()).collect();
        Ok(spectral.expand(&weights, &beta, &psi))
    }

    /// `E[f(X_t) | X_0 = x]` for `f` given by its values at the training samples.
    pub fn forecast(&self, values: &Matrix, t: f64, x: &Matrix) -> Result<Matrix> {
        let spectral = self.spectral()?;
        Ok(self.modal_forecast(&spectral, values, t, x)?.map(|z| z.re))
    }

    /// `−1/Re λᵢ`; infinite for modes with `Re λ ≥ 0`.
    pub fn implied_timescales(&self, spectral: &SpectralModel) -> Vec<f64> {
        spectral.eigenvalues.iter().map(|l| continuous_timescale(*l)).collect()
    }
}

/// CSV rows `index,modulus,real,imag,implied_timescale`.
pub fn write_eigenvalues_csv<W: Write>(mut w: W, eigenvalues: &[Complex64], timescales: &[f64]) -> Result<()> {
    writeln!(w, "index,modulus,real,imag,implied_timescale")?;
    for (i, (l, t)) in eigenvalues.iter().zip(timescales).enumerate() {
        writeln!(w, "{i},{},{},{},{}", l.norm(), l.re, l.im, t)?;
    }
    Ok(())
}

const MODEL_MAGIC: &[u8; 8] = b"DPNMODL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transfer,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    features: FeatureSpec,
    #[serde(default)]
    features_next: Option<FeatureSpec>,
    rank: usize,
    samples: usize,
    rtol: f64,
    ridge: Option<f64>,
    lag_time: Option<f64>,
    eigenvalues: Vec<[f64; 2]>,
    blocks: Vec<BlockInfo>,
}

/// A fitted model of either kind, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Transfer(TransferModel),
    Generator(GeneratorModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Transfer(_) => ModelKind::Transfer,
            Model::Generator(_) => ModelKind::Generator,
        }
    }

    pub fn spectral(&self) -> Result<SpectralModel> {
        match self {
            Model::Transfer(m) => m.spectral(),
            Model::Generator(m) => m.spectral(),
        }
    }

    pub fn implied_timescales(&self, spectral: &SpectralModel) -> Vec<f64> {
        match self {
            Model::Transfer(m) => m.implied_timescales(spectral),
            Model::Generator(m) => m.implied_timescales(spectral),
        }
    }

    pub fn features(&self) -> &Features {
        match self {
            Model::Transfer(m) => &m.features,
            Model::Generator(m) => &m.features,
        }
    }

    /// Magic `DPNMODL1`, a little-endian `u64` header length, a JSON header, then
    /// column-major little-endian `f64` blocks in header order.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let spectral = self.spectral()?;
        let eigenvalues = spectral.eigenvalues.iter().map(|l| [l.re, l.im]).collect();
        let params = Matrix::from_row_slice(1, self.features().params().len(), self.features().params());
        let params_next;
        let mut blocks: Vec<(String, &Matrix)> = vec![("params".into(), &params)];
        let header = match self {
            Model::Transfer(m) => {
                if let Some(f) = &m.features_next {
                    params_next = Matrix::from_row_slice(1, f.params().len(), f.params());
                    blocks.push(("params_next".into(), &params_next));
                }
                blocks.push(("operator".into(), &m.operator));
                blocks.push(("psi".into(), &m.psi));
                blocks.push(("psi_next".into(), &m.psi_next));
                for o in &m.observables {
                    blocks.push((format!("observable:{}", o.name), &o.values));
                }
                ModelHeader {
                    kind: ModelKind::Transfer,
                    features: m.features.spec(),
                    features_next: m.features_next.as_ref().map(Features::spec),
                    rank: m.rank(),
                    samples: m.samples(),
                    rtol: m.rtol,
                    ridge: m.ridge,
                    lag_time: Some(m.lag_time),
                    eigenvalues,
                    blocks: Vec::new(),
                }
            }
            Model::Generator(m) => {
                blocks.push(("operator".into(), &m.operator));
                blocks.push(("psi".into(), &m.psi));
                blocks.push(("dpsi".into(), &m.dpsi));
                for o in &m.observables {
                    blocks.push((format!("observable:{}", o.name), &o.values));
                }
                ModelHeader {
                    kind: ModelKind::Generator,
                    features: m.features.spec(),
                    features_next: None,
                    rank: m.rank(),
                    samples: m.samples(),
                    rtol: m.rtol,
                    ridge: None,
                    lag_time: None,
                    eigenvalues,
                    blocks: Vec::new(),
                }
            }
        };
        let header = ModelHeader {
            blocks: blocks.iter().map(|(name, m)| BlockInfo { name: name.clone(), rows: m.nrows(), cols: m.ncols() }).collect(),
            ..header
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, m) in blocks {
            for v in m.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Model> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 30 {
            return Err(Error::Format(format!("model header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json)?;
        let header: ModelHeader = serde_json::from_slice(&json)?;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for b in &header.blocks {
            let mut data = vec![0.0; b.rows * b.cols];
            let mut buf = [0u8; 8];
            for v in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
            blocks.push((b.name.clone(), Matrix::from_vec(b.rows, b.cols, data)));
        }
        let take = |name: &str| -> Result<Matrix> {
            blocks
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m.clone())
                .ok_or_else(|| Error::Format(format!("model file lacks block {name:?}")))
        };
        let features = Features::from_spec(&header.features, take("params")?.as_slice())?;
        let observables: Vec<Observable> = blocks
            .iter()
            .filter_map(|(n, m)| n.strip_prefix("observable:").map(|name| Observable { name: name.to_string(), values: m.clone() }))
            .collect();
        let model = match header.kind {
            ModelKind::Transfer => {
                let mut m = TransferModel::from_features(
                    features,
                    take("psi")?,
                    take("psi_next")?,
                    header.ridge,
                    header.rtol,
                    header.lag_time.unwrap_or(1.0),
                )?;
                m.operator = take("operator")?;
                m.observables = observables;
                if let Some(spec) = &header.features_next {
                    m.features_next = Some(Features::from_spec(spec, take("params_next")?.as_slice())?);
                }
                Model::Transfer(m)
            }
            ModelKind::Generator => {
                let mut m = GeneratorModel::from_features(features, take("psi")?, take("dpsi")?, header.rtol)?;
                m.operator = take("operator")?;
                m.observables = observables;
                Model::Generator(m)
            }
        };
        if model.features().output_dim() != header.rank {
            return Err(Error::Format("model rank disagrees with its feature map".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
