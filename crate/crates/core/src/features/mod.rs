//! Feature maps `ψ : R^d → R^r`.

mod mlp;

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use mlp::{ForwardHooks, Mlp, MlpSpec};

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Vector};
use crate::sde::ItoSde;

/// Pointwise nonlinearity applied after each affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Leaky rectifier with negative slope 0.01.
    LeakyRelu,
    /// Continuously differentiable exponential linear unit with `α = 1`.
    Celu,
    Identity,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Celu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    pub fn d1(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Celu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Identity => 1.0,
        }
    }

    #[inline]
    pub fn d2(self, z: f64) -> f64 {
        match self {
            Activation::Celu if z <= 0.0 => z.exp(),
            _ => 0.0,
        }
    }

    #[inline]
    pub fn d3(self, z: f64) -> f64 {
        self.d2(z)
    }
}

/// Anything that maps a `d×m` batch of states to an `r×m` feature matrix.
pub trait FeatureMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn eval(&self, x: &Matrix) -> Result<Matrix>;
}

/// `ψ(x)`, `∇ψ_i(x)` (row `i` of `gradient`) and `∇²ψ_i(x)` at one state.
#[derive(Clone, Debug)]
pub struct SpatialDerivatives {
    pub value: Vector,
    pub gradient: Matrix,
    pub hessian: Vec<Matrix>,
}

/// Feature maps with two spatial derivatives.
pub trait SmoothFeatureMap: FeatureMap {
    fn spatial_derivatives(&self, x: &[f64]) -> Result<SpatialDerivatives>;

    /// `Ψ` and `dΨ` on a batch, where `dψ_i(x) = ∇ψ_i(x)ᵀA(x) + ½ tr(B(x)ᵀ∇²ψ_i(x)B(x))`.
    fn ito_features(&self, x: &Matrix, sde: &dyn ItoSde) -> Result<(Matrix, Matrix)> {
        let r = self.output_dim();
        let mut psi = Matrix::zeros(r, x.ncols());
        let mut dpsi = Matrix::zeros(r, x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let state = col.as_slice();
            let sd = self.spatial_derivatives(state)?;
            let dv = ito_dpsi_from(&sd, &sde.drift(state), &sde.diffusion(state))?;
            psi.set_column(j, &sd.value);
            dpsi.set_column(j, &dv);
        }
        Ok((psi, dpsi))
    }
}

/// Applies the Itô formula to precomputed spatial derivatives.
pub fn ito_dpsi_from(sd: &SpatialDerivatives, drift: &[f64], diffusion: &Matrix) -> Result<Vector> {
    let d = sd.gradient.ncols();
    if drift.len() != d || diffusion.nrows() != d {
        return Err(Error::Dimension(format!(
            "drift/diffusion must have {d} rows, got {} and {}",
            drift.len(),
            diffusion.nrows()
        )));
    }
    let a = Vector::from_column_slice(drift);
    let mut out = &sd.gradient * &a;
    for (i, h) in sd.hessian.iter().enumerate() {
        out[i] += 0.5 * (diffusion.transpose() * h * diffusion).trace();
    }
    Ok(out)
}

/// Serializable description of any feature map shipped with the crate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    Mlp { spec: MlpSpec },
    /// `x ↦ (x^{k_1}, …, x^{k_r})` on scalar states.
    Monomials { degrees: Vec<u32> },
    Identity { dim: usize },
    /// Prepends the constant function `1` to the inner map.
    WithConstant { inner: Box<FeatureSpec> },
}

/// Runtime feature map: a trainable MLP or a fixed basis.
#[derive(Clone, Debug, PartialEq)]
pub enum Features {
    Mlp(Mlp),
    Monomials(Vec<u32>),
    Identity(usize),
    WithConstant(Box<Features>),
}

impl Features {
    pub fn spec(&self) -> FeatureSpec {
        match self {
            Features::Mlp(m) => FeatureSpec::Mlp { spec: m.spec().clone() },
            Features::Monomials(k) => FeatureSpec::Monomials { degrees: k.clone() },
            Features::Identity(d) => FeatureSpec::Identity { dim: *d },
            Features::WithConstant(inner) => FeatureSpec::WithConstant { inner: Box::new(inner.spec()) },
        }
    }

    /// Trainable parameters (empty for fixed bases).
    pub fn params(&self) -> &[f64] {
        match self {
            Features::Mlp(m) => m.params(),
            Features::WithConstant(inner) => inner.params(),
            _ => &[],
        }
    }

    pub fn from_spec(spec: &FeatureSpec, params: &[f64]) -> Result<Features> {
        Ok(match spec {
            FeatureSpec::Mlp { spec } => Features::Mlp(Mlp::from_params(spec, params.to_vec())?),
            FeatureSpec::Monomials { degrees } => {
                if degrees.is_empty() {
                    return Err(Error::Config("monomial features need at least one degree".into()));
                }
                Features::Monomials(degrees.clone())
            }
            FeatureSpec::Identity { dim } => {
                if *dim == 0 {
                    return Err(Error::Config("identity features need a positive dimension".into()));
                }
                Features::Identity(*dim)
            }
            FeatureSpec::WithConstant { inner } => Features::WithConstant(Box::new(Features::from_spec(inner, params)?)),
        })
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "feature map expects states of dimension {}, got {}",
                self.input_dim(),
                x.nrows()
            )));
        }
        Ok(())
    }
}

impl FeatureMap for Features {
    fn input_dim(&self) -> usize {
        match self {
            Features::Mlp(m) => m.input_dim(),
            Features::Monomials(_) => 1,
            Features::Identity(d) => *d,
            Features::WithConstant(inner) => inner.input_dim(),
        }
    }

    fn output_dim(&self) -> usize {
        match self {
            Features::Mlp(m) => m.output_dim(),
            Features::Monomials(k) => k.len(),
            Features::Identity(d) => *d,
            Features::WithConstant(inner) => inner.output_dim() + 1,
        }
    }

    fn eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        match self {
            Features::Mlp(m) => m.eval(x),
            Features::Monomials(k) => Ok(Matrix::from_fn(k.len(), x.ncols(), |i, j| x[(0, j)].powi(k[i] as i32))),
            Features::Identity(_) => Ok(x.clone()),
            Features::WithConstant(inner) => {
                let psi = inner.eval(x)?;
                let mut out = Matrix::from_element(psi.nrows() + 1, psi.ncols(), 1.0);
                out.rows_mut(1, psi.nrows()).copy_from(&psi);
                Ok(out)
            }
        }
    }
}

impl SmoothFeatureMap for Features {
    fn spatial_derivatives(&self, x: &[f64]) -> Result<SpatialDerivatives> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "expected a state of dimension {}, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        match self {
            Features::Mlp(m) => m.spatial_derivatives(x),
            Features::Monomials(k) => {
                let t = x[0];
                let pow = |e: i64| if e < 0 { 0.0 } else { t.powi(e as i32) };
                let value = Vector::from_fn(k.len(), |i, _| pow(k[i] as i64));
                let gradient = Matrix::from_fn(k.len(), 1, |i, _| k[i] as f64 * pow(k[i] as i64 - 1));
                let hessian = k
                    .iter()
                    .map(|&e| Matrix::from_element(1, 1, (e as f64) * (e as f64 - 1.0) * pow(e as i64 - 2)))
                    .collect();
                Ok(SpatialDerivatives { value, gradient, hessian })
            }
            Features::Identity(d) => Ok(SpatialDerivatives {
                value: Vector::from_column_slice(x),
                gradient: Matrix::identity(*d, *d),
                hessian: vec![Matrix::zeros(*d, *d); *d],
            }),
            Features::WithConstant(inner) => {
                let sd = inner.spatial_derivatives(x)?;
                let d = x.len();
                let r = sd.value.len();
                let mut value = Vector::from_element(r + 1, 1.0);
                value.rows_mut(1, r).copy_from(&sd.value);
                let mut gradient = Matrix::zeros(r + 1, d);
                gradient.rows_mut(1, r).copy_from(&sd.gradient);
                let mut hessian = vec![Matrix::zeros(d, d)];
                hessian.extend(sd.hessian);
                Ok(SpatialDerivatives { value, gradient, hessian })
            }
        }
    }

    fn ito_features(&self, x: &Matrix, sde: &dyn ItoSde) -> Result<(Matrix, Matrix)> {
        match self {
            Features::Mlp(m) => m.ito_features(x, sde),
            Features::WithConstant(inner) => {
                let (psi, dpsi) = inner.ito_features(x, sde)?;
                let r = psi.nrows();
                let mut p = Matrix::from_element(r + 1, x.ncols(), 1.0);
                p.rows_mut(1, r).copy_from(&psi);
                let mut d = Matrix::zeros(r + 1, x.ncols());
                d.rows_mut(1, r).copy_from(&dpsi);
                Ok((p, d))
            }
            _ => {
                self.check(x)?;
                let r = self.output_dim();
                let mut psi = Matrix::zeros(r, x.ncols());
                let mut dpsi = Matrix::zeros(r, x.ncols());
                for (j, col) in x.column_iter().enumerate() {
                    let state = col.as_slice();
                    let sd = self.spatial_derivatives(state)?;
                    let dv = ito_dpsi_from(&sd, &sde.drift(state), &sde.diffusion(state))?;
                    psi.set_column(j, &sd.value);
                    dpsi.set_column(j, &dv);
                }
                Ok((psi, dpsi))
            }
        }
    }
}

const PARAM_MAGIC: &[u8; 8] = b"DPNFMAP1";
const PARAM_VERSION: u32 = 1;

/// Writes parameters as `"DPNFMAP1" | version u32 | count u32 | f64…`, all little-endian.
pub fn write_params<W: Write>(mut w: W, params: &[f64]) -> Result<()> {
    let count = u32::try_from(params.len()).map_err(|_| Error::Format("too many parameters".into()))?;
    let mut buf = Vec::with_capacity(16 + 8 * params.len());
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&PARAM_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<Vec<f64>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| Error::Format("parameter file shorter than its header".into()))?;
    if &header[..8] != PARAM_MAGIC {
        return Err(Error::Format("bad parameter file magic".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != PARAM_VERSION {
        return Err(Error::Format(format!("unsupported parameter file version {version}")));
    }
    let count = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * count {
        return Err(Error::Format(format!("expected {count} parameters, found {} bytes", body.len())));
    }
    let params: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameter file".into()));
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &[f64]) -> Result<()> {
    write_params(std::io::BufWriter::new(std::fs::File::create(path)?), params)
}

pub fn load_params(path: &Path) -> Result<Vec<f64>> {
    read_params(std::io::BufReader::new(std::fs::File::open(path)?))
}
