//! Multilayer perceptron feature maps with hand-written reverse mode.
//!
//! Besides plain evaluation, the forward pass can propagate first- and second-order
//! directional derivatives with respect to the input ("jets"). Reverse mode then runs
//! through the jet computation as well, which is what generator scores need: they
//! depend on `∇ψ` and `∇²ψ`, and their gradients must reach the weights.
//!
//! Batches are column-major `d×m` matrices, one sample per column. Parameters are
//! flattened layer by layer: the `fan_out×fan_in` weight matrix in row-major order,
//! then the `fan_out` biases.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, FeatureMap, SmoothFeatureMap, SpatialDerivatives};
use crate::error::{Error, Result};
use crate::ndcore::Matrix;
use crate::sde::ItoSde;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Architecture of an MLP feature map, serialized as
/// `{"input_dim": 1, "widths": [64, 128, 64, 7], "activations": [...], "seed": 0}`.
///
/// `widths` lists the output width of every layer (the last one is the feature
/// dimension `r`); `activations` has one entry per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub seed: u64,
    /// Layers carry bias vectors; off gives a homogeneous map (`ψ(0) = 0` for linear nets).
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

impl MlpSpec {
    /// Hidden layers share `hidden` as activation; the output layer is linear.
    pub fn new(input_dim: usize, widths: &[usize], hidden: Activation, seed: u64) -> Self {
        let mut activations = vec![hidden; widths.len()];
        if let Some(last) = activations.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec { input_dim, widths: widths.to_vec(), activations, seed, bias: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("feature map input_dim must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("feature map widths must be non-empty and positive".into()));
        }
        if self.activations.len() != self.widths.len() {
            return Err(Error::Config(format!(
                "{} activations given for {} layers",
                self.activations.len(),
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    /// `Σ (fan_in·fan_out + fan_out)` over layers.
    pub fn param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &w in &self.widths {
            total += fan_in * w + if self.bias { w } else { 0 };
            fan_in = w;
        }
        total
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_offset: usize,
    b_offset: usize,
    bias: bool,
    activation: Activation,
}

/// A trainable MLP `ψ_w : R^d → R^r`.
#[derive(Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    params: Vec<f64>,
    id: u64,
    version: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Mlp {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: self.params.clone(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

fn layout(spec: &MlpSpec) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(spec.widths.len());
    let mut fan_in = spec.input_dim;
    let mut offset = 0;
    for (&fan_out, &activation) in spec.widths.iter().zip(&spec.activations) {
        let w_offset = offset;
        let b_offset = w_offset + fan_in * fan_out;
        offset = b_offset + if spec.bias { fan_out } else { 0 };
        layers.push(Layer { fan_in, fan_out, w_offset, b_offset, bias: spec.bias, activation });
        fan_in = fan_out;
    }
    layers
}

impl Mlp {
    /// Uniform fan-based initialization with bound `sqrt(6 / (fan_in + fan_out))`,
    /// zero biases, seeded by `spec.seed`.
    pub fn init(spec: &MlpSpec) -> Result<Mlp> {
        Self::init_with_seed(spec, spec.seed)
    }

    pub fn init_with_seed(spec: &MlpSpec, seed: u64) -> Result<Mlp> {
        spec.validate()?;
        let layers = layout(spec);
        let mut params = vec![0.0; spec.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &layers {
            let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            for w in &mut params[layer.w_offset..layer.b_offset] {
                *w = rng.random_range(-bound..bound);
            }
        }
        let mut spec = spec.clone();
        spec.seed = seed;
        Ok(Mlp { spec, layers, params, id: NEXT_ID.fetch_add(1, Ordering::Relaxed), version: 0 })
    }

    pub fn from_params(spec: &MlpSpec, params: Vec<f64>) -> Result<Mlp> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::Dimension(format!(
                "architecture has {} parameters, got {}",
                spec.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("feature map parameters".into()));
        }
        Ok(Mlp {
            spec: spec.clone(),
            layers: layout(spec),
            params,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Mutable access to the parameters. Invalidates outstanding hooks.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.nrows() != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "feature map expects states of dimension {}, got {}",
                self.spec.input_dim,
                x.nrows()
            )));
        }
        Ok(())
    }

    /// Evaluates the batch and keeps the activations needed by [`Mlp::pullback`].
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardHooks)> {
        self.check_input(x)?;
        let hooks = self.run(x, &[], &[])?;
        Ok((hooks.output.clone(), hooks))
    }

    /// Evaluates `Ψ` and the Itô term `dΨ_i = ∇ψ_iᵀA + ½ tr(Bᵀ∇²ψ_i B)` on a batch.
    pub fn ito_forward(&self, x: &Matrix, sde: &dyn ItoSde) -> Result<(Matrix, Matrix, ForwardHooks)> {
        self.check_input(x)?;
        if sde.dim() != self.spec.input_dim {
            return Err(Error::Dimension(format!(
                "SDE dimension {} does not match feature input dimension {}",
                sde.dim(),
                self.spec.input_dim
            )));
        }
        let drift = sde.drift_batch(x);
        let diffusion = sde.diffusion_columns(x);
        let hooks = self.run(x, &[drift], &diffusion)?;
        let m = x.ncols();
        let r = self.spec.output_dim();
        let mut dpsi = hooks.first_order(0);
        for j in 0..hooks.n_second {
            let second = hooks.second_order(j);
            dpsi += second * 0.5;
        }
        debug_assert_eq!(dpsi.shape(), (r, m));
        let psi = hooks.output.clone();
        Ok((psi, dpsi, hooks))
    }

    /// `Σ_{ij} G_ij ∂Ψ_ij/∂w` for hooks produced by [`Mlp::forward`].
    pub fn pullback(&self, hooks: &ForwardHooks, g: &Matrix) -> Result<Vec<f64>> {
        self.backward(hooks, g, None)
    }

    /// Gradient through both `Ψ` and `dΨ` for hooks produced by [`Mlp::ito_forward`].
    pub fn pullback_ito(&self, hooks: &ForwardHooks, g_psi: &Matrix, g_dpsi: &Matrix) -> Result<Vec<f64>> {
        if hooks.n_first != 1 {
            return Err(Error::Dimension("hooks were not produced by ito_forward".into()));
        }
        self.backward(hooks, g_psi, Some(g_dpsi))
    }

    fn check_jets_supported(&self) -> Result<()> {
        for layer in &self.layers {
            if layer.activation == Activation::LeakyRelu {
                return Err(Error::UnsupportedActivation(Activation::LeakyRelu));
            }
        }
        Ok(())
    }

    /// Forward pass carrying directional derivatives.
    ///
    /// `first` directions get first-order jets, `second` directions get first- and
    /// second-order jets. Each direction is a `d×m` field.
    fn run(&self, x: &Matrix, first: &[Matrix], second: &[Matrix]) -> Result<ForwardHooks> {
        let m = x.ncols();
        let n_first = first.len();
        let n_second = second.len();
        let k1 = n_first + n_second;
        if k1 > 0 {
            self.check_jets_supported()?;
        }
        for d in first.iter().chain(second) {
            if d.shape() != x.shape() {
                return Err(Error::Dimension("direction field shape differs from batch".into()));
            }
        }

        let mut h = x.clone();
        // Stacked first-order streams: d × (k1·m), block k holds direction k.
        let mut h1 = Matrix::zeros(x.nrows(), k1 * m);
        for (k, d) in first.iter().chain(second).enumerate() {
            h1.columns_mut(k * m, m).copy_from(d);
        }
        let mut h2 = Matrix::zeros(x.nrows(), n_second * m);
        let mut cache = Vec::with_capacity(self.layers.len());

        for (li, layer) in self.layers.iter().enumerate() {
            let w = self.weight_view(layer);
            let mut z = Matrix::zeros(layer.fan_out, m);
            gemm(1.0, w, View::of(&h), 0.0, &mut z);
            let act = layer.activation;
            // Bias and activation in one sweep over the pre-activations.
            let mut a = Matrix::zeros(layer.fan_out, m);
            let bias = if layer.bias { &self.params[layer.b_offset..layer.b_offset + layer.fan_out] } else { &[][..] };
            for (zc, ac) in z.as_mut_slice().chunks_exact_mut(layer.fan_out).zip(a.as_mut_slice().chunks_exact_mut(layer.fan_out)) {
                if layer.bias {
                    for (zv, b) in zc.iter_mut().zip(bias) {
                        *zv += b;
                    }
                }
                for (av, zv) in ac.iter_mut().zip(zc.iter()) {
                    *av = act.value(*zv);
                }
            }
            let mut z1 = Matrix::zeros(layer.fan_out, k1 * m);
            if k1 > 0 {
                gemm(1.0, w, View::of(&h1), 0.0, &mut z1);
            }
            let mut z2 = Matrix::zeros(layer.fan_out, n_second * m);
            if n_second > 0 && li > 0 {
                gemm(1.0, w, View::of(&h2), 0.0, &mut z2);
            }

            let mut a1 = z1.clone();
            let mut a2 = z2.clone();
            if act != Activation::Identity {
                let s1 = z.map(|v| act.d1(v));
                for k in 0..k1 {
                    let mut block = a1.columns_mut(k * m, m);
                    block.component_mul_assign(&s1);
                }
                if n_second > 0 {
                    let s2 = z.map(|v| act.d2(v));
                    for j in 0..n_second {
                        let zd = z1.columns((n_first + j) * m, m);
                        let mut block = a2.columns_mut(j * m, m);
                        block.component_mul_assign(&s1);
                        block += zd.component_mul(&zd).component_mul(&s2);
                    }
                }
            }
            cache.push(LayerCache { input: h, input1: h1, input2: h2, z, z1, z2 });
            h = a;
            h1 = a1;
            h2 = a2;
        }

        Ok(ForwardHooks {
            owner: self.id,
            version: self.version,
            batch: m,
            n_first,
            n_second,
            layers: cache,
            output: h,
            output1: h1,
            output2: h2,
        })
    }

    fn backward(&self, hooks: &ForwardHooks, g: &Matrix, g_dpsi: Option<&Matrix>) -> Result<Vec<f64>> {
        if hooks.owner != self.id || hooks.version != self.version {
            return Err(Error::StaleHooks);
        }
        let m = hooks.batch;
        let r = self.spec.output_dim();
        if g.shape() != (r, m) || g_dpsi.is_some_and(|gd| gd.shape() != (r, m)) {
            return Err(Error::Dimension(format!("upstream gradient must be {r}x{m}")));
        }
        let n_first = hooks.n_first;
        let n_second = hooks.n_second;
        let k1 = n_first + n_second;

        let mut ga = g.clone();
        let mut ga1 = Matrix::zeros(r, k1 * m);
        let mut ga2 = Matrix::zeros(r, n_second * m);
        if let Some(gd) = g_dpsi {
            ga1.columns_mut(0, m).copy_from(gd);
            for j in 0..n_second {
                ga2.columns_mut(j * m, m).copy_from(&(gd * 0.5));
            }
        }

        let mut grad = vec![0.0; self.params.len()];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let c = &hooks.layers[li];
            let act = layer.activation;
            let (gz, gz1, gz2) = if act == Activation::Identity {
                (ga, ga1, ga2)
            } else if k1 == 0 {
                let mut gz = ga;
                gz.zip_apply(&c.z, |g, z| *g *= act.d1(z));
                (gz, ga1, ga2)
            } else {
                let s1 = c.z.map(|v| act.d1(v));
                let mut gz = ga.component_mul(&s1);
                let mut gz1 = ga1.clone();
                for k in 0..k1 {
                    let mut block = gz1.columns_mut(k * m, m);
                    block.component_mul_assign(&s1);
                }
                let mut gz2 = ga2.clone();
                if k1 > 0 {
                    let s2 = c.z.map(|v| act.d2(v));
                    for k in 0..k1 {
                        let t = ga1.columns(k * m, m).component_mul(&c.z1.columns(k * m, m)).component_mul(&s2);
                        gz += t;
                    }
                    if n_second > 0 {
                        let s3 = c.z.map(|v| act.d3(v));
                        for j in 0..n_second {
                            let k = n_first + j;
                            let zd = c.z1.columns(k * m, m);
                            let gsec = ga2.columns(j * m, m);
                            gz += gsec.component_mul(&(zd.component_mul(&zd).component_mul(&s3) + c.z2.columns(j * m, m).component_mul(&s2)));
                            let mut block = gz1.columns_mut(k * m, m);
                            block += gsec.component_mul(&zd).component_mul(&s2) * 2.0;
                            let mut b2 = gz2.columns_mut(j * m, m);
                            b2.component_mul_assign(&s1);
                        }
                    }
                }
                (gz, gz1, gz2)
            };

            let gw = &mut grad[layer.w_offset..layer.b_offset];
            gemm_into_row_major(1.0, View::of(&gz), View::of(&c.input).t(), 0.0, gw, layer.fan_out, layer.fan_in);
            if k1 > 0 {
                gemm_into_row_major(1.0, View::of(&gz1), View::of(&c.input1).t(), 1.0, gw, layer.fan_out, layer.fan_in);
            }
            if n_second > 0 && li > 0 {
                gemm_into_row_major(1.0, View::of(&gz2), View::of(&c.input2).t(), 1.0, gw, layer.fan_out, layer.fan_in);
            }
            if layer.bias {
                let gb = &mut grad[layer.b_offset..layer.b_offset + layer.fan_out];
                for col in gz.column_iter() {
                    for (slot, v) in gb.iter_mut().zip(col.iter()) {
                        *slot += v;
                    }
                }
            }

            if li > 0 {
                let wt = self.weight_view(layer).t();
                let mut gh = Matrix::zeros(layer.fan_in, m);
                gemm(1.0, wt, View::of(&gz), 0.0, &mut gh);
                let mut gh1 = Matrix::zeros(layer.fan_in, k1 * m);
                if k1 > 0 {
                    gemm(1.0, wt, View::of(&gz1), 0.0, &mut gh1);
                }
                let mut gh2 = Matrix::zeros(layer.fan_in, n_second * m);
                if n_second > 0 {
                    gemm(1.0, wt, View::of(&gz2), 0.0, &mut gh2);
                }
                ga = gh;
                ga1 = gh1;
                ga2 = gh2;
            } else {
                break;
            }
        }
        Ok(grad)
    }

    fn weight_view(&self, layer: &Layer) -> View<'_> {
        View {
            data: &self.params[layer.w_offset..layer.b_offset],
            rows: layer.fan_out,
            cols: layer.fan_in,
            rs: layer.fan_in as isize,
            cs: 1,
        }
    }

    /// Value, gradient and Hessian at a single state.
    fn jets_at(&self, x: &[f64]) -> Result<SpatialDerivatives> {
        self.check_jets_supported()?;
        let d = self.spec.input_dim;
        if x.len() != d {
            return Err(Error::Dimension(format!("expected a state of dimension {d}, got {}", x.len())));
        }
        let point = Matrix::from_column_slice(d, 1, x);
        let mut dirs = Vec::new();
        for j in 0..d {
            let mut e = Matrix::zeros(d, 1);
            e[j] = 1.0;
            dirs.push(e);
        }
        for j in 0..d {
            for k in j + 1..d {
                let mut e = Matrix::zeros(d, 1);
                e[j] = 1.0;
                e[k] = 1.0;
                dirs.push(e);
            }
        }
        let hooks = self.run(&point, &[], &dirs)?;
        let r = self.spec.output_dim();
        let value = hooks.output.column(0).into_owned();
        let mut gradient = Matrix::zeros(r, d);
        for j in 0..d {
            gradient.set_column(j, &hooks.output1.column(j));
        }
        let mut hessian = vec![Matrix::zeros(d, d); r];
        for (i, h) in hessian.iter_mut().enumerate() {
            for j in 0..d {
                h[(j, j)] = hooks.output2[(i, j)];
            }
            let mut idx = d;
            for j in 0..d {
                for k in j + 1..d {
                    let mixed = 0.5 * (hooks.output2[(i, idx)] - hooks.output2[(i, j)] - hooks.output2[(i, k)]);
                    h[(j, k)] = mixed;
                    h[(k, j)] = mixed;
                    idx += 1;
                }
            }
        }
        Ok(SpatialDerivatives { value, gradient, hessian })
    }
}

impl FeatureMap for Mlp {
    fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn eval(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }
}

impl SmoothFeatureMap for Mlp {
    fn spatial_derivatives(&self, x: &[f64]) -> Result<SpatialDerivatives> {
        self.jets_at(x)
    }

    fn ito_features(&self, x: &Matrix, sde: &dyn ItoSde) -> Result<(Matrix, Matrix)> {
        let (psi, dpsi, _) = self.ito_forward(x, sde)?;
        Ok((psi, dpsi))
    }
}

struct LayerCache {
    input: Matrix,
    input1: Matrix,
    input2: Matrix,
    z: Matrix,
    z1: Matrix,
    z2: Matrix,
}

/// Activations cached by a forward pass; valid until the parameters change.
pub struct ForwardHooks {
    owner: u64,
    version: u64,
    batch: usize,
    n_first: usize,
    n_second: usize,
    layers: Vec<LayerCache>,
    output: Matrix,
    output1: Matrix,
    output2: Matrix,
}

impl ForwardHooks {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    fn first_order(&self, k: usize) -> Matrix {
        self.output1.columns(k * self.batch, self.batch).into_owned()
    }

    fn second_order(&self, j: usize) -> Matrix {
        self.output2.columns(j * self.batch, self.batch).into_owned()
    }
}

/// Strided read-only view for `matrixmultiply`.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    fn of(m: &'a Matrix) -> Self {
        View { data: m.as_slice(), rows: m.nrows(), cols: m.ncols(), rs: 1, cs: m.nrows() as isize }
    }

    fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn fits(&self) -> bool {
        if self.rows == 0 || self.cols == 0 {
            return true;
        }
        let last = (self.rows as isize - 1) * self.rs + (self.cols as isize - 1) * self.cs;
        self.rs >= 0 && self.cs >= 0 && (last as usize) < self.data.len()
    }
}

/// `C ← α·A·B + β·C` for a column-major `C`.
fn gemm(alpha: f64, a: View, b: View, beta: f64, c: &mut Matrix) {
    let (rows, cols) = c.shape();
    gemm_raw(alpha, a, b, beta, c.as_mut_slice(), rows, cols, 1, rows as isize);
}

/// `C ← α·A·B + β·C` for a row-major `rows×cols` buffer.
fn gemm_into_row_major(alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], rows: usize, cols: usize) {
    gemm_raw(alpha, a, b, beta, c, rows, cols, cols as isize, 1);
}

#[allow(clippy::too_many_arguments)]
fn gemm_raw(alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], rows: usize, cols: usize, rsc: isize, csc: isize) {
    assert_eq!(a.rows, rows, "gemm: row mismatch");
    assert_eq!(b.cols, cols, "gemm: column mismatch");
    assert_eq!(a.cols, b.rows, "gemm: inner dimension mismatch");
    assert!(a.fits() && b.fits(), "gemm: view exceeds its buffer");
    assert!(c.len() >= rows * cols, "gemm: output buffer too small");
    if rows == 0 || cols == 0 {
        return;
    }
    if a.cols == 0 {
        for v in c.iter_mut().take(rows * cols) {
            *v *= beta;
        }
        return;
    }
    // SAFETY: every index touched by dgemm is bounded by the `fits` checks above and
    // the output size assertion; the three buffers do not alias (C is borrowed mutably).
    unsafe {
        matrixmultiply::dgemm(
            rows,
            a.cols,
            cols,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
