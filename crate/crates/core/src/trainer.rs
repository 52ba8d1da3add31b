//! Mini-batch maximization of a score with Adam.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Mlp;
use crate::ndcore::{Matrix, DEFAULT_RTOL};
use crate::scores::{score_generator, Covariances, GeneratorCovariances, ScoreKind, ScoreValue};
use crate::sde::ItoSde;
use crate::systems::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

/// Adam state for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Adam {
        Adam { config, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One bias-corrected update `w ← w − lr · m̂ / (√v̂ + ε)` for the loss gradient `g`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam: parameter length changed");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient length mismatch");
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Epoch-wise batches: a seeded permutation of `0..n` cut into chunks of `m`, with
/// the remainder dropped. Identical for identical `(seed, epoch)`.
pub fn minibatches(n: usize, m: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    if m == 0 || m > n {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm.chunks_exact(m).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopping {
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_min_delta")]
    pub min_delta: f64,
}

fn default_patience() -> usize {
    20
}

fn default_min_delta() -> f64 {
    1e-5
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping { patience: default_patience(), min_delta: default_min_delta() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub score: ScoreKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub learning_rate: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    /// Use a single map for both `ψ` and `ψ'`.
    #[serde(default)]
    pub tied: bool,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    /// Evaluated once per epoch on the validation set, if one is given.
    #[serde(default)]
    pub early_stopping: Option<EarlyStopping>,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_rtol() -> f64 {
    DEFAULT_RTOL
}

impl TrainConfig {
    pub fn new(score: ScoreKind, batch_size: usize, epochs: usize, learning_rate: f64) -> TrainConfig {
        TrainConfig {
            score,
            gamma: default_gamma(),
            batch_size,
            epochs,
            max_steps: None,
            learning_rate,
            adam: AdamConfig::default(),
            seed: 0,
            tied: false,
            rtol: default_rtol(),
            early_stopping: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.learning_rate)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("γ must be non-negative, got {}", self.gamma)));
        }
        if !(self.rtol > 0.0 && self.rtol < 1.0) {
            return Err(Error::Config(format!("rtol must lie in (0, 1), got {}", self.rtol)));
        }
        if let ScoreKind::Ridge { reg } = self.score {
            if !(reg > 0.0 && reg.is_finite()) {
                return Err(Error::Config(format!("ridge regularization must be positive, got {reg}")));
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::Config("Adam moments must lie in [0, 1) and ε must be positive".into()));
        }
        Ok(())
    }

    /// Steps actually executed for `n` samples.
    pub fn total_steps(&self, n: usize) -> usize {
        let per_epoch = if self.batch_size <= n { n / self.batch_size } else { 0 };
        let total = per_epoch * self.epochs;
        self.max_steps.map_or(total, |cap| total.min(cap))
    }
}

/// The two feature maps being trained; `psi_next` is `None` when tied.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    pub psi: Mlp,
    pub psi_next: Option<Mlp>,
}

impl FeaturePair {
    pub fn tied(psi: Mlp) -> FeaturePair {
        FeaturePair { psi, psi_next: None }
    }

    pub fn untied(psi: Mlp, psi_next: Mlp) -> FeaturePair {
        FeaturePair { psi, psi_next: Some(psi_next) }
    }

    pub fn next(&self) -> &Mlp {
        self.psi_next.as_ref().unwrap_or(&self.psi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub score: ScoreValue,
    pub wall_ms: f64,
}

/// Snapshot taken when training hits a non-finite value or a numerical error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbortReport {
    pub step: usize,
    pub epoch: usize,
    pub reason: String,
    pub batch_indices: Vec<usize>,
    pub params: Vec<f64>,
    pub params_next: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub epoch_wall_ms: Vec<f64>,
    /// Validation score after each epoch, when a validation set was given.
    pub validation: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.log.len()
    }

    pub fn final_score(&self) -> Option<&ScoreValue> {
        self.log.last().map(|r| &r.score)
    }

    pub const CSV_HEADER: &'static str =
        "step,epoch,lr,score_total,correlation_term,distortion_X,distortion_Xprime,cond_CX,cond_CXprime,wall_ms";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for row in &self.log {
            let s = &row.score;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{:.3}",
                row.step,
                row.epoch,
                row.lr,
                s.total,
                s.correlation,
                s.distortion_x,
                s.distortion_y,
                s.cond_x,
                s.cond_y,
                row.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

struct Abort<'a> {
    step: usize,
    epoch: usize,
    batch: &'a [usize],
}

impl Abort<'_> {
    fn report(&self, reason: String, maps: &FeaturePair) -> Error {
        Error::Aborted(Box::new(AbortReport {
            step: self.step,
            epoch: self.epoch,
            reason,
            batch_indices: self.batch.to_vec(),
            params: maps.psi.params().to_vec(),
            params_next: maps.psi_next.as_ref().map(|m| m.params().to_vec()),
        }))
    }
}

fn check_maps(data_dim: usize, maps: &FeaturePair, config: &TrainConfig) -> Result<()> {
    if config.tied && maps.psi_next.is_some() {
        return Err(Error::Config("tied training given two feature maps".into()));
    }
    if !config.tied && maps.psi_next.is_none() {
        return Err(Error::Config("untied training needs a second feature map".into()));
    }
    for m in [&maps.psi, maps.next()] {
        if m.spec().input_dim != data_dim {
            return Err(Error::Dimension(format!(
                "feature map input dimension {} differs from data dimension {data_dim}",
                m.spec().input_dim
            )));
        }
    }
    if maps.psi.spec().output_dim() != maps.next().spec().output_dim() {
        return Err(Error::Dimension("the two feature maps differ in output dimension".into()));
    }
    Ok(())
}

/// Transfer-operator score on a full dataset without gradients.
pub fn evaluate_score(data: &Dataset, maps: &FeaturePair, config: &TrainConfig) -> Result<ScoreValue> {
    let psi = maps.psi.forward(&data.x)?.0;
    let next = maps.next().forward(&data.y)?.0;
    let cov = Covariances::estimate(&psi, &next)?;
    Ok(config.score.evaluate(&cov, config.gamma, config.rtol, false)?.0)
}

/// Maximizes a transfer-operator score over the parameters of `maps`.
///
/// Each step samples a batch, builds covariances, evaluates the score and its
/// gradient, backpropagates through both maps and applies Adam to the negated
/// score. The logged score is the one computed before the update.
pub fn train(
    data: &Dataset,
    validation: Option<&Dataset>,
    maps: &mut FeaturePair,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if matches!(config.score, ScoreKind::Generator) {
        return Err(Error::Config("use train_generator for the generator score".into()));
    }
    check_maps(data.dim(), maps, config)?;
    let n = data.len();
    if n < config.batch_size {
        return Err(Error::Config(format!("dataset has {n} samples, fewer than the batch size {}", config.batch_size)));
    }

    let mut adam = Adam::new(maps.psi.param_count(), config.adam);
    let mut adam_next = maps.psi_next.as_ref().map(|m| Adam::new(m.param_count(), config.adam));
    let total_steps = config.total_steps(n);
    let mut report = TrainReport { log: Vec::with_capacity(total_steps), epoch_wall_ms: Vec::new(), validation: Vec::new(), stopped_early: false };
    let mut plateau = Plateau::default();
    let start = Instant::now();
    let mut step = 0;

    'epochs: for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        for batch in minibatches(n, config.batch_size, config.seed, epoch as u64) {
            if step >= total_steps {
                break 'epochs;
            }
            let ctx = Abort { step, epoch, batch: &batch };
            let (xb, yb) = data.select(&batch);
            let (psi, hooks) = maps.psi.forward(&xb)?;
            let (next, hooks_next) = maps.next().forward(&yb)?;
            if !finite(psi.as_slice()) || !finite(next.as_slice()) {
                return Err(ctx.report("non-finite features".into(), maps));
            }
            let cov = Covariances::estimate(&psi, &next)?;
            let (value, grad) = match config.score.evaluate(&cov, config.gamma, config.rtol, true) {
                Ok(v) => v,
                Err(e) if e.is_numerical() || matches!(e, Error::DegenerateBatch(_)) => {
                    return Err(ctx.report(e.to_string(), maps));
                }
                Err(e) => return Err(e),
            };
            if !value.total.is_finite() {
                return Err(ctx.report(format!("non-finite loss {}", -value.total), maps));
            }
            let grad = grad.expect("gradient requested");
            let (g_psi, g_next) = cov.pullback(&grad, &psi, &next);
            // Loss is the negated score.
            let mut d_psi = maps.psi.pullback(&hooks, &g_psi)?;
            let d_next = maps.next().pullback(&hooks_next, &g_next)?;
            if maps.psi_next.is_none() {
                for (a, b) in d_psi.iter_mut().zip(&d_next) {
                    *a += b;
                }
            }
            if !finite(&d_psi) || !finite(&d_next) {
                return Err(ctx.report("non-finite gradient".into(), maps));
            }
            d_psi.iter_mut().for_each(|g| *g = -*g);
            adam.step(maps.psi.params_mut(), &d_psi, config.learning_rate);
            if let (Some(m), Some(opt)) = (maps.psi_next.as_mut(), adam_next.as_mut()) {
                let neg: Vec<f64> = d_next.iter().map(|g| -g).collect();
                opt.step(m.params_mut(), &neg, config.learning_rate);
            }
            report.log.push(LogRow {
                step,
                epoch,
                lr: config.learning_rate,
                score: value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        report.epoch_wall_ms.push(epoch_start.elapsed().as_secs_f64() * 1e3);
        if let (Some(val), Some(es)) = (validation, config.early_stopping) {
            let score = evaluate_score(val, maps, config)?.total;
            report.validation.push(score);
            if plateau.update(score, &es) {
                report.stopped_early = true;
                break;
            }
        }
    }
    Ok(report)
}

#[derive(Default)]
struct Plateau {
    best: Option<f64>,
    stale: usize,
}

impl Plateau {
    /// Returns true once `patience` evaluations pass without a gain above `min_delta`.
    fn update(&mut self, score: f64, es: &EarlyStopping) -> bool {
        match self.best {
            Some(b) if score <= b + es.min_delta => self.stale += 1,
            _ => {
                self.best = Some(score);
                self.stale = 0;
            }
        }
        self.stale >= es.patience
    }
}

/// Maximizes the generator score over a single smooth feature map, using states
/// `x` (`d×n`) sampled from the invariant law and the known drift and diffusion.
pub fn train_generator(x: &Matrix, sde: &dyn ItoSde, map: &mut Mlp, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if !matches!(config.score, ScoreKind::Generator) {
        return Err(Error::Config("train_generator requires the generator score".into()));
    }
    if map.spec().input_dim != x.nrows() {
        return Err(Error::Dimension("feature map and samples differ in dimension".into()));
    }
    let n = x.ncols();
    if n < config.batch_size {
        return Err(Error::Config(format!("dataset has {n} samples, fewer than the batch size {}", config.batch_size)));
    }
    let mut adam = Adam::new(map.param_count(), config.adam);
    let total_steps = config.total_steps(n);
    let mut report = TrainReport { log: Vec::with_capacity(total_steps), epoch_wall_ms: Vec::new(), validation: Vec::new(), stopped_early: false };
    let start = Instant::now();
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        for batch in minibatches(n, config.batch_size, config.seed, epoch as u64) {
            if step >= total_steps {
                break 'epochs;
            }
            let xb = x.select_columns(&batch);
            let (psi, dpsi, hooks) = map.ito_forward(&xb, sde)?;
            let abort = |reason: String, map: &Mlp| {
                Error::Aborted(Box::new(AbortReport {
                    step,
                    epoch,
                    reason,
                    batch_indices: batch.clone(),
                    params: map.params().to_vec(),
                    params_next: None,
                }))
            };
            if !finite(psi.as_slice()) || !finite(dpsi.as_slice()) {
                return Err(abort("non-finite features".into(), map));
            }
            let cov = GeneratorCovariances::estimate(&psi, &dpsi)?;
            let (value, grad) = match score_generator(&cov, config.gamma, config.rtol, true) {
                Ok(v) => v,
                Err(e) if e.is_numerical() => return Err(abort(e.to_string(), map)),
                Err(e) => return Err(e),
            };
            if !value.total.is_finite() {
                return Err(abort(format!("non-finite loss {}", -value.total), map));
            }
            let (g_psi, g_dpsi) = cov.pullback(&grad.expect("gradient requested"), &psi, &dpsi);
            let mut g = map.pullback_ito(&hooks, &g_psi, &g_dpsi)?;
            if !finite(&g) {
                return Err(abort("non-finite gradient".into(), map));
            }
            g.iter_mut().for_each(|v| *v = -*v);
            adam.step(map.params_mut(), &g, config.learning_rate);
            report.log.push(LogRow {
                step,
                epoch,
                lr: config.learning_rate,
                score: value,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
            step += 1;
        }
        report.epoch_wall_ms.push(epoch_start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(report)
}
