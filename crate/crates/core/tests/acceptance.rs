//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if
//! any criterion fails.
//!
//! Run a subset with `cargo test --test acceptance -- 2 5 7`.
//! `DPNETS_ACCEPTANCE_SEEDS=n` shortens the logistic benchmark to `n` seeds for
//! local iteration; the criterion line reports the seed count used.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dpnets::cli::{run_experiment, ExperimentConfig, Oracle};
use dpnets::features::{Activation, FeatureMap, Features, Mlp, MlpSpec};
use dpnets::ndcore::{pinv_sqrt, sym_eig, Matrix};
use dpnets::regression::{GeneratorModel, TransferModel};
use dpnets::scores::{
    score_generator, score_p, score_ridge, score_s, Covariances, GeneratorCovariances, ScoreKind, ScoreValue,
};
use dpnets::systems::{Langevin, LinearSystem, LogisticMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Central differences of `f` at `x` with step `1e-6`.
fn fd_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_mlp(rng: &mut ChaCha8Rng, r: usize) -> Features {
    let act = if rng.random_bool(0.5) { Activation::LeakyRelu } else { Activation::Celu };
    let width = rng.random_range(4..24);
    let spec = MlpSpec::new(1, &[width, width, r], act, rng.random());
    Features::Mlp(Mlp::init(&spec).unwrap())
}

fn seeds_from_env(default: u64) -> u64 {
    std::env::var("DPNETS_ACCEPTANCE_SEEDS").ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

// ---------------------------------------------------------------------------

fn logistic_benchmark() -> Outcome {
    let seeds = seeds_from_env(20);
    let relaxed = ExperimentConfig::logistic(ScoreKind::S);
    let projection = ExperimentConfig::logistic(ScoreKind::P);
    let oracle = Oracle::build(&relaxed.system, relaxed.evaluation.grid).unwrap();
    let jobs: Vec<(bool, u64)> = (0..seeds).flat_map(|s| [(true, s), (false, s)]).collect();
    let results: Vec<(bool, f64)> = jobs
        .par_iter()
        .map(|&(is_relaxed, seed)| {
            let cfg = if is_relaxed { &relaxed } else { &projection };
            let out = run_experiment(cfg, seed, Some(&oracle)).expect("training run failed");
            let key = if is_relaxed { "spectral_error" } else { "optimality_gap" };
            let value = out.metrics.iter().find(|(k, _)| k == key).expect("metric missing").1;
            (is_relaxed, value)
        })
        .collect();
    let mean = |want: bool| {
        let v: Vec<f64> = results.iter().filter(|(r, _)| *r == want).map(|(_, x)| *x).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len().max(2) - 1) as f64).sqrt();
        (m, sd)
    };
    let (se, se_sd) = mean(true);
    let (gap, gap_sd) = mean(false);
    check(
        se <= 0.20 && gap <= 0.80,
        format!(
            "{seeds} seeds; relaxed spectral error {se:.4} ± {se_sd:.4} (≤ 0.20), projection optimality gap {gap:.4} ± {gap_sd:.4} (≤ 0.80)"
        ),
    )
}

fn inequality_chain() -> Outcome {
    let oracle = LogisticMap::default().oracle(1024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_chain = f64::NEG_INFINITY;
    let mut worst_bound = f64::NEG_INFINITY;
    for _ in 0..200 {
        let r = rng.random_range(2..=7);
        let f = random_mlp(&mut rng, r);
        let g = random_mlp(&mut rng, r);
        let cov = oracle.covariances(&f, &g).unwrap();
        let p = score_p(&cov, 0.0, 1e-10, false).unwrap().0.total;
        let s = score_s(&cov, 0.0, false).unwrap().0.total;
        worst_chain = worst_chain.max(s - p);
        worst_bound = worst_bound.max(p - oracle.top_singular_energy(r));
    }
    let r = 7;
    let u = oracle.left_singular.columns(0, r).transpose();
    let v = oracle.right_singular.columns(0, r).transpose();
    let cov = oracle.covariances_tabulated(&u, &v).unwrap();
    let p = score_p(&cov, 0.0, 1e-10, false).unwrap().0.total;
    let equality = (p - oracle.top_singular_energy(r)).abs();
    check(
        worst_chain <= 1e-6 && worst_bound <= 1e-6 && equality <= 1e-6,
        format!(
            "200 maps; max(S⁰−P⁰) = {worst_chain:.2e}, max(P⁰−Σσ²) = {worst_bound:.2e}, |P⁰−Σσ²| on singular functions = {equality:.2e}"
        ),
    )
}

fn generator_bound() -> Outcome {
    let oracle = Langevin::ornstein_uhlenbeck(1.0, 1.0, 8.0).oracle(1600).unwrap();
    let g = oracle.grid_size();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst_equality = 0.0_f64;
    let mut worst_grid = 0.0_f64;
    for r in 1..=5 {
        let phi = oracle.eigenfunctions.columns(0, r).transpose();
        let p = score_generator(&oracle.covariances_tabulated(&phi).unwrap(), 0.0, 1e-10, false).unwrap().0.total;
        let exact: f64 = -((0..r).sum::<usize>() as f64);
        let grid: f64 = oracle.eigenvalues[..r].iter().sum();
        worst_equality = worst_equality.max((p - exact).abs());
        worst_grid = worst_grid.max((p - grid).abs());
    }
    let mut worst_bound = f64::NEG_INFINITY;
    for trial in 0..100 {
        let r = 1 + trial % 5;
        // Half the subspaces mix the leading 12 eigenfunctions, half are tabulated MLPs.
        let raw = if trial % 2 == 0 {
            gaussian(r, 12, &mut rng) * oracle.eigenfunctions.columns(0, 12).transpose()
        } else {
            let f = random_mlp(&mut rng, r);
            f.eval(&Matrix::from_row_slice(1, g, &oracle.grid)).unwrap()
        };
        let gram = {
            let mut pw = raw.clone();
            for j in 0..g {
                pw.column_mut(j).scale_mut(oracle.weights[j]);
            }
            &pw * raw.transpose()
        };
        let q = pinv_sqrt(&gram, 1e-12).unwrap() * &raw;
        let p = score_generator(&oracle.covariances_tabulated(&q).unwrap(), 0.0, 1e-10, false).unwrap().0.total;
        // Piecewise-linear nets can span fewer than r dimensions; the bound uses the true dimension.
        let eig = sym_eig(&gram).unwrap().eigenvalues;
        let dim = eig.iter().filter(|&&l| l > 1e-12 * eig.max()).count();
        let bound: f64 = oracle.eigenvalues[..dim].iter().sum();
        worst_bound = worst_bound.max(p - bound);
    }
    check(
        worst_equality <= 1e-3 && worst_grid <= 1e-8 && worst_bound <= 1e-6,
        format!(
            "eigenfunctions: |P∂⁰−Σλ| = {worst_equality:.2e} vs exact, {worst_grid:.2e} vs grid; 100 subspaces: max(P∂⁰−Σλ) = {worst_bound:.2e}"
        ),
    )
}

type ScoreFn = dyn Fn(&Covariances, bool) -> (ScoreValue, Option<dpnets::scores::CovGrad>);

fn transfer_score_fd(rng: &mut ChaCha8Rng, eval: &ScoreFn) -> f64 {
    let (r, m) = (3, 40);
    let psi = gaussian(r, m, rng);
    let next = &psi * 0.6 + gaussian(r, m, rng) * 0.8;
    let cov = Covariances::estimate(&psi, &next).unwrap();
    let grad = eval(&cov, true).1.unwrap();
    let (gp, gn) = cov.pullback(&grad, &psi, &next);
    let joined: Vec<f64> = psi.iter().chain(next.iter()).copied().collect();
    let fd = fd_gradient(&joined, |v| {
        let a = Matrix::from_column_slice(r, m, &v[..r * m]);
        let b = Matrix::from_column_slice(r, m, &v[r * m..]);
        eval(&Covariances::estimate(&a, &b).unwrap(), false).0.total
    });
    let analytic: Vec<f64> = gp.iter().chain(gn.iter()).copied().collect();
    rel_err(&analytic, &fd)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = Vec::new();
    let transfer: [(&str, Box<ScoreFn>); 3] = [
        ("P", Box::new(|c, g| score_p(c, 1.0, 1e-10, g).unwrap())),
        ("S", Box::new(|c, g| score_s(c, 1.0, g).unwrap())),
        ("ridge", Box::new(|c, g| score_ridge(c, 0.1, 1.0, g).unwrap())),
    ];
    for (name, eval) in &transfer {
        let e = (0..20).map(|_| transfer_score_fd(&mut rng, eval.as_ref())).fold(0.0, f64::max);
        worst.push((name.to_string(), e));
    }

    let mut e_gen = 0.0_f64;
    for _ in 0..20 {
        let (r, m) = (3, 40);
        let psi = gaussian(r, m, &mut rng);
        let dpsi = gaussian(r, m, &mut rng);
        let eval = |a: &Matrix, b: &Matrix, g: bool| {
            let cov = GeneratorCovariances::estimate(a, b).unwrap();
            let (v, grad) = score_generator(&cov, 1.0, 1e-10, g).unwrap();
            (v, grad, cov)
        };
        let (_, grad, cov) = eval(&psi, &dpsi, true);
        let (gp, gd) = cov.pullback(&grad.unwrap(), &psi, &dpsi);
        let joined: Vec<f64> = psi.iter().chain(dpsi.iter()).copied().collect();
        let fd = fd_gradient(&joined, |v| {
            let a = Matrix::from_column_slice(r, m, &v[..r * m]);
            let b = Matrix::from_column_slice(r, m, &v[r * m..]);
            eval(&a, &b, false).0.total
        });
        let analytic: Vec<f64> = gp.iter().chain(gd.iter()).copied().collect();
        e_gen = e_gen.max(rel_err(&analytic, &fd));
    }
    worst.push(("generator".into(), e_gen));

    let mut e_mlp = 0.0_f64;
    for i in 0..20 {
        let act = if i % 2 == 0 { Activation::Celu } else { Activation::LeakyRelu };
        let spec = MlpSpec::new(2, &[6, 5, 3], act, 100 + i);
        let mut mlp = Mlp::init(&spec).unwrap();
        let x = gaussian(2, 7, &mut rng);
        let upstream = gaussian(3, 7, &mut rng);
        let (_, hooks) = mlp.forward(&x).unwrap();
        let analytic = mlp.pullback(&hooks, &upstream).unwrap();
        let base = mlp.params().to_vec();
        let fd = fd_gradient(&base, |p| {
            mlp.set_params(p).unwrap();
            mlp.forward(&x).unwrap().0.component_mul(&upstream).sum()
        });
        e_mlp = e_mlp.max(rel_err(&analytic, &fd));
    }
    worst.push(("MLP pullback".into(), e_mlp));

    let max = worst.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    check(max < 1e-4, format!("20 instances each; max relative error: {detail} (< 1e-4)"))
}

fn projection_identity() -> Outcome {
    let system = LogisticMap::default();
    let oracle = system.oracle(1024).unwrap();
    let g = oracle.grid_size();
    let w = &oracle.weights;
    let tab = |powers: &[(f64, i32)]| -> Vec<f64> {
        oracle.grid.iter().map(|&x| powers.iter().map(|&(c, k)| c * x.powi(k)).sum()).collect()
    };
    let h = [tab(&[(1.0, 1)]), tab(&[(1.0, 2), (-0.5, 0)])];
    let h_next = [tab(&[(1.0, 0), (-1.0, 1)]), tab(&[(1.0, 3)])];

    // Weighted Gram–Schmidt gives orthonormal bases of H and H' in L²_π.
    let inner = |a: &[f64], b: &[f64]| (0..g).map(|i| w[i] * a[i] * b[i]).sum::<f64>();
    let orthonormalize = |basis: &[Vec<f64>]| {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for f in basis {
            let mut v = f.clone();
            for q in &out {
                let c = inner(&v, q);
                v.iter_mut().zip(q).for_each(|(vi, qi)| *vi -= c * qi);
            }
            let n = inner(&v, &v).sqrt();
            out.push(v.into_iter().map(|x| x / n).collect());
        }
        out
    };
    let q = orthonormalize(&h);
    let q_next = orthonormalize(&h_next);
    // (T f)(x_a) = Σ_b p(x_a, y_b) f(y_b) / G on the midpoint grid.
    let apply_t = |f: &[f64]| -> Vec<f64> {
        oracle.grid.iter().map(|&x| (0..g).map(|b| system.kernel(x, oracle.grid[b]) * f[b]).sum::<f64>() / g as f64).collect()
    };
    let mut function_space = 0.0;
    for qn in &q_next {
        let tq = apply_t(qn);
        for qi in &q {
            function_space += inner(qi, &tq).powi(2);
        }
    }

    let psi = Matrix::from_fn(2, g, |i, j| h[i][j]);
    let psi_next = Matrix::from_fn(2, g, |i, j| h_next[i][j]);
    let cov = oracle.covariances_tabulated(&psi, &psi_next).unwrap();
    let formula = score_p(&cov, 0.0, 1e-12, false).unwrap().0.correlation;
    let diff = (function_space - formula).abs();
    check(
        diff < 1e-4,
        format!("‖P_H T P'_H'‖²_HS = {function_space:.8}, covariance formula = {formula:.8}, difference {diff:.2e} (< 1e-4)"),
    )
}

fn concentration_rate() -> Outcome {
    let system = LogisticMap::default();
    let oracle = system.oracle(1024).unwrap();
    let spec = MlpSpec::new(1, &[16, 16, 3], Activation::Celu, 2024);
    let map = Features::Mlp(Mlp::init(&spec).unwrap());
    let population = score_s(&oracle.covariances(&map, &map).unwrap(), 0.0, false).unwrap().0.total;
    let sizes: Vec<usize> = (8..=16).map(|k| 1usize << k).collect();
    let medians: Vec<f64> = sizes
        .par_iter()
        .map(|&n| {
            let mut errors: Vec<f64> = (0..50u64)
                .map(|s| {
                    let data = system.sample_trajectory(n, (n as u64) << 8 | s).unwrap();
                    let cov = Covariances::estimate(&map.eval(&data.x).unwrap(), &map.eval(&data.y).unwrap()).unwrap();
                    (score_s(&cov, 0.0, false).unwrap().0.total - population).abs()
                })
                .collect();
            errors.sort_by(f64::total_cmp);
            0.5 * (errors[24] + errors[25])
        })
        .collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = medians.iter().map(|e| e.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / xs.len() as f64, ys.iter().sum::<f64>() / ys.len() as f64);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    check(
        (-0.7..=-0.3).contains(&slope),
        format!("log-log slope {slope:.3} over n = 2^8..2^16, 50 seeds each (in [−0.7, −0.3])"),
    )
}

fn regression_closed_forms() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    let a = 0.8;
    let noiseless = LinearSystem::scalar(a, 0.0).sample_trajectory(500, 1).unwrap();
    let exact = TransferModel::fit(Features::Identity(1), &noiseless, 1e-12).unwrap();
    let e = (exact.operator[(0, 0)] - a).abs();
    ok &= e < 1e-12;
    notes.push(format!("noiseless |T̂−a| = {e:.1e}"));

    let n = 100_000;
    let se = ((1.0 - a * a) / n as f64).sqrt();
    let mut worst = 0.0_f64;
    for seed in 0..5 {
        let data = LinearSystem::scalar(a, 0.6).sample_trajectory(n, seed).unwrap();
        let model = TransferModel::fit(Features::Identity(1), &data, 1e-12).unwrap();
        worst = worst.max((model.operator[(0, 0)] - a).abs() / se);
    }
    ok &= worst < 3.0;
    notes.push(format!("noisy max |T̂−a| = {worst:.2} SE"));

    let theta = 1.5;
    let ou = Langevin { lag_steps: 20, ..Langevin::ornstein_uhlenbeck(theta, 1.0, 8.0) };
    let data = ou.sample_trajectory(20_000, 3).unwrap();
    let gen = GeneratorModel::fit(Features::Identity(1), &data.x, &ou, 1e-12).unwrap();
    // The Itô image of a linear feature is linear, so the estimate is exact.
    let e = (gen.operator[(0, 0)] + theta).abs();
    ok &= e < 1e-10;
    notes.push(format!("OU |L̂+θ| = {e:.1e}"));

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst_forecast = 0.0_f64;
    let datasets = [
        LogisticMap::default().sample_trajectory(2000, 4).unwrap(),
        LinearSystem::scalar(0.5, 1.0).sample_trajectory(2000, 5).unwrap(),
        Langevin { burn_in: 1000, ..Langevin::default() }.sample_trajectory(2000, 6).unwrap(),
    ];
    for data in &datasets {
        for ridge in [None, Some(1e-3)] {
            let f = random_mlp(&mut rng, 5);
            let model = match ridge {
                None => TransferModel::fit(f, data, 1e-8).unwrap(),
                Some(reg) => TransferModel::fit_ridge(f, data, reg, 1e-8).unwrap(),
            };
            let values = gaussian(data.len(), 2, &mut rng);
            let queries = data.x.columns(0, 50).into_owned();
            let p = model.predict(&values, &queries).unwrap();
            let fc = model.forecast(&values, 1, &queries).unwrap();
            worst_forecast = worst_forecast.max((p - fc).amax());
        }
    }
    ok &= worst_forecast < 1e-8;
    notes.push(format!("forecast(t=1) vs predict max difference {worst_forecast:.1e}"));
    check(ok, notes.join("; "))
}

fn langevin_recovery() -> Outcome {
    let cfg = ExperimentConfig::langevin();
    let oracle = Oracle::build(&cfg.system, cfg.evaluation.grid).unwrap();
    let errors: Vec<f64> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let out = run_experiment(&cfg, seed, Some(&oracle)).expect("generator training failed");
            out.metrics.iter().find(|(k, _)| k == "max_relative_eigenvalue_error").expect("metric missing").1
        })
        .collect();
    let good = errors.iter().filter(|e| **e < 0.10).count();
    let listed = errors.iter().map(|e| format!("{:.1}%", 100.0 * e)).collect::<Vec<_>>().join(", ");
    check(good >= 4, format!("{good}/{} seeds below 10% max relative error [{listed}]", errors.len()))
}

fn strip_wall_clock(log: &str) -> String {
    log.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head)).collect::<Vec<_>>().join("\n")
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let configs = [
        (
            "transfer",
            r#"{"system": {"kind": "logistic"}, "samples": 2048,
                "features": {"input_dim": 1, "widths": [16, 16, 4], "activations": ["leaky_relu", "leaky_relu", "identity"]},
                "train": {"score": {"kind": "p"}, "batch_size": 512, "epochs": 4, "learning_rate": 0.001},
                "seeds": [0, 1]}"#,
        ),
        (
            "generator",
            r#"{"system": {"kind": "langevin", "burn_in": 1000}, "samples": 4096,
                "features": {"input_dim": 1, "widths": [8, 3], "activations": ["celu", "identity"]},
                "train": {"score": {"kind": "generator"}, "batch_size": 1024, "epochs": 3, "learning_rate": 0.003, "tied": true},
                "evaluation": {"grid": 512, "top_k": 2},
                "seeds": [0]}"#,
        ),
    ];
    let files = ["train_log.csv", "psi.params", "psi_next.params", "model.dpn", "metrics.csv", "eigenvalues.csv"];
    let mut compared = 0;
    for (name, text) in configs {
        let cfg_path = root.path().join(format!("{name}.json"));
        std::fs::write(&cfg_path, text).unwrap();
        let run = |tag: &str| {
            let out = root.path().join(format!("{name}_{tag}"));
            let status = Command::new(env!("CARGO_BIN_EXE_dpnets"))
                .args(["train", "--config"])
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out)
                .output()
                .unwrap();
            assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
            out
        };
        let (a, b) = (run("a"), run("b"));
        for seed_dir in std::fs::read_dir(&a).unwrap().flatten().filter(|e| e.path().is_dir()) {
            let seed = seed_dir.file_name();
            for file in files {
                let pa = a.join(&seed).join(file);
                if !pa.exists() {
                    continue;
                }
                let (x, y) = (read(&pa), read(&b.join(&seed).join(file)));
                let same = if file == "train_log.csv" {
                    strip_wall_clock(&String::from_utf8_lossy(&x)) == strip_wall_clock(&String::from_utf8_lossy(&y))
                } else {
                    x == y
                };
                if !same {
                    return Err(format!("{name}/{}/{file} differs between identical runs", seed.to_string_lossy()));
                }
                compared += 1;
            }
        }
    }
    check(compared >= 12, format!("{compared} artifacts bit-identical across repeated runs (logs compared without wall_ms)"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "logistic-map benchmark", logistic_benchmark),
        (2, "projection-score inequality chain", inequality_chain),
        (3, "generator-score bound", generator_bound),
        (4, "gradient checks", gradient_checks),
        (5, "projection/covariance identity", projection_identity),
        (6, "empirical-score concentration", concentration_rate),
        (7, "operator-regression closed forms", regression_closed_forms),
        (8, "Langevin eigenvalue recovery", langevin_recovery),
        (9, "determinism", determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    // The slow training criteria run last so fast regressions surface first.
    let mut order: Vec<usize> = (0..criteria.len()).collect();
    order.sort_by_key(|&i| matches!(criteria[i].0, 1 | 8));
    let mut lines = vec![String::new(); criteria.len()];
    for i in order {
        let (id, name, run) = criteria[i];
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(d) => format!("criterion {id} {name}: PASS ({secs:.1}s) {d}"),
            Err(d) => {
                failures += 1;
                format!("criterion {id} {name}: FAIL ({secs:.1}s) {d}")
            }
        };
        eprintln!("{line}");
        lines[i] = line;
    }
    println!("\nacceptance summary");
    for line in lines.iter().filter(|l| !l.is_empty()) {
        println!("{line}");
    }
    if failures > 0 {
        println!("{failures} criterion(s) failed");
        std::process::exit(1);
    }
}
