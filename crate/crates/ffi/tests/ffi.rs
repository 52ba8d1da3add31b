use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use dpnets_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe {
        let mut buf = vec![0 as c_char; 256];
        let n = dpn_last_error(buf.as_mut_ptr(), buf.len());
        assert!(n >= 1);
        std::ffi::CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

const SPEC: &str = r#"{"input_dim": 1, "widths": [8, 3], "activations": ["celu", "identity"], "seed": 5}"#;

fn new_mlp() -> *mut DpnMlp {
    unsafe {
        let mut mlp = ptr::null_mut();
        assert_eq!(dpn_mlp_new(cstr(SPEC).as_ptr(), &mut mlp), DpnStatus::Ok);
        assert!(!mlp.is_null());
        mlp
    }
}

#[test]
fn mlp_handle_round_trip() {
    unsafe {
        let mlp = new_mlp();
        assert_eq!(dpn_mlp_input_dim(mlp), 1);
        assert_eq!(dpn_mlp_output_dim(mlp), 3);
        let n = dpn_mlp_param_count(mlp);
        assert_eq!(n, 8 + 8 + 24 + 3);

        let mut params = vec![0.0; n];
        assert_eq!(dpn_mlp_get_params(mlp, params.as_mut_ptr(), n - 1), DpnStatus::BufferTooSmall);
        assert_eq!(dpn_mlp_get_params(mlp, params.as_mut_ptr(), n), DpnStatus::Ok);
        assert!(params.iter().any(|&p| p != 0.0));

        let zeros = vec![0.0; n];
        assert_eq!(dpn_mlp_set_params(mlp, zeros.as_ptr(), n), DpnStatus::Ok);
        let x = [0.3, -2.0];
        let mut out = [1.0; 6];
        assert_eq!(dpn_mlp_eval(mlp, x.as_ptr(), 2, out.as_mut_ptr()), DpnStatus::Ok);
        assert_eq!(out, [0.0; 6]);
        assert_eq!(dpn_mlp_set_params(mlp, zeros.as_ptr(), n + 1), DpnStatus::Dimension);
        dpn_mlp_free(mlp);
    }
}

#[test]
fn null_and_malformed_inputs_report_status_and_message() {
    unsafe {
        assert_eq!(dpn_mlp_eval(ptr::null(), ptr::null(), 1, ptr::null_mut()), DpnStatus::NullPointer);
        assert!(last_error().contains("null"));

        let mut mlp = ptr::null_mut();
        assert_eq!(dpn_mlp_new(cstr("{").as_ptr(), &mut mlp), DpnStatus::InvalidArgument);
        assert!(mlp.is_null());
        assert_eq!(dpn_mlp_new(ptr::null(), &mut mlp), DpnStatus::NullPointer);
        assert_eq!(dpn_mlp_new(cstr(SPEC).as_ptr(), ptr::null_mut()), DpnStatus::NullPointer);

        let mut model = ptr::null_mut();
        assert_eq!(dpn_model_load(cstr("/nonexistent/model.dpn").as_ptr(), &mut model), DpnStatus::Io);
        assert!(model.is_null());

        dpn_mlp_free(ptr::null_mut());
        dpn_model_free(ptr::null_mut());
        assert_eq!(dpn_mlp_param_count(ptr::null()), 0);
        assert_eq!(dpn_model_rank(ptr::null()), 0);
    }
}

#[test]
fn last_error_truncates_and_reports_full_length() {
    unsafe {
        assert_eq!(dpn_mlp_new(cstr("not json").as_ptr(), &mut ptr::null_mut()), DpnStatus::InvalidArgument);
        let mut small = [0 as c_char; 4];
        let full = dpn_last_error(small.as_mut_ptr(), small.len());
        assert!(full > 4);
        assert_eq!(small[3], 0);
        assert_eq!(dpn_last_error(ptr::null_mut(), 0), full);
    }
}

#[test]
fn scores_match_the_library_and_obey_the_chain() {
    unsafe {
        let (r, m) = (2, 6);
        let psi = [1.0, 0.2, -0.5, 0.9, 0.3, -1.1, 0.8, 0.4, -0.2, 0.1, 1.3, -0.7];
        let next = [0.7, 0.1, -0.2, 1.1, 0.5, -0.8, 0.6, 0.2, 0.1, -0.3, 0.9, -0.4];
        let mut p = DpnScoreValue::default();
        let mut s = DpnScoreValue::default();
        let mut ridge = DpnScoreValue::default();
        let mut g = [0.0; 12];
        let mut gn = [0.0; 12];
        let call = |kind, v: &mut DpnScoreValue, g: *mut f64, gn: *mut f64| {
            dpn_score(kind, 0.0, 0.1, 1e-10, psi.as_ptr(), next.as_ptr(), r, m, v, g, gn)
        };
        assert_eq!(call(DpnScoreKind::P, &mut p, g.as_mut_ptr(), gn.as_mut_ptr()), DpnStatus::Ok);
        assert_eq!(call(DpnScoreKind::S, &mut s, ptr::null_mut(), ptr::null_mut()), DpnStatus::Ok);
        assert_eq!(call(DpnScoreKind::Ridge, &mut ridge, ptr::null_mut(), ptr::null_mut()), DpnStatus::Ok);
        assert!(s.total <= p.total + 1e-12);
        assert!(ridge.total <= p.total + 1e-12);

        let a = dpnets::ndcore::Matrix::from_column_slice(r, m, &psi);
        let b = dpnets::ndcore::Matrix::from_column_slice(r, m, &next);
        let cov = dpnets::scores::Covariances::estimate(&a, &b).unwrap();
        let (direct, grad) = dpnets::scores::score_p(&cov, 0.0, 1e-10, true).unwrap();
        assert_eq!(direct.total, p.total);
        let (ga, gb) = cov.pullback(&grad.unwrap(), &a, &b);
        assert_eq!(ga.as_slice(), &g);
        assert_eq!(gb.as_slice(), &gn);

        let mut gen = DpnScoreValue::default();
        let dpsi = psi.map(|v| -v);
        assert_eq!(
            dpn_generator_score(0.0, 1e-10, psi.as_ptr(), dpsi.as_ptr(), r, m, &mut gen, ptr::null_mut(), ptr::null_mut()),
            DpnStatus::Ok
        );
        assert!((gen.total + 2.0).abs() < 1e-12, "dψ = −ψ gives trace −r, got {}", gen.total);

        let zero = [0.0; 12];
        assert_eq!(
            dpn_score(DpnScoreKind::S, 0.0, 0.0, 1e-10, zero.as_ptr(), zero.as_ptr(), r, m, &mut s, ptr::null_mut(), ptr::null_mut()),
            DpnStatus::Numerical
        );
    }
}

#[test]
fn experiment_models_forecast_and_persist() {
    unsafe {
        let cfg = r#"{"system": {"kind": "linear", "a": [0.6], "noise_std": 0.4}, "samples": 1024,
            "features": {"input_dim": 1, "widths": [6, 2], "activations": ["celu", "identity"]},
            "train": {"score": {"kind": "s"}, "batch_size": 256, "epochs": 2, "learning_rate": 0.001}}"#;
        let mut model = ptr::null_mut();
        assert_eq!(dpn_experiment_run(cstr(cfg).as_ptr(), 0, &mut model), DpnStatus::Ok);
        assert_eq!(dpn_model_rank(model), 2);
        let mut kind = DpnModelKind::Generator;
        assert_eq!(dpn_model_kind(model, &mut kind), DpnStatus::Ok);
        assert_eq!(kind, DpnModelKind::Transfer);

        let (mut re, mut im, mut count) = ([0.0; 2], [0.0; 2], 0usize);
        assert_eq!(dpn_model_eigenvalues(model, re.as_mut_ptr(), im.as_mut_ptr(), 1, &mut count), DpnStatus::BufferTooSmall);
        assert_eq!(count, 2);
        assert_eq!(dpn_model_eigenvalues(model, re.as_mut_ptr(), im.as_mut_ptr(), 2, &mut count), DpnStatus::Ok);

        let state = cstr("state");
        let mut dim = 0usize;
        assert_eq!(dpn_model_observable_dim(model, state.as_ptr(), &mut dim), DpnStatus::Ok);
        assert_eq!(dim, 1);
        assert_eq!(dpn_model_observable_dim(model, cstr("nope").as_ptr(), &mut dim), DpnStatus::InvalidArgument);

        let x = [0.5, -1.0, 2.0];
        let mut one = [0.0; 3];
        assert_eq!(dpn_model_forecast(model, state.as_ptr(), x.as_ptr(), 3, 1.0, one.as_mut_ptr()), DpnStatus::Ok);
        assert_eq!(dpn_model_forecast(model, state.as_ptr(), x.as_ptr(), 3, 0.5, one.as_mut_ptr()), DpnStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = cstr(dir.path().join("m.dpn").to_str().unwrap());
        assert_eq!(dpn_model_save(model, path.as_ptr()), DpnStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(dpn_model_load(path.as_ptr(), &mut loaded), DpnStatus::Ok);
        let mut again = [0.0; 3];
        assert_eq!(dpn_model_forecast(loaded, state.as_ptr(), x.as_ptr(), 3, 1.0, again.as_mut_ptr()), DpnStatus::Ok);
        assert_eq!(one, again);
        dpn_model_free(model);
        dpn_model_free(loaded);

        let generator = r#"{"system": {"kind": "langevin", "burn_in": 1000}, "samples": 2048,
            "features": {"input_dim": 1, "widths": [6, 2], "activations": ["leaky_relu", "identity"]},
            "train": {"score": {"kind": "generator"}, "batch_size": 512, "epochs": 1, "learning_rate": 0.001, "tied": true},
            "evaluation": {"top_k": 1}}"#;
        let mut m = ptr::null_mut();
        assert_eq!(dpn_experiment_run(cstr(generator).as_ptr(), 0, &mut m), DpnStatus::Unsupported);
        assert!(m.is_null());
    }
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { std::ffi::CStr::from_ptr(dpn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    assert!(header_dir().join("dpnets.h").is_file());
}

#[test]
fn c_program_links_against_the_static_library() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib = [deps.join("libdpnets_ffi.a"), deps.parent().unwrap().join("libdpnets_ffi.a")]
        .into_iter()
        .find(|p| p.is_file())
        .expect("static library is built alongside the tests");
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let source = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header_dir())
        .arg(&source)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("smoke test passed"));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
