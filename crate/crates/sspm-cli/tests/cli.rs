//! End-to-end tests of the `sspm` binary: pipeline wiring, file formats,
//! and the exit-code contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DMatrix;
use sspm_core::dictionary::{AcquisitionSchedule, Dictionary, Kernel};
use sspm_core::io;

fn sspm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sspm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_dict_config(path: &Path) {
    let config = serde_json::json!({
        "kernel": "t2_exp",
        "schedule": [[0.01], [0.03], [0.05], [0.08], [0.12], [0.2]],
        "grid": [{"min": 0.02, "max": 0.5, "count": 8, "spacing": "logarithmic"}]
    });
    std::fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

fn write_phantom_config(path: &Path, nx: usize, ny: usize, sigma: f64, seed: u64) {
    // Spectral centers sit on grid points 2 and 6 of the 8-bin log grid, so
    // with a narrow width the spectra are one-bin deltas and the solve
    // converges quickly.
    let config = serde_json::json!({
        "image_shape": [nx, ny],
        "compartments": [
            {"spectral_center": [0.0501], "spectral_width": 0.02,
             "region": {"origin": [0, 0], "shape": [nx, ny]}, "amplitude": 1.0},
            {"spectral_center": [0.3148], "spectral_width": 0.02,
             "region": {"origin": [0, 0], "shape": [nx, ny]}, "amplitude": 0.7}
        ],
        "noise_sigma": sigma,
        "seed": seed
    });
    std::fs::write(path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
}

/// make-dict -> phantom -> solve -> maps, checking artifacts at every step.
#[test]
fn full_pipeline_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dict_cfg = root.join("dict.json");
    write_dict_config(&dict_cfg);

    let dict_dir = root.join("dict");
    assert_code(
        &sspm(&["make-dict", "--config", dict_cfg.to_str().unwrap(), "--out", dict_dir.to_str().unwrap()]),
        0,
    );
    let dict_path = dict_dir.join("dict.sspm");
    assert!(dict_path.exists());
    assert!(dict_dir.join("dict.meta.json").exists());
    assert!(dict_dir.join("manifest.json").exists());

    let phantom_cfg = root.join("phantom.json");
    write_phantom_config(&phantom_cfg, 4, 4, 0.01, 11);
    let ph_dir = root.join("phantom");
    assert_code(
        &sspm(&["phantom", "--dict", dict_path.to_str().unwrap(), "--config",
            phantom_cfg.to_str().unwrap(), "--out", ph_dir.to_str().unwrap()]),
        0,
    );
    for name in ["f_true.sspm", "data.sspm", "mask.sspm", "data.meta.json", "manifest.json"] {
        assert!(ph_dir.join(name).exists(), "{name} missing");
    }

    let solve_dir = root.join("solve");
    assert_code(
        &sspm(&["solve", "--algorithm", "ladmm",
            "--dict", dict_path.to_str().unwrap(),
            "--data", ph_dir.join("data.sspm").to_str().unwrap(),
            "--mask", ph_dir.join("mask.sspm").to_str().unwrap(),
            "--lambda", "0.5", "--beta", "2.0", "--max-iters", "8000", "--rank-tol", "0.08",
            "--tol", "1e-7", "--split-tol", "1e-6",
            "--out", solve_dir.to_str().unwrap()]),
        0,
    );
    assert!(solve_dir.join("f.sspm").exists());
    let trace = std::fs::read_to_string(solve_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,wall_seconds,cost,split_residual,dual_residual"));
    assert!(trace.lines().count() > 1);
    let f = io::read_matrix(&solve_dir.join("f.sspm")).unwrap();
    assert_eq!(f.nrows(), 8);
    assert_eq!(f.ncols(), 16);
    assert!(f.iter().all(|v| *v >= 0.0));

    let maps_dir = root.join("maps");
    assert_code(
        &sspm(&["maps", "--image", solve_dir.join("f.sspm").to_str().unwrap(),
            "--mask", ph_dir.join("mask.sspm").to_str().unwrap(),
            "--regions", "0:4,4:8", "--out", maps_dir.to_str().unwrap()]),
        0,
    );
    assert!(maps_dir.join("map_00.sspm").exists());
    assert!(maps_dir.join("map_00.pgm").exists());
    assert!(maps_dir.join("map_01.sspm").exists());
    // The two maps partition the spectrum: they sum to the total signal.
    let m0 = io::read_array(&maps_dir.join("map_00.sspm")).unwrap();
    let m1 = io::read_array(&maps_dir.join("map_01.sspm")).unwrap();
    for (n, (a, b)) in m0.values.iter().zip(&m1.values).enumerate() {
        let total: f64 = f.column(n).sum();
        assert!((a + b - total).abs() <= 1e-12 * total.abs().max(1.0));
    }
}

/// An identity dictionary turns NNLS into elementwise clamping.
#[test]
fn nnls_identity_clamps_data() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let q = 4;
    let grid = sspm_core::dictionary::build_grid(&[sspm_core::dictionary::AxisSpec {
        min: 0.02,
        max: 0.5,
        count: q,
        spacing: sspm_core::dictionary::Spacing::Logarithmic,
    }])
    .unwrap();
    let schedule = AcquisitionSchedule::new(
        Kernel::T2Exp,
        (0..q).map(|i| vec![0.01 * i as f64]).collect(),
    )
    .unwrap();
    let dict = Dictionary::from_parts(DMatrix::identity(q, q), grid, schedule).unwrap();
    let dict_path = root.join("dict.sspm");
    io::save_dictionary(&dict_path, &dict).unwrap();

    let data = DMatrix::from_row_slice(
        q,
        2,
        &[0.5, -0.25, -1.0, 0.75, 0.0, 2.0, 1.5, -0.5],
    );
    let data_path = root.join("data.sspm");
    io::write_matrix(&data_path, &data).unwrap();
    let mask = sspm_core::spatial::Mask::full(vec![2, 1]).unwrap();
    let mask_path = root.join("mask.sspm");
    io::write_mask(&mask_path, &mask).unwrap();

    let out = root.join("out");
    assert_code(
        &sspm(&["solve", "--algorithm", "nnls",
            "--dict", dict_path.to_str().unwrap(),
            "--data", data_path.to_str().unwrap(),
            "--mask", mask_path.to_str().unwrap(),
            "--out", out.to_str().unwrap()]),
        0,
    );
    let f = io::read_matrix(&out.join("f.sspm")).unwrap();
    for (got, want) in f.iter().zip(data.iter().map(|v| v.max(0.0))) {
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }
}

#[test]
fn missing_input_exits_2_naming_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.sspm");
    let out = sspm(&["solve", "--algorithm", "ladmm",
        "--dict", missing.to_str().unwrap(),
        "--data", missing.to_str().unwrap(),
        "--mask", missing.to_str().unwrap(),
        "--out", dir.path().join("out").to_str().unwrap()]);
    assert_code(&out, 2);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.sspm"), "stderr was: {stderr}");
}

#[test]
fn usage_error_exits_1() {
    assert_code(&sspm(&["solve", "--algorithm", "warp-drive"]), 1);
    assert_code(&sspm(&["no-such-subcommand"]), 1);
    // Malformed region syntax is a usage error, not an I/O error.
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("f.sspm");
    io::write_matrix(&img, &DMatrix::<f64>::zeros(2, 1)).unwrap();
    let mask_path = dir.path().join("mask.sspm");
    io::write_mask(&mask_path, &sspm_core::spatial::Mask::full(vec![1, 1]).unwrap()).unwrap();
    let out = sspm(&["maps", "--image", img.to_str().unwrap(),
        "--mask", mask_path.to_str().unwrap(),
        "--regions", "0-2", "--out", dir.path().join("m").to_str().unwrap()]);
    assert_code(&out, 1);
}

#[test]
fn solver_hitting_cap_exits_3_with_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dict_cfg = root.join("dict.json");
    write_dict_config(&dict_cfg);
    let dict_dir = root.join("dict");
    assert_code(&sspm(&["make-dict", "--config", dict_cfg.to_str().unwrap(),
        "--out", dict_dir.to_str().unwrap()]), 0);
    let phantom_cfg = root.join("phantom.json");
    write_phantom_config(&phantom_cfg, 3, 3, 0.05, 4);
    let ph_dir = root.join("ph");
    assert_code(&sspm(&["phantom", "--dict", dict_dir.join("dict.sspm").to_str().unwrap(),
        "--config", phantom_cfg.to_str().unwrap(), "--out", ph_dir.to_str().unwrap()]), 0);

    let out = root.join("out");
    let result = sspm(&["solve", "--algorithm", "ladmm",
        "--dict", dict_dir.join("dict.sspm").to_str().unwrap(),
        "--data", ph_dir.join("data.sspm").to_str().unwrap(),
        "--mask", ph_dir.join("mask.sspm").to_str().unwrap(),
        "--max-iters", "3", "--out", out.to_str().unwrap()]);
    assert_code(&result, 3);
    // Partial outputs are still written.
    assert!(out.join("f.sspm").exists());
    assert!(out.join("trace.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn tune_beta_writes_choice() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dict_cfg = root.join("dict.json");
    write_dict_config(&dict_cfg);
    let dict_dir = root.join("dict");
    assert_code(&sspm(&["make-dict", "--config", dict_cfg.to_str().unwrap(),
        "--out", dict_dir.to_str().unwrap()]), 0);
    let phantom_cfg = root.join("phantom.json");
    write_phantom_config(&phantom_cfg, 4, 4, 0.01, 9);
    let ph_dir = root.join("ph");
    assert_code(&sspm(&["phantom", "--dict", dict_dir.join("dict.sspm").to_str().unwrap(),
        "--config", phantom_cfg.to_str().unwrap(), "--out", ph_dir.to_str().unwrap()]), 0);

    let out = root.join("tuned");
    assert_code(&sspm(&["tune-beta",
        "--dict", dict_dir.join("dict.sspm").to_str().unwrap(),
        "--data", ph_dir.join("data.sspm").to_str().unwrap(),
        "--mask", ph_dir.join("mask.sspm").to_str().unwrap(),
        "--patch-origin", "0,0", "--patch-shape", "3,3",
        "--candidates", "0.05", "--probe-iters", "20",
        "--out", out.to_str().unwrap()]), 0);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("beta.json")).unwrap()).unwrap();
    assert_eq!(summary["beta"].as_f64(), Some(0.05));
}

#[test]
fn phantom_rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let dict_cfg = root.join("dict.json");
    write_dict_config(&dict_cfg);
    let dict_dir = root.join("dict");
    assert_code(&sspm(&["make-dict", "--config", dict_cfg.to_str().unwrap(),
        "--out", dict_dir.to_str().unwrap()]), 0);
    let phantom_cfg = root.join("phantom.json");
    write_phantom_config(&phantom_cfg, 4, 3, 0.03, 77);

    // Re-running the identical command must reproduce every artifact
    // bit-for-bit, so run twice into the same directory and snapshot between.
    let out: PathBuf = root.join("ph");
    let run = || {
        assert_code(&sspm(&["phantom", "--dict", dict_dir.join("dict.sspm").to_str().unwrap(),
            "--config", phantom_cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    };
    let names = ["data.sspm", "f_true.sspm", "mask.sspm", "manifest.json"];
    run();
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(out.join(n)).unwrap()).collect();
    run();
    for (name, before) in names.iter().zip(&first) {
        let after = std::fs::read(out.join(name)).unwrap();
        assert_eq!(before, &after, "{name} differs between identical runs");
    }
}
