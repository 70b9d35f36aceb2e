use std::process::{Command, Output};

use mi2v_core::denoiser::{parameter_count, DenoiserConfig};
use mi2v_core::io::tensor_io_load;

fn mi2v(args: &[&str], dir: &std::path::Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mi2v"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn mi2v")
}

#[test]
fn params_matches_library_count() {
    let dir = tempfile::tempdir().unwrap();
    for (preset, cfg) in [
        ("micro", DenoiserConfig::micro()),
        ("desk", DenoiserConfig::desk()),
        ("full", DenoiserConfig::full()),
    ] {
        let out = mi2v(&["params", "--preset", preset], dir.path());
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let want = parameter_count(&cfg).unwrap().to_string();
        assert!(text.contains(&want), "{preset}: {text}");
    }
}

#[test]
fn generate_writes_full_latent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"denoiser": {"layers": 2, "hidden": 8, "heads": 2, "softmax_layers": [1], "cond_dim": 8, "qk_norm": false}}"#,
    )
    .unwrap();
    let out = mi2v(
        &["generate", "--config", cfg.to_str().unwrap(), "--steps", "1", "--out", "z.mi2v"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let entries = tensor_io_load(&dir.path().join("z.mi2v")).unwrap();
    let (name, t) = &entries[0];
    assert_eq!(name, "latent");
    assert_eq!(t.dims(), [2760, 128]);
    assert!(t.is_finite());
}

#[test]
fn injected_fault_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let out = mi2v(&["verify", "--inject-fault", "dual-form", "--out", "v.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("dual_form"), "{text}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("v.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn unknown_subcommand_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mi2v(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"denoiser": {"layerz": 3}}"#).unwrap();
    let out = mi2v(&["params", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_attn_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = mi2v(
        &[
            "bench-attn", "--kind", "linear", "--strategy", "baseline", "--strategy", "all",
            "--lengths", "64,128", "--reps", "3", "--out", "lat.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("lat.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "kind,strategy,length,reps,median_ns,min_ns");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("linear,baseline,64,3,"));
}
