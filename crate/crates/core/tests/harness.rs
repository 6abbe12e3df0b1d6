use std::fs;
use std::path::Path;

use csd_core::distill::{Coupling, DistillConfig, LrDecay};
use csd_core::harness::metrics::read_metrics_csv;
use csd_core::harness::{self, emit_plotdata, exit_code, parse_config, run, run_file, ExperimentConfig};
use csd_core::kernel::KernelSpec;
use csd_core::schedule::NoiseSharing;
use csd_core::toy;
use csd_core::CsdError;
use proptest::prelude::*;
use serde_json::{json, Value};

fn svgd_config() -> Value {
    json!({
        "mode": "svgd",
        "seed": 11,
        "oracle": {"mixture": {"weights": [1.0], "means": [[0.0, 0.0]], "variances": [[1.0, 1.0]]}},
        "distill": {"eta": 0.3, "steps": 500},
        "svgd": {"particles": 64, "init_mean": [5.0, 5.0]}
    })
}

fn canvas_config() -> Value {
    let distill = DistillConfig {
        eta: 0.1,
        steps: 40,
        kernel: KernelSpec::fixed(1000.0),
        noise_sharing: NoiseSharing::PerParticle,
        lr_decay: LrDecay { every: 20, factor: 0.5 },
        coupling: Coupling::Svgd,
        ..DistillConfig::default()
    };
    json!({
        "mode": "edit-canvas",
        "seed": 2,
        "oracle": {"edit": serde_json::to_value(toy::bimodal_oracle(16, 3.0)).unwrap()},
        "distill": serde_json::to_value(distill).unwrap(),
        "canvas": {
            "source": {"generated": {"height": 4, "width": 10, "channels": 1, "std": 0.5}},
            "patch_size": 4, "stride": 2, "batch_size": 2,
            "condition": {"kind": "image_text", "source_ref": "src", "text_ref": "edit"}
        }
    })
}

fn frames_config() -> Value {
    let mut v = canvas_config();
    let obj = v.as_object_mut().unwrap();
    obj.remove("canvas");
    obj.insert("mode".into(), json!("edit-frames"));
    obj.insert(
        "frames".into(),
        json!({
            "source": {"generated": {"count": 5, "canvas": {"height": 4, "width": 4, "channels": 1, "std": 0.5}}},
            "batch_size": 3,
            "conditions": [{"kind": "image_text", "source_ref": "src", "text_ref": "edit"}]
        }),
    );
    v
}

fn generate_config() -> Value {
    json!({
        "mode": "generate",
        "seed": 4,
        "oracle": {"mixture": {"weights": [0.5, 0.5], "means": [[-2.0, 0.0], [2.0, 0.0]], "variances": [[0.5, 0.5], [0.5, 0.5]]}},
        "distill": {"eta": 0.05, "steps": 50},
        "generate": {"particles": 6, "param_dim": 2}
    })
}

fn parse_and_validate(text: &str) -> Result<ExperimentConfig, CsdError> {
    let cfg = parse_config(text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_at(value: &Value, dir: &Path) -> ExperimentConfig {
    let mut cfg = parse_config(&value.to_string()).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn svgd_run_lands_in_acceptance_band() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run(&config_at(&svgd_config(), dir.path())).unwrap();
    assert_eq!(summary.steps, 500);
    let table = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    let dist = table.column("mean_pairwise_distance").unwrap();
    let last = dist.last().unwrap().unwrap();
    // Two independent draws from a 2-D unit Gaussian are sqrt(pi) apart on
    // average; SVGD with 64 particles slightly under-disperses.
    let expected = std::f64::consts::PI.sqrt();
    assert!((last - expected).abs() < 0.35, "{last}");
    let stein = table.column("stein_residual").unwrap();
    assert!(stein.iter().all(|s| s.is_some_and(f64::is_finite)));
    for name in ["metrics.csv", "timing.csv", "manifest.json", "particles.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config_sha256"], summary.config_hash);
}

#[test]
fn plotdata_tail_of_svgd_run_is_decreasing() {
    let dir = tempfile::tempdir().unwrap();
    run(&config_at(&svgd_config(), dir.path())).unwrap();
    let plot = dir.path().join("plot");
    let files = emit_plotdata(&dir.path().join("metrics.csv"), &plot).unwrap();
    assert!(files.iter().any(|f| f.ends_with("mean_grad_norm.dat")));
    let text = fs::read_to_string(plot.join("mean_grad_norm.dat")).unwrap();
    let series: Vec<f64> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(series.len(), 500);
    let window = 50;
    let smoothed: Vec<f64> = series.chunks(window).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for pair in smoothed[smoothed.len() / 2..].windows(2) {
        assert!(pair[1] <= pair[0], "{smoothed:?}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    for value in [svgd_config(), canvas_config(), frames_config(), generate_config()] {
        let dir = tempfile::tempdir().unwrap();
        let mut outputs = Vec::new();
        for (k, threads) in [None, Some(1), Some(3)].into_iter().enumerate() {
            let cfg = config_at(&value, &dir.path().join(k.to_string()));
            harness::with_threads(threads, || run(&cfg)).unwrap().unwrap();
            outputs.push(fs::read(cfg.output_dir.join("metrics.csv")).unwrap());
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[1], outputs[2]);
    }
}

#[test]
fn every_mode_writes_its_artifacts() {
    let cases = [
        (canvas_config(), vec!["canvas_source.bin", "canvas_final.bin", "visits.csv"]),
        (frames_config(), vec!["frame_000.bin", "frame_004.bin"]),
        (generate_config(), vec!["particles.csv", "rendered.csv"]),
    ];
    for (value, expected) in cases {
        let dir = tempfile::tempdir().unwrap();
        let summary = run(&config_at(&value, dir.path())).unwrap();
        for name in expected {
            assert!(summary.files.iter().any(|f| f == name), "{name} missing from {:?}", summary.files);
            assert!(dir.path().join(name).exists());
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let table_dir = dir.path().join("canvas");
    run(&config_at(&canvas_config(), &table_dir)).unwrap();
    let seams = read_metrics_csv(&table_dir.join("metrics.csv")).unwrap().column("seam_discrepancy").unwrap();
    assert!(seams.iter().all(|s| s.is_some_and(f64::is_finite)));
}

#[test]
fn check_mode_passes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_at(&json!({"mode": "check", "seed": 0}), dir.path());
    let summary = run(&cfg).unwrap();
    assert_eq!(summary.checks_failed, 0);
    assert!(dir.path().join("check.csv").exists());
}

#[test]
fn run_file_applies_overrides_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let canvas = csd_core::canvas::Canvas::new(4, 6, 1, (0..24).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap();
    canvas.write_binary(&dir.path().join("source.bin")).unwrap();
    let mut value = canvas_config();
    value["canvas"]["source"] = json!({"file": "source.bin"});
    let path = dir.path().join("config.json");
    fs::write(&path, value.to_string()).unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_file(&path, None, Some(&out_a)).unwrap();
    run_file(&path, Some(99), Some(&out_b)).unwrap();
    let source = csd_core::canvas::Canvas::read_binary(&out_a.join("canvas_source.bin")).unwrap();
    assert_eq!(source, canvas);
    assert_ne!(fs::read(out_a.join("metrics.csv")).unwrap(), fs::read(out_b.join("metrics.csv")).unwrap());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 99);
}

#[test]
fn numeric_blowup_exits_with_code_three() {
    let mut value = generate_config();
    value["distill"]["eta"] = json!(1e300);
    value["distill"]["steps"] = json!(20);
    let dir = tempfile::tempdir().unwrap();
    let err = run(&config_at(&value, dir.path())).unwrap_err();
    assert!(matches!(err, CsdError::NumericAbort { .. }), "{err}");
    assert_eq!(exit_code(&err), 3);
}

fn set_pointer(value: &mut Value, pointer: &str, new: Value) {
    *value.pointer_mut(pointer).unwrap_or_else(|| panic!("{pointer}")) = new;
}

/// (config, JSON pointer, invalid value, text the diagnostic must mention)
fn invalid_cases() -> Vec<(Value, &'static str, Value, &'static str)> {
    vec![
        (svgd_config(), "/distill/eta", json!(-1.0), "eta"),
        (svgd_config(), "/distill/eta", json!(0.0), "eta"),
        (svgd_config(), "/svgd/particles", json!(0), "particles"),
        (svgd_config(), "/svgd/init_mean", json!([1.0, 2.0, 3.0]), "init_mean"),
        (svgd_config(), "/svgd/init_mean", json!([]), "init_mean"),
        (svgd_config(), "/oracle/mixture/weights", json!([0.3]), "weights"),
        (svgd_config(), "/oracle/mixture/variances", json!([[1.0, -1.0]]), "variances"),
        (svgd_config(), "/oracle/mixture/variances", json!([[1.0, 0.0]]), "variances"),
        (svgd_config(), "/mode", json!("paint"), "mode"),
        (svgd_config(), "/seed", json!(-4), "seed"),
        (canvas_config(), "/canvas/stride", json!(0), "stride"),
        (canvas_config(), "/canvas/stride", json!(5), "stride"),
        (canvas_config(), "/canvas/patch_size", json!(11), "patch_size"),
        (canvas_config(), "/canvas/batch_size", json!(0), "batch_size"),
        (canvas_config(), "/canvas/batch_size", json!(100), "batch_size"),
        (canvas_config(), "/canvas/condition/text_ref", json!("missing"), "condition"),
        (canvas_config(), "/distill/schedule/t_min", json!(-0.1), "t_min"),
        (canvas_config(), "/distill/schedule/t_min", json!(1.0), "t_min"),
        (canvas_config(), "/distill/schedule/t_max", json!(1.5), "t_max"),
        (canvas_config(), "/distill/schedule/t_max", json!(0.1), "t_max"),
        (canvas_config(), "/distill/guidance/omega_y", json!(-2.0), "omega_y"),
        (canvas_config(), "/distill/lr_decay/factor", json!(0.0), "factor"),
        (canvas_config(), "/distill/lr_decay/every", json!(0), "every"),
        (canvas_config(), "/distill/steps", json!("many"), "steps"),
        (frames_config(), "/frames/batch_size", json!(6), "batch_size"),
        (frames_config(), "/frames/conditions", json!([]), "conditions"),
        (generate_config(), "/generate/param_dim", json!(3), "dimension"),
    ]
}

#[test]
fn invalid_configs_are_rejected_with_field_paths() {
    for (mut value, pointer, bad, needle) in invalid_cases() {
        set_pointer(&mut value, pointer, bad.clone());
        let err = parse_and_validate(&value.to_string()).unwrap_err();
        assert_eq!(exit_code(&err), 2, "{pointer} = {bad}: {err}");
        assert!(err.to_string().contains(needle), "{pointer} = {bad}: {err}");
    }
}

#[test]
fn unknown_keys_are_errors() {
    for pointer in ["", "/distill", "/svgd", "/oracle/mixture", "/distill/schedule"] {
        let mut value = svgd_config();
        if pointer == "/distill/schedule" {
            value["distill"]["schedule"] = json!({"t_min": 0.02, "t_max": 0.98});
        }
        value.pointer_mut(pointer).unwrap().as_object_mut().unwrap().insert("surprise".into(), json!(1));
        let err = parse_config(&value.to_string()).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("surprise"), "{err}");
    }
}

#[test]
fn config_hash_ignores_output_dir_only() {
    let a = config_at(&svgd_config(), Path::new("x"));
    let b = config_at(&svgd_config(), Path::new("y"));
    assert_eq!(a.hash(), b.hash());
    let mut value = svgd_config();
    value["seed"] = json!(12);
    assert_ne!(config_at(&value, Path::new("x")).hash(), a.hash());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fuzzed_invalid_values_never_validate(
        case in 0usize..25,
        scale in prop_oneof![Just(f64::NAN), Just(f64::INFINITY), -1e6..-1e-9f64],
    ) {
        // Every numeric field below must be finite and positive.
        let fields = [
            (svgd_config(), "/distill/eta"),
            (svgd_config(), "/svgd/init_std"),
            (svgd_config(), "/oracle/mixture/variances/0/1"),
            (canvas_config(), "/distill/lr_decay/factor"),
            (canvas_config(), "/distill/schedule/t_min"),
            (canvas_config(), "/distill/guidance/omega_s"),
            (canvas_config(), "/canvas/source/generated/std"),
            (generate_config(), "/generate/init_std"),
        ];
        let (mut value, pointer) = fields[case % fields.len()].clone();
        if pointer == "/svgd/init_std" {
            value["svgd"]["init_std"] = json!(1.0);
        }
        if pointer == "/distill/lr_decay/factor" {
            value["distill"]["lr_decay"] = json!({"every": 10, "factor": 1.0});
        }
        if pointer == "/generate/init_std" {
            value["generate"]["init_std"] = json!(1.0);
        }
        // Non-finite numbers are not valid JSON, so they are spliced in as text.
        let text = if scale.is_finite() {
            set_pointer(&mut value, pointer, json!(scale));
            value.to_string()
        } else {
            set_pointer(&mut value, pointer, json!("PLACEHOLDER"));
            value.to_string().replace("\"PLACEHOLDER\"", if scale.is_nan() { "NaN" } else { "1e999" })
        };
        let err = parse_and_validate(&text);
        prop_assert!(err.is_err(), "{pointer} = {scale} accepted");
        prop_assert_eq!(exit_code(&err.unwrap_err()), 2);
    }

    #[test]
    fn truncated_config_text_is_rejected(cut in 1usize..200) {
        let text = svgd_config().to_string();
        let cut = cut.min(text.len() - 1);
        let err = parse_config(&text[..cut]).unwrap_err();
        prop_assert_eq!(exit_code(&err), 2);
    }
}

#[test]
fn sample_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        if name.starts_with("oracle-") {
            let text = fs::read_to_string(&path).unwrap();
            let section: harness::config::OracleSection = serde_json::from_str(&text).unwrap();
            section.edit_oracle().unwrap().validate().unwrap();
        } else {
            harness::load_config(&path).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        seen += 1;
    }
    assert!(seen >= 5);
}
