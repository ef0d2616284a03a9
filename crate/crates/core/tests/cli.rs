use mimo_resample::harness::{main_cli, RESULTS_HEADER, THEOREM1_HEADER};

fn run(args: &[&str]) -> i32 {
    main_cli(std::iter::once("mimo-resample").chain(args.iter().copied()))
}

#[test]
fn usage_and_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&["sweep", "--config", "/nonexistent/c.json", "--out", out]), 2);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    assert_eq!(run(&["sweep", "--config", bad.to_str().unwrap(), "--out", out]), 2);
    std::fs::write(&bad, r#"{"snr_grid": [10, 5]}"#).unwrap();
    assert_eq!(run(&["sweep", "--config", bad.to_str().unwrap(), "--out", out]), 2);
    assert_eq!(run(&["theorem1-check", "--m", "3", "--rho", "-0.7", "--out", out]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn missing_model_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"n_rx": 2, "n_tx": 2, "order": 4, "detectors": ["neural:/nonexistent/model.json"]}"#).unwrap();
    let out = tmp.path().join("o");
    assert_eq!(run(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 1);
}

#[test]
fn theorem1_check_reports_reference_operating_point() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let code = run(&["theorem1-check", "--m", "2", "--rho", "0.71", "--sigma2", "0.385", "--draws", "200000", "--out", out]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(tmp.path().join("theorem1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(THEOREM1_HEADER));
    let fields: Vec<f64> = lines.next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    assert!((fields[2] - 0.329).abs() < 5e-4);
    assert!((fields[3] - 0.329).abs() < 0.005);
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("config.echo.json")).unwrap()).unwrap();
    assert_eq!(echo["theorem1"]["sigma2"], 0.385);
}

#[test]
fn flags_override_config_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(&cfg, r#"{"n_rx": 2, "n_tx": 2, "order": 4, "seed": 3, "snr_grid": [8], "detectors": ["lmmse"], "transform_sets": [["identity"]]}"#).unwrap();
    let out = tmp.path().join("o");
    let code = run(&["sweep", "--config", cfg.to_str().unwrap(), "--seed", "11", "--trials", "50", "--threads", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert!(csv.starts_with(RESULTS_HEADER));
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[1], row[3], row[9]), ("lmmse", "50", "11"));
}
