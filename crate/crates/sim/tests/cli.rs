use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
n_eval_samples = 100
slots_per_block = 20

[optimizer]
iterations = 5
trace_every = 2
trace_samples = 20

[sweep]
axis = "pilots"
values = [2.0, 4.0]
"#;

fn rcshp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rcshp")).args(args).output().unwrap()
}

fn run_small(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    rcshp(&args)
}

#[test]
fn run_writes_results_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run_small(&config, out, &["--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = fs::read_to_string(a.join("results.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("results.csv")).unwrap());
    let mut lines = csv.lines();
    assert!(lines
        .next()
        .unwrap()
        .starts_with("sweep_axis,sweep_value,scheme,seed,utility,sum_rate,ee,user_rate_0"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 4);
    assert!(rows[0].starts_with("pilots,2,rcshp,5,"));

    let json: serde_json::Value = serde_json::from_slice(&fs::read(a.join("results.json")).unwrap()).unwrap();
    assert_eq!(json["config_hash"].as_str().unwrap().len(), 64);
    assert!(json["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(!csv.contains("wall_time"));

    let trace = fs::read_to_string(a.join("traces").join("trace_pilots_4_rcshp.csv")).unwrap();
    assert!(trace.starts_with("iter,surrogate_utility,mc_utility,step_norm_gamma,step_norm_q\n1,"));
    assert_eq!(trace.lines().count(), 6);
}

#[test]
fn scheme_and_sweep_flags_narrow_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL.replace("[2.0, 4.0]", "[2.0]")).unwrap();
    let out = dir.path().join("out");
    let o = run_small(&config, &out, &["--scheme", "rzf", "--sweep", "snr"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 7);
    assert!(rows
        .iter()
        .all(|r| r.starts_with("snr,") && r.contains(",rzf_equal_power,")));
    assert!(!out.join("traces").join("trace_snr_0_rzf_equal_power.csv").exists());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[dims]\nantennas = 2\nrf_chains = 4\n").unwrap();
    let o = run_small(&config, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rf_chains"));
}

#[test]
fn convergence_and_reference_config() {
    let o = rcshp(&["convergence", "--iterations", "4"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(4).unwrap().starts_with("4,"));

    let o = rcshp(&["reference-config", "--profile", "paper"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("antennas = 64"));
}

#[test]
fn gradcheck_passes() {
    let o = rcshp(&["gradcheck", "--instances", "8"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).trim_end().ends_with("PASS"));
}
