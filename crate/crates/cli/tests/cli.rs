use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cotn::activation::{build_table, MetaActivationTable};

const SMALL: &[&str] = &[
    "--set", "window.enc_len=24",
    "--set", "window.horizon=8",
    "--set", "window.stride=8",
    "--set", "model.d_model=8",
    "--set", "model.n_heads=2",
    "--set", "model.d_ff=16",
    "--set", "train.epochs=2",
    "--set", "data.synthetic_len=600",
];

fn cotn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = cotn(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn kv(line: &str, key: &str) -> f64 {
    line.split_whitespace()
        .find_map(|f| f.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {line}"))
        .parse()
        .unwrap()
}

#[test]
fn bad_type_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(cotn(t.path(), &["bifurcate", "--type", "9"]).status.code(), Some(2));
    assert_eq!(cotn(t.path(), &["table", "--type", "0"]).status.code(), Some(2));
    assert_eq!(cotn(t.path(), &["bifurcate", "--type", "1", "--range", "1:-1"]).status.code(), Some(2));
    assert_eq!(cotn(t.path(), &["frobnicate"]).status.code(), Some(2));
    assert!(!t.path().join("out").exists());
}

#[test]
fn bifurcation_rows_and_band() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["bifurcate", "--type", "1", "--range", "-1:1", "--n", "401"]);
    let text = fs::read_to_string(t.path().join("out/bifurcation_type1.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,lors"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (x, v) = l.split_once(',').unwrap();
            (x.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 401 * 100);
    let spread = |x0: f64| {
        let vals: Vec<f64> = rows.iter().filter(|(x, _)| (x - x0).abs() < 1e-12).map(|r| r.1).collect();
        assert_eq!(vals.len(), 100);
        vals.iter().copied().fold(f64::MIN, f64::max) - vals.iter().copied().fold(f64::MAX, f64::min)
    };
    assert!(spread(0.05) > 0.01);
    assert!(spread(0.8) < 1e-3);
}

#[test]
fn table_export_round_trips() {
    let t = tempfile::tempdir().unwrap();
    for ty in 1..=8u8 {
        ok(t.path(), &["table", "--type", &ty.to_string()]);
        let path = t.path().join(format!("out/table_type{ty}.csv"));
        let text = fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
        assert_eq!(rows.len(), 4001);
        let back = MetaActivationTable::read_from(text.as_bytes()).unwrap();
        assert_eq!(back, build_table(ty, -4.0, 4.0, 4001).unwrap());
        assert_eq!(rows[2000], "0.0000000000000000e0,0.0000000000000000e0");
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, text.as_bytes());
    }
}

#[test]
fn unknown_or_invalid_config_keys_exit_2() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("bad.toml"), "[train]\nepochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = cotn(t.path(), &["train", "--config", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let o = cotn(t.path(), &["train", "--set", "model.activation=gated:12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.activation"));
    assert_eq!(cotn(t.path(), &["train", "--config", "missing.toml"]).status.code(), Some(1));
    let o = cotn(t.path(), &["train", "--set", "data.path=\"nope.csv\""]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_forecast_are_consistent() {
    let t = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "3"];
    args.extend_from_slice(SMALL);
    let report = ok(t.path(), &args);
    for f in ["run.toml", "norm_stats.txt", "cleaning_report.txt", "report.txt", "history.csv", "checkpoint"] {
        assert!(t.path().join("out").join(f).exists(), "{f}");
    }
    let eval = ok(t.path(), &["eval", "--run", "out", "--out", "ev"]);
    let test = eval.lines().find(|l| l.starts_with("split=test")).unwrap();
    assert!((kv(test, "mae") - kv(&report, "test_mae")).abs() <= 1e-12);
    assert!((kv(test, "mse") - kv(&report, "test_mse")).abs() <= 1e-12);
    let val = eval.lines().find(|l| l.starts_with("split=val")).unwrap();
    assert!((kv(val, "mae") - kv(&report, "val_mae")).abs() <= 1e-12);

    ok(t.path(), &["forecast", "--run", "out", "--out", "fc"]);
    let fc = fs::read_to_string(t.path().join("fc/forecast.csv")).unwrap();
    let lines: Vec<&str> = fc.lines().collect();
    assert_eq!(lines[0], "step,timestamp,forecast");
    assert_eq!(lines.len(), 1 + 8);

    // same seed, same report
    let again = ok(t.path(), &[&args[..], &["--out", "again"]].concat());
    let strip = |s: &str| s.split_whitespace().filter(|f| !f.starts_with("wall_time")).collect::<Vec<_>>().join(" ");
    assert_eq!(strip(&report), strip(&again));
}

#[test]
fn sweep_lists_eight_sorted_types() {
    let t = tempfile::tempdir().unwrap();
    let mut args = vec!["sweep-types", "--set", "train.epochs=1"];
    args.extend_from_slice(SMALL);
    ok(t.path(), &args);
    let text = fs::read_to_string(t.path().join("out/sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    let maes: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(maes.windows(2).all(|w| w[0] <= w[1]));
    let mut types: Vec<u8> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    types.sort();
    assert_eq!(types, (1..=8).collect::<Vec<_>>());
}

#[test]
fn anomaly_scores_every_window_step() {
    let t = tempfile::tempdir().unwrap();
    let mut args = vec!["anomaly", "--set", "anomaly.epochs=5"];
    args.extend_from_slice(SMALL);
    let out = ok(t.path(), &args);
    let n = kv(&out, "windows") as usize;
    let text = fs::read_to_string(t.path().join("out/anomaly.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("split,window,start,step,timestamp,error,weight"));
    assert_eq!(text.lines().count(), 1 + n * 24);
    // a saved autoencoder reproduces the scores
    let reused = ok(t.path(), &[&args[..], &["--ae", "out/ae", "--out", "second"]].concat());
    assert_eq!(out, reused);
    assert_eq!(text, fs::read_to_string(t.path().join("second/anomaly.csv")).unwrap());
}

#[test]
fn synthetic_csv_feeds_training() {
    let t = tempfile::tempdir().unwrap();
    ok(t.path(), &["synth", "--len", "600", "--out", "data"]);
    let mut args = vec!["train", "--set", "data.path=\"data/synthetic.csv\""];
    args.extend_from_slice(SMALL);
    let from_file = ok(t.path(), &args);
    let mut args = vec!["train", "--out", "direct"];
    args.extend_from_slice(SMALL);
    let direct = ok(t.path(), &args);
    assert_eq!(kv(&from_file, "test_mae"), kv(&direct, "test_mae"));
}
