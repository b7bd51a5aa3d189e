use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_din");

fn bundled() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic.toml")
}

const TINY: &str = r#"
seed = 1
n_seeds = 2

[data.synth]
n_assets = 4
n_days = 700
mix = { trend = 1.0 }

[model]
variant = "OrigCIM:LSTM"
n_filters = 2
ts_filter_length = 3
hidden_layer_size = 8

[training]
learning_rate = 0.01
max_epochs = 3
patience = 3
sequence_length = 20
first_test_start = "2001-06-01"
step_years = 1

[evaluation]
rolling_window = 63
"#;

fn din(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run_root(out: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    assert_eq!(dirs.len(), 1, "expected one run directory");
    dirs.pop().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bundled_backtest_runs_end_to_end_and_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let o = din(&["backtest"], &bundled(), tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let root = run_root(tmp.path());
    let hash = root.file_name().unwrap().to_str().unwrap().to_string();
    let stamp = format!("# config_hash={hash}");
    for f in [
        "prices.csv",
        "result.csv",
        "report/metrics.txt",
        "report/table.csv",
        "report/cost_sweep.csv",
        "report/rolling.csv",
        "split_0/weights.csv",
    ] {
        let text = fs::read_to_string(root.join(f)).unwrap();
        assert!(text.starts_with(&stamp), "{f} lacks the config hash");
    }
    for f in ["manifest.json", "synth.json", "report/report.json", "split_0/manifest.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join(f)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash.as_str(), "{f}");
    }
    assert!(fs::read_to_string(root.join("report/rolling.svg")).unwrap().contains(&hash));

    let before = fs::read(root.join("report/table.csv")).unwrap();
    let mtime = fs::metadata(root.join("result.csv")).unwrap().modified().unwrap();
    let again = din(&["backtest"], &bundled(), tmp.path());
    assert!(again.status.success());
    assert_eq!(fs::read(root.join("report/table.csv")).unwrap(), before);
    assert_eq!(fs::metadata(root.join("result.csv")).unwrap().modified().unwrap(), mtime);
}

#[test]
fn missing_upstream_artifacts_name_the_producer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("runs");
    let o = din(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("din synth"), "{}", stderr(&o));
    let o = din(&["report"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("din train"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("runs");
    let bad = write_config(tmp.path(), "bad.toml", "[model]\nvariant = \"OrigCIM:GRU\"\n");
    assert_eq!(din(&["synth"], &bad, &out).status.code(), Some(2));
    let typo = write_config(tmp.path(), "typo.toml", "[training]\nmax_epoch = 3\n");
    assert_eq!(din(&["synth"], &typo, &out).status.code(), Some(2));
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let o = Command::new(BIN)
        .args(["synth", "--costs", "0,abc", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(din(&["interpret"], &cfg, &out).status.code(), Some(2));
}

#[test]
fn report_refuses_mixed_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("runs");
    assert!(din(&["synth"], &cfg, &out).status.success());
    assert!(din(&["train"], &cfg, &out).status.success());
    let root = run_root(&out);
    let w = root.join("split_0/weights.csv");
    let text = fs::read_to_string(&w).unwrap();
    let (_, rest) = text.split_once('\n').unwrap();
    fs::write(&w, format!("# config_hash=0000\n{rest}")).unwrap();
    let o = din(&["report"], &cfg, &out);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("hash mismatch"), "{}", stderr(&o));
    assert!(!root.join("report/report.json").exists());
}

#[test]
fn flags_change_the_run_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out = tmp.path().join("runs");
    assert!(din(&["synth"], &cfg, &out).status.success());
    let o = Command::new(BIN)
        .args(["synth", "--seed", "5", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 2);
}

#[test]
fn ingest_then_backtest_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let synth_out = tmp.path().join("synth");
    assert!(din(&["synth"], &cfg, &synth_out).status.success());
    let prices = run_root(&synth_out).join("prices.csv");
    let csv_cfg = write_config(
        tmp.path(),
        "csv.toml",
        &format!(
            "{TINY}\n[data]\nsource = \"csv\"\npath = {:?}\nasset_class = \"futures\"\n",
            prices.display().to_string()
        ),
    );
    let out = tmp.path().join("runs");
    assert_eq!(din(&["synth"], &csv_cfg, &out).status.code(), Some(2));
    let o = din(&["backtest"], &csv_cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let root = run_root(&out);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(root.join("ingest.json")).unwrap()).unwrap();
    assert_eq!(m["assets"].as_array().unwrap().len(), 4);
    assert!(root.join("report/table.csv").is_file());
}

#[test]
fn interpret_exports_normalised_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let body = TINY
        .replace("OrigCIM:LSTM", "FlexCIM:TFT")
        .replace("n_filters = 2", "n_filters = 2\nn_filter_layers = 2");
    let cfg = write_config(tmp.path(), "flex.toml", &body);
    let out = tmp.path().join("runs");
    assert!(din(&["synth"], &cfg, &out).status.success());
    assert_eq!(din(&["interpret"], &cfg, &out).status.code(), Some(3));
    assert!(din(&["train"], &cfg, &out).status.success());
    let o = din(&["interpret"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_root(&out).join("interpret");
    for name in ["attention", "fe_vsn", "ps_vsn"] {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(dir.join(format!("{name}.csv")))
            .unwrap();
        let mut sums: std::collections::BTreeMap<String, f64> = Default::default();
        for rec in rdr.records() {
            let rec = rec.unwrap();
            *sums.entry(rec[0].to_string()).or_default() += rec[2].parse::<f64>().unwrap();
        }
        assert!(!sums.is_empty());
        assert!(sums.values().all(|s| (s - 1.0).abs() < 1e-6), "{name}");
        assert!(dir.join(format!("{name}.svg")).is_file());
    }
}

#[test]
fn tune_writes_trials() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{TINY}\n[tuner]\nmethod = \"rs\"\n");
    let cfg = write_config(tmp.path(), "tune.toml", &body);
    let out = tmp.path().join("runs");
    assert!(din(&["synth"], &cfg, &out).status.success());
    let o = din(&["tune"], &cfg, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_root(&out).join("tune.json")).unwrap()).unwrap();
    assert_eq!(v["splits"].as_array().unwrap().len(), 1);
    assert!(v["splits"][0]["result"]["trials"].as_array().unwrap().len() > 1);
}

#[test]
fn complexity_table_and_slopes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .arg("complexity")
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("OrigCIM") && text.contains("TFT  N_A=100"));
    let root = run_root(tmp.path());
    let fe = fs::read_to_string(root.join("complexity/fe.csv")).unwrap();
    assert_eq!(fe.lines().count(), 2 + 4 * 4);
}
