//! Command-line behavior: exit codes, file contracts, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_sysid")
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("sysid_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn sysid")
}

fn write_small_config(path: &Path, extra: &str) {
    let text = format!(
        r#"
[model]
n_x = 2
n_u = 2
n_y = 2

[train]
n_starts = 2
seed = 7

[train.adam]
iters = 60

[train.lbfgsb]
max_fun_evals = 120

[reg]
rho_theta = 1e-3
rho_x = 1e-3
{extra}
"#
    );
    fs::write(path, text).unwrap();
}

#[test]
fn generate_is_byte_identical_across_runs() {
    let dir = tmpdir("gen_det");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for (path, _) in [(&a, 0), (&b, 1)] {
        let out = run(&[
            "generate",
            "--kind",
            "order-reduction",
            "--seed",
            "1",
            "--n",
            "200",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn generate_default_order_reduction_shape() {
    let dir = tmpdir("gen_default");
    let csv = dir.join("d.csv");
    let out = run(&[
        "generate",
        "--kind",
        "order-reduction",
        "--seed",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "u1,u2,y1,y2");
    assert_eq!(lines.count(), 2000);
}

#[test]
fn invalid_generate_kind_exits_2() {
    let out = run(&["generate", "--kind", "nonsense", "--out", "/tmp/x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("possible values") || stderr.contains("invalid value"));
}

#[test]
fn corrupt_csv_exits_2_and_writes_no_model() {
    let dir = tmpdir("corrupt");
    let csv = dir.join("bad.csv");
    fs::write(&csv, "u1,u2,y1,y2\n1,2,3,4\nbroken,row,here,!\n").unwrap();
    let cfg = dir.join("cfg.toml");
    write_small_config(&cfg, "");
    let model = dir.join("m.json");
    let report = dir.join("r.json");
    let out = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
    assert!(!model.exists());
    assert!(!report.exists());
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tmpdir("badkey");
    let cfg = dir.join("cfg.toml");
    fs::write(
        &cfg,
        "[model]\nn_x = 2\nn_u = 1\nn_y = 1\nnot_a_field = 3\n",
    )
    .unwrap();
    let csv = dir.join("d.csv");
    fs::write(&csv, "u1,y1\n1,2\n3,4\n").unwrap();
    let out = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--model",
        dir.join("m.json").to_str().unwrap(),
        "--report",
        dir.join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

fn fit_small(dir: &Path, extra_cfg: &str) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let csv = dir.join("d.csv");
    let out = run(&[
        "generate",
        "--kind",
        "order-reduction",
        "--seed",
        "3",
        "--n",
        "250",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let cfg = dir.join("cfg.toml");
    write_small_config(&cfg, extra_cfg);
    let model = dir.join("m.json");
    let report = dir.join("r.json");
    let out = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    (csv, cfg, model, report)
}

#[test]
fn model_file_omits_d_without_feedthrough_and_round_trips() {
    let dir = tmpdir("model_file");
    let (csv, _, model, _) = fit_small(&dir, "");
    let text = fs::read_to_string(&model).unwrap();
    assert!(!text.contains("\"d\""), "feedthrough off must drop D");

    // eval on training data from the fitted state reproduces the report R2
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--x0-policy",
        "from-fit",
    ]);
    assert!(out.status.success(), "{out:?}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    let avg_line = stdout
        .lines()
        .find(|l| l.starts_with("average R2:"))
        .unwrap();
    let avg: f64 = avg_line.trim_start_matches("average R2:").trim().parse().unwrap();
    let report_avg = report["r2_train_avg"].as_f64().unwrap();
    assert!((avg - report_avg).abs() < 1e-4 + 1e-9 * report_avg.abs());
}

#[test]
fn eval_report_matches_fit_report_to_1e9() {
    let dir = tmpdir("consistency");
    let (csv, _, model, report) = fit_small(&dir, "");
    let eval_report = dir.join("e.json");
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--x0-policy",
        "from-fit",
        "--report",
        eval_report.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let fitr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let evalr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&eval_report).unwrap()).unwrap();
    let a = fitr["r2_train"].as_array().unwrap();
    let b = evalr["r2_per_output"].as_array().unwrap();
    for (x, y) in a.iter().zip(b) {
        assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-9);
    }
}

#[test]
fn eval_horizon_emits_requested_rows() {
    let dir = tmpdir("horizon");
    let (csv, _, model, _) = fit_small(&dir, "");
    let table = dir.join("h.tsv");
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--x0-policy",
        "from-fit",
        "--horizon",
        "10",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = fs::read_to_string(&table).unwrap();
    // header plus one row per horizon step
    assert_eq!(text.lines().count(), 11);
}

#[test]
fn channel_mismatch_exits_2() {
    let dir = tmpdir("mismatch");
    let (_, _, model, _) = fit_small(&dir, "");
    let other = dir.join("one_col.csv");
    fs::write(&other, "u1,y1\n1,2\n3,4\n").unwrap();
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        other.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{out:?}");
}

#[test]
fn single_point_sweep_matches_fit() {
    let dir = tmpdir("sweep_one");
    let (csv, cfg, _, report) = fit_small(
        &dir,
        "tau = 0.01\n",
    );
    let table = dir.join("s.tsv");
    let out = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--param",
        "tau",
        "--grid",
        "0.01",
        "--out",
        table.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{out:?}");
    let text = fs::read_to_string(&table).unwrap();
    let row = text.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split('\t').collect();
    let sweep_r2: f64 = fields[1].parse().unwrap();
    let fitr: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let fit_r2 = fitr["r2_train_avg"].as_f64().unwrap();
    assert!(
        (sweep_r2 - fit_r2).abs() < 1e-12,
        "sweep {sweep_r2} vs fit {fit_r2}"
    );
}

#[test]
fn fit_reports_are_byte_identical_without_timings() {
    let dir = tmpdir("repro");
    let csv = dir.join("d.csv");
    let out = run(&[
        "generate",
        "--kind",
        "order-reduction",
        "--seed",
        "5",
        "--n",
        "300",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let cfg = dir.join("cfg.toml");
    write_small_config(&cfg, "\n[report]\ninclude_timings = false\n");
    let mut blobs = Vec::new();
    for tag in ["a", "b"] {
        let model = dir.join(format!("m_{tag}.json"));
        let report = dir.join(format!("r_{tag}.json"));
        let out = run(&[
            "fit",
            "--config",
            cfg.to_str().unwrap(),
            "--data",
            csv.to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--report",
            report.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{out:?}");
        blobs.push((fs::read(&model).unwrap(), fs::read(&report).unwrap()));
    }
    assert_eq!(blobs[0].0, blobs[1].0, "model files differ");
    assert_eq!(blobs[0].1, blobs[1].1, "report files differ");
}
