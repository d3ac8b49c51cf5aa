use std::path::Path;
use std::process::{Command, Output};

use sobolev_core::mls::JetField;

fn sobolev(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sobolev"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
}

fn assert_exit(o: &Output, expected: i32) {
    assert_eq!(code(o), expected, "stdout: {}\nstderr: {}", stdout(o), stderr(o));
    assert!(!stderr(o).contains("panicked"), "{}", stderr(o));
    assert!(stderr(o).starts_with("error: "));
}

/// Columns of a headed numeric CSV, keyed by header name.
fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rd = csv::Reader::from_path(path).unwrap();
    let header = rd.headers().unwrap().iter().map(str::to_string).collect();
    let rows = rd.records().map(|r| r.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (h, rows) = table(path);
    let i = h.iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name} in {h:?}"));
    rows.into_iter().map(|r| r[i].clone()).collect()
}

fn floats(v: Vec<String>) -> Vec<f64> {
    v.iter().map(|s| s.parse().unwrap()).collect()
}

fn grid_csv(dir: &Path) -> std::path::PathBuf {
    let mut s = String::from("x1,x2,u\n");
    for i in 0..5 {
        for j in 0..5 {
            let (x, y) = (i as f64 * 0.25, j as f64 * 0.25);
            s.push_str(&format!("{x},{y},{}\n", x + y));
        }
    }
    let p = dir.join("grid.csv");
    std::fs::write(&p, s).unwrap();
    p
}

#[test]
fn derivs_on_a_linear_grid() {
    let dir = tempfile::tempdir().unwrap();
    let input = grid_csv(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = sobolev(out, &["derivs", input.to_str().unwrap(), "--k", "6", "--m", "1"]);
        assert_ok(&o);
    }
    let jets = a.join("jets.csv");
    let (header, _) = table(&jets);
    let firsts: Vec<&String> = header.iter().filter(|h| h.starts_with("c_") && h.matches('1').count() == 1 && !h.contains('2')).collect();
    assert_eq!(firsts.len(), 2, "{header:?}");
    for h in firsts {
        assert!(floats(column(&jets, h)).iter().all(|&d| (d - 1.0).abs() < 1e-10));
    }
    assert_eq!(std::fs::read(&jets).unwrap(), std::fs::read(b.join("jets.csv")).unwrap());
    // the table round-trips through the reader and writer
    let bytes = std::fs::read(&jets).unwrap();
    let field: JetField<f64> = JetField::read_csv(bytes.as_slice()).unwrap();
    let mut again = Vec::new();
    field.write_csv(&mut again).unwrap();
    assert_eq!(again, bytes);
    assert!(a.join("manifest.json").exists());
}

#[test]
fn derivs_error_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = grid_csv(dir.path());
    let out = dir.path().join("out");
    let o = sobolev(&out, &["derivs", input.to_str().unwrap(), "--k", "3", "--m", "2"]);
    assert_exit(&o, 3);
    assert!(stderr(&o).contains("K >= I"));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,x2,u\n0,0,1\n0.5,oops,2\n").unwrap();
    assert_exit(&sobolev(&out, &["derivs", bad.to_str().unwrap()]), 2);

    let dup = dir.path().join("dup.csv");
    std::fs::write(&dup, "x1,u\n0,1\n0.5,2\n0,3\n").unwrap();
    assert_exit(&sobolev(&out, &["derivs", dup.to_str().unwrap()]), 2);

    assert_exit(&sobolev(&out, &["derivs", dir.path().join("missing.csv").to_str().unwrap()]), 1);
    assert_exit(&sobolev(&out, &["derivs"]), 3);
}

#[test]
fn rates_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("poly");
    assert_ok(&sobolev(&out, &["rates", "--function", "poly", "--resolutions", "100,200,400", "--m", "2", "--k", "12"]));
    let rates = out.join("rates.csv");
    assert!(floats(column(&rates, "mse")).iter().all(|&e| e < 1e-10));
    let slopes = column(&rates, "slope_running");
    assert!(slopes.iter().all(|s| s == "exact"), "{slopes:?}");
    let svg = std::fs::read_to_string(out.join("rates.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));

    let out = dir.path().join("sincos");
    let o = sobolev(&out, &["rates", "--resolutions", "300,1000,3000"]);
    assert_ok(&o);
    let rates = out.join("rates.csv");
    let orders = column(&rates, "order");
    let slopes = column(&rates, "slope_running");
    let last_first_order = orders.iter().rposition(|o| o == "1").unwrap();
    assert!(slopes[last_first_order].parse::<f64>().unwrap() > 0.0);
    assert!(stdout(&o).contains("order 1: slope"));

    assert_exit(&sobolev(&dir.path().join("x"), &["rates"]), 3);
}

#[test]
fn flow_examples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("zero");
    assert_ok(&sobolev(&out, &["flow", "--theta0", "0", "--ratio0", "1", "--T", "2"]));
    for f in ["trajectory_l2.csv", "trajectory_sob.csv"] {
        assert!(floats(column(&out.join(f), "dist2")).iter().all(|&d| d < 1e-24));
    }

    let out = dir.path().join("outside");
    let o = sobolev(&out, &["flow", "--theta0", "1.0", "--ratio0", "1.2"]);
    assert_exit(&o, 3);
    assert!(stderr(&o).contains("--allow-outside"));
    assert_ok(&sobolev(&out, &["flow", "--theta0", "1.0", "--ratio0", "1.2", "--allow-outside", "--T", "20"]));
    let l2 = floats(column(&out.join("trajectory_l2.csv"), "dist2"));
    let sob = floats(column(&out.join("trajectory_sob.csv"), "dist2"));
    assert_eq!(l2.len(), sob.len());
    assert!(sob.iter().zip(&l2).all(|(s, l)| *s <= l + 1e-12));
    let svg = std::fs::read_to_string(out.join("distance.svg")).unwrap();
    assert_eq!(svg.matches("class=\"series\"").count(), 2);

    let out = dir.path().join("t0");
    assert_ok(&sobolev(&out, &["flow", "--T", "0", "--mode", "l2"]));
    assert_eq!(table(&out.join("trajectory_l2.csv")).1.len(), 1);
    assert!(!out.join("trajectory_sob.csv").exists());

    assert_exit(&sobolev(&dir.path().join("big"), &["flow", "--theta0", "0.5", "--dt", "50", "--T", "200"]), 4);
    assert_exit(&sobolev(&dir.path().join("m"), &["flow", "--mode", "sideways"]), 3);
}

#[test]
fn landscape_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("land");
    let o = sobolev(&out, &["landscape", "--theta-steps", "32", "--x-steps", "32"]);
    assert_ok(&o);
    let path = out.join("landscape.csv");
    let flags = column(&path, "defined_flag");
    let l2 = column(&path, "V_L2");
    let sob = column(&path, "V_Sob");
    let mut undefined = 0;
    for i in 0..flags.len() {
        if flags[i] == "0" {
            undefined += 1;
            assert!(l2[i].is_empty());
            continue;
        }
        assert!(sob[i].parse::<f64>().unwrap() <= l2[i].parse::<f64>().unwrap() + 1e-12);
    }
    assert!(undefined > 0);
    assert!(stdout(&o).contains("cells with V_Sob > V_L2: 0"));

    let h = out.join("h_curve.csv");
    let thetas = floats(column(&h, "theta"));
    let hs = column(&h, "h");
    let defined = column(&h, "defined_flag");
    assert!(defined.iter().any(|d| d == "0"));
    for i in 0..thetas.len() {
        if defined[i] == "1" && thetas[i] < 3.0 {
            let v: f64 = hs[i].parse().unwrap();
            assert!(v >= -1e-10);
            assert_eq!(v.abs() < 1e-12, thetas[i] == 0.0, "theta {}", thetas[i]);
        }
    }
    for f in ["v_l2.svg", "v_sob.svg", "h_curve.svg"] {
        assert!(out.join(f).exists());
    }
    assert_exit(&sobolev(&out, &["landscape", "--theta-steps", "1"]), 3);
}

#[test]
fn train_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("zero");
    let o = sobolev(&out, &["train", "--mode", "ordinary", "--epochs", "0"]);
    assert_ok(&o);
    assert!(stdout(&o).contains("final test relative L2 error"));
    assert_eq!(table(&out.join("losses.csv")).1.len(), 1);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 0);

    for mode in ["sobolev", "sobolev+pcgrad"] {
        let out = dir.path().join(mode.replace('+', "_"));
        assert_ok(&sobolev(&out, &["train", "--mode", mode, "--epochs", "3", "--seed", "2"]));
        let losses = out.join("losses.csv");
        assert_eq!(table(&losses).1.len(), 4);
        assert!(column(&losses, "der").iter().all(|d| !d.is_empty()));
    }

    let out = dir.path().join("nan");
    assert_exit(&sobolev(&out, &["train", "--optimizer", "gd", "--lr", "1e6", "--epochs", "20"]), 4);
    assert_exit(&sobolev(&out, &["train", "--task", "heat"]), 3);
    assert_exit(&sobolev(&out, &["train", "--mode", "sobolev", "--derivs", "none"]), 3);
}

#[test]
fn sweep_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let small = ["--epochs", "2", "--seeds", "2", "--samples", "4", "--val", "2", "--test", "2"];
    let mut args = vec!["sweep", "--param", "m", "--values", "1,2,3,4"];
    args.extend(small);
    assert_ok(&sobolev(&out, &args));
    assert_eq!(table(&out.join("sweep_median.csv")).1.len(), 4);
    assert_eq!(table(&out.join("sweep.csv")).1.len(), 4 * 2 * 2);

    let out = dir.path().join("noise");
    let mut args = vec!["sweep", "--param", "noise", "--values", "0,0.015,0.03", "--modes", "ordinary,sobolev,sobolev+pcgrad"];
    args.extend(small);
    assert_ok(&sobolev(&out, &args));
    let (header, rows) = table(&out.join("sweep_median.csv"));
    assert_eq!(rows.len(), 3);
    assert_eq!(header.len(), 4);

    assert_exit(&sobolev(&out, &["sweep", "--param", "m", "--values", "2"]), 3);
}

#[test]
fn config_file_layers_under_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 9\n[flow]\nmode = \"l2\"\nT = 0.5\ndt = 0.1\n").unwrap();
    let out = dir.path().join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_sobolev"))
        .args(["--config", cfg.to_str().unwrap(), "flow", "--dt", "0.25"])
        .arg("--out-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert_ok(&o);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["mode"], "l2");
    assert_eq!(m["config"]["T"], 0.5);
    assert_eq!(m["config"]["dt"], 0.25);

    std::fs::write(&cfg, "[flow]\nbogus = 1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_sobolev"))
        .args(["--config", cfg.to_str().unwrap(), "flow", "--out-dir"])
        .arg(&out)
        .output()
        .unwrap();
    assert_exit(&o, 3);
}

#[test]
fn rerun_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let input = grid_csv(dir.path());
    let out = dir.path().join("out");
    assert_ok(&sobolev(&out, &["derivs", input.to_str().unwrap(), "--k", "6", "--m", "1"]));
    let manifest = out.join("manifest.json");
    let again = dir.path().join("again");
    assert_ok(&sobolev(&again, &["rerun", manifest.to_str().unwrap()]));
    assert_eq!(std::fs::read(out.join("jets.csv")).unwrap(), std::fs::read(again.join("jets.csv")).unwrap());
    std::fs::write(&input, "x1,x2,u\n0,0,0\n1,0,1\n").unwrap();
    assert_exit(&sobolev(&again, &["rerun", manifest.to_str().unwrap()]), 3);
}
