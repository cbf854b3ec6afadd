use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn pnpmg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pnpmg"))
        .args(args)
        .env("PNPMG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("stderr is not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

const GRID: &str = r#"{
  "omega0_hz": 50.0,
  "sigma_bar": 10000.0,
  "dgus": [
    {"id": 1, "r_t": 0.2, "l_t": 0.0018, "c_t": 2.5e-5},
    {"id": 2, "r_t": 0.15, "l_t": 0.0022, "c_t": 3.0e-5},
    {"id": 3, "r_t": 0.3, "l_t": 0.0015, "c_t": 2.0e-5}
  ],
  "lines": [
    {"a": 1, "b": 2, "r": 0.3, "l": 2.0e-5},
    {"a": 2, "b": 3, "r": 0.5, "l": 1.0e-5}
  ]
}"#;

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.json");
    fs::write(&grid, GRID).unwrap();
    (dir, grid)
}

#[test]
fn synth_writes_one_controller_per_dgu_deterministically() {
    let (dir, grid) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = pnpmg(&["synth", "--grid", p(&grid), "--out", p(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["controllers.json", "certificates.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let ctrls: Vec<Value> = serde_json::from_slice(&fs::read(a.join("controllers.json")).unwrap()).unwrap();
    assert_eq!(ctrls.len(), 3);
    assert_eq!(ctrls[0]["k"].as_array().unwrap().len(), 2);
    assert_eq!(ctrls[0]["k"][0].as_array().unwrap().len(), 6);
    let certs: Vec<Value> = serde_json::from_slice(&fs::read(a.join("certificates.json")).unwrap()).unwrap();
    assert!(certs.iter().all(|c| c["valid"] == true));
}

#[test]
fn alphas_take_four_comma_separated_weights() {
    let (dir, grid) = setup();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = pnpmg(&["synth", "--grid", p(&grid), "--out", p(&a)]);
    assert_eq!(o.status.code(), Some(0));
    let o = pnpmg(&["synth", "--grid", p(&grid), "--out", p(&b), "--alphas", "1,2,0.5,3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(fs::read(a.join("controllers.json")).unwrap(), fs::read(b.join("controllers.json")).unwrap());

    let o = pnpmg(&["synth", "--grid", p(&grid), "--out", p(&b), "--alphas", "1,2,3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expected 4"));
}

#[test]
fn synth_names_the_bad_dgu() {
    let (dir, grid) = setup();
    let text = fs::read_to_string(&grid).unwrap().replace("\"c_t\": 3.0e-5", "\"c_t\": 0.0");
    fs::write(&grid, text).unwrap();
    let o = pnpmg(&["synth", "--grid", p(&grid), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_json(&o);
    assert_eq!(e["error"]["dgu"], 2);
    assert!(e["error"]["message"].as_str().unwrap().contains("c_t"));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnpmg(&["synth", "--grid", p(&dir.path().join("nope.json")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"]["kind"], "io");
}

#[test]
fn verify_accepts_synthesized_controllers_and_rejects_tampered_ones() {
    let (dir, grid) = setup();
    let out = dir.path();
    assert_eq!(pnpmg(&["synth", "--grid", p(&grid), "--out", p(out), "--route", "analytic"]).status.code(), Some(0));
    let ctrl = out.join("controllers.json");
    let o = pnpmg(&["verify", "--grid", p(&grid), "--controllers", p(&ctrl), "--out", p(out), "--samples", "100"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: Value = serde_json::from_slice(&fs::read(out.join("stability_report.json")).unwrap()).unwrap();
    assert_eq!(rep["stability"]["verdict"], "Stable");
    assert_eq!(rep["stability"]["components"].as_array().unwrap().len(), 1);

    let mut files: Vec<Value> = serde_json::from_slice(&fs::read(&ctrl).unwrap()).unwrap();
    files[1]["p"][0][2] = Value::from(1e-3);
    files[1]["p"][2][0] = Value::from(1e-3);
    let bad = out.join("bad.json");
    fs::write(&bad, serde_json::to_string(&files).unwrap()).unwrap();
    let o = pnpmg(&["verify", "--grid", p(&grid), "--controllers", p(&bad), "--out", p(out)]);
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr_json(&o)["error"]["message"].as_str().unwrap().to_string();
    assert!(msg.contains("DGU 2") && msg.contains("diag(eta I, P22)"), "{msg}");
}

#[test]
fn verify_reports_islands_separately() {
    let (dir, grid) = setup();
    let out = dir.path();
    assert_eq!(pnpmg(&["synth", "--grid", p(&grid), "--out", p(out)]).status.code(), Some(0));
    let split = GRID.replace(",\n    {\"a\": 2, \"b\": 3, \"r\": 0.5, \"l\": 1.0e-5}", "");
    let split_path = out.join("split.json");
    fs::write(&split_path, split).unwrap();
    let o = pnpmg(&[
        "verify",
        "--grid",
        p(&split_path),
        "--controllers",
        p(&out.join("controllers.json")),
        "--out",
        p(out),
        "--samples",
        "50",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep: Value = serde_json::from_slice(&fs::read(out.join("stability_report.json")).unwrap()).unwrap();
    let comps = rep["stability"]["components"].as_array().unwrap();
    assert_eq!(comps.len(), 2);
    assert!(comps.iter().all(|c| c["verdict"] == "Stable"));
}

#[test]
fn zero_horizon_gives_empty_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnpmg(&["simulate", "--benchmark", "--t-end", "0", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    assert_eq!(csv, "t,dgu,Vd,Vq,Itd,Itq,vd,vq,ud,uq\n");
}

#[test]
fn clock_drift_leaves_offsets_on_shifted_units_only() {
    let dir = tempfile::tempdir().unwrap();
    let o = pnpmg(&["simulate", "--clock-drift", "--t-end", "0.5", "--record-stride", "100", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    for id in 1..=9 {
        let err = m["dgus"][id.to_string()]["final_error"].as_f64().unwrap();
        if [2, 3, 7, 8].contains(&id) {
            assert!(err > 1e-3, "DGU {id}: {err}");
        } else {
            assert!(err < 1e-6, "DGU {id}: {err}");
        }
    }
}

#[test]
fn scenario_file_round_trip_and_divergence_exit() {
    let (dir, grid) = setup();
    let out = dir.path();
    let grid_json: Value = serde_json::from_str(&fs::read_to_string(&grid).unwrap()).unwrap();
    let scenario = serde_json::json!({
        "schema": 1,
        "grid": grid_json,
        "refs": {"1": [0.6, 0.5], "3": [0.7, 0.2]},
        "loads": {"2": {"kind": "RlLoad", "r": 50.0, "l": 2e-5}},
        "events": [
            {"time": 0.05, "kind": "RefStep", "dgu": 2, "v_d_ref": 0.8, "v_q_ref": 0.1},
            {"time": 0.1, "kind": "LineTrip", "a": 2, "b": 3}
        ],
        "t_end": 0.2,
        "solver": {"step_s": 2e-5, "record_stride": 10}
    });
    let sc = out.join("scenario_in.json");
    fs::write(&sc, scenario.to_string()).unwrap();
    let o = pnpmg(&["simulate", "--scenario", p(&sc), "--out", p(out), "--route", "analytic"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * (1 + 10000 / 10));
    let m: Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["windows"].as_array().unwrap().len(), 3);

    // The written scenario re-runs to the same trajectory.
    let again = out.join("again");
    let o = pnpmg(&["simulate", "--scenario", p(&out.join("scenario.json")), "--out", p(&again)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(again.join("trajectory.csv")).unwrap(), csv);

    // Destabilizing gains.
    let mut written: Value = serde_json::from_slice(&fs::read(out.join("scenario.json")).unwrap()).unwrap();
    for c in written["controllers"].as_array_mut().unwrap() {
        for row in c["k"].as_array_mut().unwrap() {
            for v in row.as_array_mut().unwrap() {
                *v = Value::from(-50.0 * v.as_f64().unwrap());
            }
        }
    }
    written["t_end"] = Value::from(20.0);
    let bad = out.join("bad.json");
    fs::write(&bad, written.to_string()).unwrap();
    let o = pnpmg(&["simulate", "--scenario", p(&bad), "--out", p(&out.join("bad")), "--record-stride", "1000"]);
    assert_eq!(o.status.code(), Some(4));
    assert_eq!(stderr_json(&o)["error"]["kind"], "divergence");
    assert!(fs::read_to_string(out.join("bad/trajectory.csv")).unwrap().lines().count() > 1);
}

#[test]
fn sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(&spec, r#"{"kind": "synthesis", "samples": 0, "seed": 1}"#).unwrap();
    let o = pnpmg(&["sweep", p(&spec), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap(), "sample,feasible,max_eig_q,max_re,error\n");

    fs::write(&spec, r#"{"kind": "synthesis", "samples": 4, "seed": 1}"#).unwrap();
    let o = pnpmg(&["sweep", p(&spec), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    let first = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 4 * 3 * 2);
    assert!(first.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{first}");
    let o = pnpmg(&["sweep", p(&spec), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(dir.path().join("summary.csv")).unwrap(), first);
}
