//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each operation takes and returns JSON strings. The plain Rust functions are
//! what the wasm exports wrap, so they can be tested natively.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use pnpmg::analysis::{self, Verdict};
use pnpmg::io::{ControllerFile, GridFile};
use pnpmg::sim::bench::{self, BenchmarkConfig};
use pnpmg::sim::metrics::{frequency_trace, MetricsOptions};
use pnpmg::sim::{compute_metrics, simulate};
use pnpmg::synthesis::{synthesize, synthesize_all, Route, SynthesisOptions};
use pnpmg::DguParams;
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

fn route(name: &str) -> Result<Route, String> {
    match name {
        "lmi" => Ok(Route::Lmi),
        "analytic" => Ok(Route::Analytic),
        other => Err(format!("unknown route {other:?}; expected \"lmi\" or \"analytic\"")),
    }
}

/// Synthesizes the local controller of one DGU and returns its gain, Lyapunov
/// matrix and certificate residuals.
pub fn synthesize_dgu_json(r_t: f64, l_t: f64, c_t: f64, sigma_bar: f64, route_name: &str) -> Result<String, String> {
    let opts = SynthesisOptions {
        sigma_bar,
        omega0: 2.0 * PI * 50.0,
        route: route(route_name)?,
        ..Default::default()
    };
    let params = DguParams::new(1, r_t, l_t, c_t);
    let (c, cert) = synthesize(&params, &opts).map_err(|e| e.to_string())?;
    let out = json!({
        "controller": ControllerFile::new(&c, Some(&cert)),
        "valid": cert.is_valid(),
        "gain_norm": cert.gain_norm,
        "gain_bound": cert.gain_bound(),
        "closed_loop_max_re": cert.closed_loop_max_re,
        "residuals": cert.residuals,
        "failures": cert.failures,
    });
    Ok(out.to_string())
}

#[derive(Serialize)]
struct ComponentSummary {
    dgus: Vec<u32>,
    max_re: f64,
    verdict: Verdict,
}

/// Synthesizes every DGU of a grid file independently and certifies the
/// interconnection.
pub fn certify_grid_json(grid_json: &str, route_name: &str) -> Result<String, String> {
    let file: GridFile = serde_json::from_str(grid_json).map_err(|e| e.to_string())?;
    let grid = file.to_grid().map_err(|e| e.to_string())?;
    let opts = SynthesisOptions {
        route: route(route_name)?,
        ..SynthesisOptions::for_grid(&grid)
    };
    let ctrls = synthesize_all(&grid, &opts)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|(k, (c, _))| (k, c))
        .collect();
    let rep = analysis::certify_stability(&grid, &ctrls).map_err(|e| e.to_string())?;
    let components: Vec<ComponentSummary> = rep
        .components
        .iter()
        .map(|c| ComponentSummary {
            dgus: c.dgus.iter().map(|d| d.0).collect(),
            max_re: c.max_re,
            verdict: c.verdict,
        })
        .collect();
    Ok(json!({
        "stable": rep.is_stable(),
        "verdict": rep.verdict,
        "max_eig_q_relative": rep.residuals.get("global_q_max_eig"),
        "components": components,
        "failures": rep.failures,
    })
    .to_string())
}

#[derive(Serialize)]
struct Series {
    dgu: u32,
    /// `|V_dq|` per frame, `null` while the DGU is absent.
    v: Vec<Option<f64>>,
    /// Tracking error per frame.
    err: Vec<Option<f64>>,
    f_hz: Vec<Option<f64>>,
}

/// Runs the benchmark (optionally with clock drift) and returns downsampled
/// voltage, tracking error and frequency traces plus event times.
pub fn run_benchmark_json(t_end: f64, record_stride: usize, clock_drift: bool) -> Result<String, String> {
    let mut cfg = BenchmarkConfig {
        t_end,
        route: Route::Analytic,
        ..Default::default()
    };
    cfg.solver.record_stride = record_stride.max(1);
    let sc = if clock_drift {
        bench::clock_drift_scenario(&cfg)
    } else {
        bench::benchmark_scenario(&cfg)
    }
    .map_err(|e| e.to_string())?;
    let traj = simulate(&sc).map_err(|e| e.to_string())?;
    let opts = MetricsOptions::default();
    let freq = frequency_trace(&traj, &opts);
    let metrics = if traj.frames.is_empty() {
        None
    } else {
        Some(compute_metrics(&traj, &opts).map_err(|e| e.to_string())?)
    };

    let mut series: BTreeMap<u32, Series> = BTreeMap::new();
    for (id, f) in &freq {
        series.insert(
            id.0,
            Series {
                dgu: id.0,
                v: vec![None; traj.frames.len()],
                err: vec![None; traj.frames.len()],
                f_hz: f.clone(),
            },
        );
    }
    for (k, frame) in traj.frames.iter().enumerate() {
        for s in &frame.dgus {
            if let Some(e) = series.get_mut(&s.dgu.0) {
                let [vd, vq] = s.voltage();
                e.v[k] = Some(vd.hypot(vq));
                e.err[k] = Some(s.tracking_error());
            }
        }
    }
    Ok(json!({
        "t": traj.frames.iter().map(|f| f.t).collect::<Vec<_>>(),
        "series": series.into_values().collect::<Vec<_>>(),
        "events": traj.events.iter().map(|e| json!({"t": e.time, "what": e.description})).collect::<Vec<_>>(),
        "max_frequency_deviation_hz": metrics.as_ref().and_then(|m| m.max_frequency_deviation_hz),
        "max_steady_frequency_deviation_hz": metrics.as_ref().and_then(|m| m.max_steady_frequency_deviation_hz),
    })
    .to_string())
}

/// Default grid shown in the page: the benchmark after DGU 10 is plugged in.
pub fn benchmark_grid_json() -> Result<String, String> {
    let bg = bench::benchmark_grid(&BenchmarkConfig::default()).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&GridFile::from_grid(&bg.full)).map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = synthesizeDgu)]
pub fn synthesize_dgu(r_t: f64, l_t: f64, c_t: f64, sigma_bar: f64, route: &str) -> Result<String, JsError> {
    js(synthesize_dgu_json(r_t, l_t, c_t, sigma_bar, route))
}

#[wasm_bindgen(js_name = certifyGrid)]
pub fn certify_grid(grid_json: &str, route: &str) -> Result<String, JsError> {
    js(certify_grid_json(grid_json, route))
}

#[wasm_bindgen(js_name = runBenchmark)]
pub fn run_benchmark(t_end: f64, record_stride: usize, clock_drift: bool) -> Result<String, JsError> {
    js(run_benchmark_json(t_end, record_stride, clock_drift))
}

#[wasm_bindgen(js_name = benchmarkGrid)]
pub fn benchmark_grid() -> Result<String, JsError> {
    js(benchmark_grid_json())
}
