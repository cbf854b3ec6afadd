use pnpmg_web::{benchmark_grid_json, certify_grid_json, run_benchmark_json, synthesize_dgu_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn synthesis_reports_a_valid_certificate() {
    for route in ["analytic", "lmi"] {
        let r = parse(&synthesize_dgu_json(0.2, 1.8e-3, 25e-6, 1e4, route).unwrap());
        assert_eq!(r["valid"], true, "{route}: {r}");
        assert!(r["gain_norm"].as_f64().unwrap() <= r["gain_bound"].as_f64().unwrap());
        assert!(r["closed_loop_max_re"].as_f64().unwrap() < 0.0);
        assert_eq!(r["controller"]["k"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn bad_inputs_are_reported_not_panicked() {
    assert!(synthesize_dgu_json(0.2, 1.8e-3, 0.0, 1e4, "analytic").unwrap_err().contains("c_t"));
    assert!(synthesize_dgu_json(0.2, 1.8e-3, 25e-6, 1e4, "fast").is_err());
    assert!(certify_grid_json("{", "analytic").is_err());
}

#[test]
fn benchmark_grid_certifies_whole_and_split() {
    let text = benchmark_grid_json().unwrap();
    let r = parse(&certify_grid_json(&text, "analytic").unwrap());
    assert_eq!(r["stable"], true, "{r}");
    assert_eq!(r["components"].as_array().unwrap().len(), 1);

    let mut grid = parse(&text);
    let lines = grid["lines"].as_array_mut().unwrap();
    lines.retain(|l| {
        let key = (l["a"].as_u64().unwrap(), l["b"].as_u64().unwrap());
        ![(3, 7), (8, 10)].contains(&key) && ![(7, 3), (10, 8)].contains(&key)
    });
    let r = parse(&certify_grid_json(&grid.to_string(), "analytic").unwrap());
    assert_eq!(r["stable"], true, "{r}");
    assert_eq!(r["components"].as_array().unwrap().len(), 2);
}

#[test]
fn short_benchmark_run_has_aligned_series() {
    let r = parse(&run_benchmark_json(0.2, 50, true).unwrap());
    let n = r["t"].as_array().unwrap().len();
    assert_eq!(n, 1 + 10_000 / 50);
    let series = r["series"].as_array().unwrap();
    // DGU 10 plugs in only at 7.5 s.
    assert_eq!(series.len(), 9);
    for s in series {
        assert_eq!(s["v"].as_array().unwrap().len(), n);
        assert_eq!(s["f_hz"].as_array().unwrap().len(), n);
    }
    assert!(series.iter().all(|s| s["v"].as_array().unwrap().iter().all(Value::is_f64)));

    let empty = parse(&run_benchmark_json(0.0, 1, false).unwrap());
    assert!(empty["t"].as_array().unwrap().is_empty());
}
