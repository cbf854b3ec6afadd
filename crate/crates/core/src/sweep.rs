//! Seeded property sweeps over random DGUs and random grids.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, Verdict};
use crate::error::Result;
use crate::random::{random_connected_grid, random_dgu, DguRanges, LineRanges};
use crate::synthesis::{synthesize, synthesize_all, Route, SynthesisOptions};

pub const SUMMARY_HEADER: &str = "sample,feasible,max_eig_q,max_re,error";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SweepSpec {
    /// Local synthesis of `samples` random DGUs for every σ̄ and route listed.
    Synthesis {
        samples: usize,
        seed: u64,
        #[serde(default = "default_sigma_bars")]
        sigma_bars: Vec<f64>,
        #[serde(default = "default_routes")]
        routes: Vec<Route>,
        #[serde(default)]
        dgu_ranges: DguRanges,
        #[serde(default = "default_omega0_hz")]
        omega0_hz: f64,
        #[serde(default = "default_alphas")]
        alphas: [f64; 4],
    },
    /// Synthesis and collective certification of random connected grids.
    Grids {
        samples: usize,
        seed: u64,
        #[serde(default = "default_min_dgus")]
        min_dgus: usize,
        #[serde(default = "default_max_dgus")]
        max_dgus: usize,
        #[serde(default = "default_sigma_bar")]
        sigma_bar: f64,
        #[serde(default = "default_route")]
        route: Route,
        #[serde(default)]
        dgu_ranges: DguRanges,
        #[serde(default)]
        line_ranges: LineRanges,
        #[serde(default = "default_extra_edge_prob")]
        extra_edge_prob: f64,
        #[serde(default = "default_omega0_hz")]
        omega0_hz: f64,
        #[serde(default = "default_alphas")]
        alphas: [f64; 4],
    },
}

fn default_sigma_bars() -> Vec<f64> {
    vec![1e2, 1e4, 1e6]
}
fn default_routes() -> Vec<Route> {
    vec![Route::Lmi, Route::Analytic]
}
fn default_omega0_hz() -> f64 {
    50.0
}
fn default_alphas() -> [f64; 4] {
    [1.0; 4]
}
fn default_min_dgus() -> usize {
    2
}
fn default_max_dgus() -> usize {
    20
}
fn default_sigma_bar() -> f64 {
    1e4
}
fn default_route() -> Route {
    Route::Lmi
}
fn default_extra_edge_prob() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sample: String,
    pub feasible: bool,
    /// Largest eigenvalue of the local `Q_i` (synthesis) or of the global `Q`
    /// relative to its Frobenius norm (grids).
    pub max_eig_q: f64,
    /// Largest real part of the closed-loop spectrum.
    pub max_re: f64,
    pub error: String,
}

impl SweepRecord {
    fn failed(sample: String, e: impl ToString) -> Self {
        SweepRecord {
            sample,
            feasible: false,
            max_eig_q: f64::NAN,
            max_re: f64::NAN,
            error: e.to_string(),
        }
    }
}

/// Runs the sweep. Per-sample failures are recorded, never propagated.
pub fn run_sweep(spec: &SweepSpec) -> Vec<SweepRecord> {
    match spec {
        SweepSpec::Synthesis {
            samples,
            seed,
            sigma_bars,
            routes,
            dgu_ranges,
            omega0_hz,
            alphas,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let dgus: Vec<_> = (0..*samples).map(|i| random_dgu(&mut rng, i as u32 + 1, dgu_ranges)).collect();
            let mut jobs = Vec::new();
            for d in &dgus {
                for &sb in sigma_bars {
                    for &route in routes {
                        jobs.push((*d, sb, route));
                    }
                }
            }
            par_map(&jobs, |(d, sb, route)| {
                let label = format!("dgu={};sigma_bar={sb:e};route={}", d.id, route_name(*route));
                let opts = SynthesisOptions {
                    sigma_bar: *sb,
                    omega0: 2.0 * PI * omega0_hz,
                    route: *route,
                    alphas: *alphas,
                    ..Default::default()
                };
                match synthesize(d, &opts) {
                    Ok((_, cert)) => SweepRecord {
                        sample: label,
                        feasible: cert.is_valid(),
                        max_eig_q: cert.max_eig_q,
                        max_re: cert.closed_loop_max_re,
                        error: cert.failures.join("; "),
                    },
                    Err(e) => SweepRecord::failed(label, e),
                }
            })
        }
        SweepSpec::Grids {
            samples,
            seed,
            min_dgus,
            max_dgus,
            sigma_bar,
            route,
            dgu_ranges,
            line_ranges,
            extra_edge_prob,
            omega0_hz,
            alphas,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let seeds: Vec<(usize, u64)> = (0..*samples).map(|i| (i, rng.random())).collect();
            par_map(&seeds, |(i, s)| {
                let label = format!("grid={i}");
                let run = || -> Result<SweepRecord> {
                    let mut rng = ChaCha8Rng::seed_from_u64(*s);
                    let n = rng.random_range(*min_dgus.min(max_dgus)..=*max_dgus);
                    let grid = random_connected_grid(
                        &mut rng,
                        n,
                        2.0 * PI * omega0_hz,
                        *sigma_bar,
                        dgu_ranges,
                        line_ranges,
                        *extra_edge_prob,
                    )?;
                    let opts = SynthesisOptions {
                        route: *route,
                        alphas: *alphas,
                        ..SynthesisOptions::for_grid(&grid)
                    };
                    let ctrls = synthesize_all(&grid, &opts)?.into_iter().map(|(k, (c, _))| (k, c)).collect();
                    let rep = analysis::certify_stability(&grid, &ctrls)?;
                    let max_re = rep.components.iter().map(|c| c.max_re).fold(f64::NEG_INFINITY, f64::max);
                    Ok(SweepRecord {
                        sample: format!("{label};n={n};lines={}", grid.num_lines()),
                        feasible: rep.verdict == Verdict::Stable && rep.failures.is_empty(),
                        max_eig_q: rep.residuals.get("global_q_max_eig").copied().unwrap_or(f64::NAN),
                        max_re,
                        error: rep.failures.join("; "),
                    })
                };
                run().unwrap_or_else(|e| SweepRecord::failed(label.clone(), e))
            })
        }
    }
}

fn route_name(r: Route) -> &'static str {
    match r {
        Route::Lmi => "lmi",
        Route::Analytic => "analytic",
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn summary_csv(records: &[SweepRecord]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{:e},{:e},{}\n",
            csv_field(&r.sample),
            r.feasible,
            r.max_eig_q,
            r.max_re,
            csv_field(&r.error)
        ));
    }
    out
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_sweep_has_header_only() {
        let spec = SweepSpec::Synthesis {
            samples: 0,
            seed: 1,
            sigma_bars: default_sigma_bars(),
            routes: default_routes(),
            dgu_ranges: DguRanges::default(),
            omega0_hz: 50.0,
            alphas: [1.0; 4],
        };
        assert_eq!(summary_csv(&run_sweep(&spec)), format!("{SUMMARY_HEADER}\n"));
    }

    #[test]
    fn spec_defaults_and_determinism() {
        let spec: SweepSpec = serde_json::from_str(r#"{"kind": "grids", "samples": 3, "seed": 9, "max_dgus": 5}"#).unwrap();
        let a = summary_csv(&run_sweep(&spec));
        let b = summary_csv(&run_sweep(&spec));
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 4);
        assert!(a.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")), "{a}");
    }

    #[test]
    fn failures_are_recorded() {
        let spec = SweepSpec::Synthesis {
            samples: 2,
            seed: 1,
            sigma_bars: vec![-1.0],
            routes: vec![Route::Analytic],
            dgu_ranges: DguRanges::default(),
            omega0_hz: 50.0,
            alphas: [1.0; 4],
        };
        let recs = run_sweep(&spec);
        assert_eq!(recs.len(), 2);
        assert!(recs.iter().all(|r| !r.feasible && !r.error.is_empty()));
    }
}
