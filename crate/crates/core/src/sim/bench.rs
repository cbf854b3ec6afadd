//! The 10-DGU islanded microgrid benchmark.
//!
//! DGUs 1–9 start connected along the edges in [`BASE_EDGES`]. DGU 10 plugs in at
//! 7.5 s with lines to DGUs 2 and 8, the load at its PCC steps from 60 Ω to
//! 120 Ω at 10 s, and lines 3–7 and 8–10 trip at 12 s, leaving the islands
//! {1, 2, 3, 4, 5, 6, 10} and {7, 8, 9}. Electrical parameters are representative
//! values drawn from a fixed seed around typical converter data.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Event, EventKind, LoadModel, Scenario, SolverConfig};
use crate::error::Result;
use crate::model::{DguId, DguParams, GridSpec, LineParams};
use crate::random::{random_line, LineRanges, Range};
use crate::synthesis::{synthesize_all, ControllerSet, Route, SynthesisOptions};

pub const BASE_EDGES: [(u32, u32); 9] = [(6, 4), (4, 2), (2, 3), (3, 7), (7, 8), (8, 9), (4, 5), (5, 1), (1, 2)];
pub const PLUG_IN_EDGES: [(u32, u32); 2] = [(10, 2), (10, 8)];
pub const TRIPPED_EDGES: [(u32, u32); 2] = [(3, 7), (8, 10)];
pub const PLUG_IN_TIME: f64 = 7.5;
pub const LOAD_STEP_TIME: f64 = 10.0;
pub const TRIP_TIME: f64 = 12.0;
/// Clock offsets (degrees) of the desynchronized DGUs.
pub const CLOCK_SHIFTS: [(u32, f64); 5] = [(2, 2.5), (3, 1.0), (7, 2.0), (8, 3.0), (10, 4.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub sigma_bar: f64,
    pub omega0: f64,
    pub route: Route,
    pub r_t: f64,
    pub l_t: f64,
    pub c_t: f64,
    /// Relative spread of the per-DGU parameters.
    pub spread: f64,
    pub lines: LineRanges,
    /// Resistance range of the RL loads at DGUs 1–9.
    pub load_r: Range,
    pub load_l: f64,
    /// References (pu) of the DGUs not listed in [`BenchmarkConfig::refs`].
    pub default_ref: [f64; 2],
    pub refs: BTreeMap<DguId, [f64; 2]>,
    pub t_end: f64,
    pub solver: SolverConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 7,
            sigma_bar: 1e4,
            omega0: 2.0 * std::f64::consts::PI * 50.0,
            route: Route::Analytic,
            r_t: 0.2,
            l_t: 1.8e-3,
            c_t: 25e-6,
            spread: 0.2,
            lines: LineRanges::default(),
            load_r: Range::new(40.0, 80.0),
            load_l: 0.02e-3,
            default_ref: [0.7, 0.5],
            refs: [(DguId(2), [0.6, 0.5]), (DguId(8), [0.7, 0.6]), (DguId(10), [0.8, 0.6])].into(),
            t_end: 15.0,
            solver: SolverConfig {
                step_s: 20e-6,
                record_stride: 25,
            },
        }
    }
}

/// Benchmark data before scenario assembly.
#[derive(Debug, Clone)]
pub struct BenchmarkGrid {
    /// DGUs 1–9 with the initial lines.
    pub grid0: GridSpec,
    /// All ten DGUs and all eleven lines.
    pub full: GridSpec,
    pub dgu10: DguParams,
    pub lines10: Vec<LineParams>,
    pub loads: BTreeMap<DguId, LoadModel>,
}

pub fn benchmark_grid(cfg: &BenchmarkConfig) -> Result<BenchmarkGrid> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (r, l, c) = (
        Range::around(cfg.r_t, cfg.spread),
        Range::around(cfg.l_t, cfg.spread),
        Range::around(cfg.c_t, cfg.spread),
    );
    let dgus: Vec<DguParams> = (1..=10u32)
        .map(|id| DguParams::new(id, r.sample(&mut rng), l.sample(&mut rng), c.sample(&mut rng)))
        .collect();
    let mk = |rng: &mut ChaCha8Rng, (a, b): (u32, u32)| random_line(rng, DguId(a), DguId(b), &cfg.lines);
    let base: Vec<LineParams> = BASE_EDGES.iter().map(|&e| mk(&mut rng, e)).collect();
    let lines10: Vec<LineParams> = PLUG_IN_EDGES.iter().map(|&e| mk(&mut rng, e)).collect();
    let mut loads: BTreeMap<DguId, LoadModel> = (1..=9u32)
        .map(|id| {
            (
                DguId(id),
                LoadModel::RlLoad {
                    r: cfg.load_r.sample(&mut rng),
                    l: cfg.load_l,
                },
            )
        })
        .collect();
    loads.insert(DguId(10), LoadModel::RlLoad { r: 60.0, l: 0.02e-3 });

    let grid0 = GridSpec::new(cfg.omega0, cfg.sigma_bar, dgus[..9].iter().copied(), base.iter().copied())?;
    let full = GridSpec::new(cfg.omega0, cfg.sigma_bar, dgus.iter().copied(), base.iter().chain(&lines10).copied())?;
    Ok(BenchmarkGrid {
        grid0,
        full,
        dgu10: dgus[9],
        lines10,
        loads,
    })
}

pub fn benchmark_controllers(bg: &BenchmarkGrid, cfg: &BenchmarkConfig) -> Result<ControllerSet> {
    let opts = SynthesisOptions {
        route: cfg.route,
        ..SynthesisOptions::for_grid(&bg.full)
    };
    Ok(synthesize_all(&bg.full, &opts)?.into_iter().map(|(k, (c, _))| (k, c)).collect())
}

pub fn benchmark_scenario(cfg: &BenchmarkConfig) -> Result<Scenario> {
    let bg = benchmark_grid(cfg)?;
    let controllers = benchmark_controllers(&bg, cfg)?;
    let refs0 = (1..=10u32)
        .map(|id| (DguId(id), cfg.refs.get(&DguId(id)).copied().unwrap_or(cfg.default_ref)))
        .collect();
    let events = vec![
        Event::new(
            PLUG_IN_TIME,
            EventKind::PlugIn {
                dgu: bg.dgu10,
                lines: bg.lines10.clone(),
            },
        ),
        Event::new(
            LOAD_STEP_TIME,
            EventKind::LoadStep {
                dgu: DguId(10),
                load: LoadModel::RlLoad { r: 120.0, l: 0.02e-3 },
            },
        ),
        Event::new(TRIP_TIME, EventKind::LineTrip { a: DguId(3), b: DguId(7) }),
        Event::new(TRIP_TIME, EventKind::LineTrip { a: DguId(8), b: DguId(10) }),
    ];
    Ok(Scenario {
        grid0: bg.grid0,
        controllers,
        refs0,
        loads0: bg.loads,
        initial_state: BTreeMap::new(),
        events,
        t_end: cfg.t_end,
        solver: cfg.solver,
    })
}

/// The benchmark with the listed clock offsets. DGUs present at start shift at
/// t = 0; DGU 10 carries its offset from the moment it plugs in.
pub fn clock_drift_scenario(cfg: &BenchmarkConfig) -> Result<Scenario> {
    with_clock_shifts(benchmark_scenario(cfg)?, &CLOCK_SHIFTS)
}

/// Adds clock offsets (degrees) to a scenario, applied when each DGU first exists.
pub fn with_clock_shifts(mut sc: Scenario, shifts: &[(u32, f64)]) -> Result<Scenario> {
    let mut events = Vec::new();
    for &(id, deg) in shifts {
        let id = DguId(id);
        let kind = EventKind::ClockShift { dgu: id, theta_deg: deg };
        if sc.grid0.dgu(id).is_some() {
            events.push(Event::new(0.0, kind));
        } else if let Some(p) = sc
            .events
            .iter()
            .find(|e| matches!(&e.kind, EventKind::PlugIn { dgu, .. } if dgu.id == id))
        {
            events.push(Event::new(p.time, kind));
        }
    }
    // Stable sort keeps every shift after the plug-in it depends on.
    sc.events.extend(events);
    sc.events.sort_by(|a, b| a.time.total_cmp(&b.time));
    Ok(sc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topology_matches_figure() {
        let bg = benchmark_grid(&BenchmarkConfig::default()).unwrap();
        assert_eq!(bg.grid0.num_lines(), 9);
        assert_eq!(bg.grid0.num_dgus(), 9);
        assert!(bg.grid0.is_connected());
        let mut g = bg.full.clone();
        for (a, b) in TRIPPED_EDGES {
            g = crate::model::mutate_topology(&g, &crate::model::TopologyChange::LineTrip { a: DguId(a), b: DguId(b) })
                .unwrap();
        }
        let comps: Vec<Vec<u32>> = g.connected_components().iter().map(|c| c.iter().map(|d| d.0).collect()).collect();
        assert_eq!(comps, vec![vec![1, 2, 3, 4, 5, 6, 10], vec![7, 8, 9]]);
    }

    #[test]
    fn parameters_are_seeded() {
        let a = benchmark_grid(&BenchmarkConfig::default()).unwrap();
        let b = benchmark_grid(&BenchmarkConfig::default()).unwrap();
        assert_eq!(a.full.dgus().collect::<Vec<_>>(), b.full.dgus().collect::<Vec<_>>());
        for d in a.full.dgus() {
            assert!((d.r_t / 0.2 - 1.0).abs() <= 0.2 + 1e-12);
            assert!((d.c_t / 25e-6 - 1.0).abs() <= 0.2 + 1e-12);
        }
        for l in a.full.lines() {
            assert!((0.05..=0.8).contains(&l.r) && (2e-6..=40e-6).contains(&l.l));
        }
    }

    #[test]
    fn clock_shift_of_late_unit_follows_plug_in() {
        let sc = clock_drift_scenario(&BenchmarkConfig::default()).unwrap();
        let pos = |pred: &dyn Fn(&EventKind) -> bool| sc.events.iter().position(|e| pred(&e.kind)).unwrap();
        let plug = pos(&|k| matches!(k, EventKind::PlugIn { .. }));
        let shift = pos(&|k| matches!(k, EventKind::ClockShift { dgu, .. } if dgu.0 == 10));
        assert!(shift > plug);
        assert_eq!(sc.events[shift].time, PLUG_IN_TIME);
    }
}
