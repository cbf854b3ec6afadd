//! Event-driven simulation of the closed-loop microgrid.
//!
//! Between events the closed loop is linear time-invariant with constant forcing
//! (references and constant-current loads), so every segment is integrated with
//! a precomputed RK4 step map (see [`integrator`]). Voltages are in per-unit of
//! the reference scale; the model is linear so any base works.

pub mod bench;
pub mod integrator;
pub mod metrics;
pub mod park;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DguId, DguParams, Gain, GridSpec, LineParams, TopologyChange, AUG};
use crate::synthesis::ControllerSet;

pub use bench::{benchmark_grid, benchmark_scenario, clock_drift_scenario, BenchmarkConfig};
pub use integrator::AffineStep;
pub use metrics::{compute_metrics, frequency_trace, Metrics};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LoadModel {
    ConstantCurrent { i_d: f64, i_q: f64 },
    /// Series RL load; with `l = 0` it is a plain resistor.
    RlLoad { r: f64, l: f64 },
}

impl Default for LoadModel {
    fn default() -> Self {
        LoadModel::ConstantCurrent { i_d: 0.0, i_q: 0.0 }
    }
}

impl LoadModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LoadModel::ConstantCurrent { i_d, i_q } if i_d.is_finite() && i_q.is_finite() => Ok(()),
            LoadModel::RlLoad { r, l } if r > 0.0 && r.is_finite() && l >= 0.0 && l.is_finite() => Ok(()),
            other => Err(Error::param("load", format!("invalid load {other:?}"))),
        }
    }

    fn has_state(&self) -> bool {
        matches!(self, LoadModel::RlLoad { l, .. } if *l > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EventKind {
    /// The controller is looked up in the scenario's controller set.
    PlugIn { dgu: DguParams, lines: Vec<LineParams> },
    PlugOut { dgu: DguId },
    LineTrip { a: DguId, b: DguId },
    LineAdd { line: LineParams },
    LoadStep { dgu: DguId, load: LoadModel },
    RefStep { dgu: DguId, v_d_ref: f64, v_q_ref: f64 },
    /// Phase offset of the DGU's local dq frame, in degrees.
    ClockShift { dgu: DguId, theta_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn new(time: f64, kind: EventKind) -> Self {
        Event { time, kind }
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            EventKind::PlugIn { dgu, .. } => format!("plug-in DGU {}", dgu.id),
            EventKind::PlugOut { dgu } => format!("plug-out DGU {dgu}"),
            EventKind::LineTrip { a, b } => format!("trip line {a}-{b}"),
            EventKind::LineAdd { line } => format!("add line {}-{}", line.a, line.b),
            EventKind::LoadStep { dgu, .. } => format!("load step at DGU {dgu}"),
            EventKind::RefStep { dgu, .. } => format!("reference step at DGU {dgu}"),
            EventKind::ClockShift { dgu, theta_deg } => format!("clock shift {theta_deg} deg at DGU {dgu}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub step_s: f64,
    /// Keep every `record_stride`-th step in the trajectory.
    pub record_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            step_s: 20e-6,
            record_stride: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub grid0: GridSpec,
    /// Controllers for every DGU that is ever present, including plug-ins.
    pub controllers: ControllerSet,
    pub refs0: BTreeMap<DguId, [f64; 2]>,
    pub loads0: BTreeMap<DguId, LoadModel>,
    /// Initial augmented states; missing DGUs start at zero.
    pub initial_state: BTreeMap<DguId, [f64; 6]>,
    pub events: Vec<Event>,
    pub t_end: f64,
    pub solver: SolverConfig,
}

impl Scenario {
    pub fn new(grid0: GridSpec, controllers: ControllerSet, t_end: f64) -> Self {
        Scenario {
            grid0,
            controllers,
            refs0: BTreeMap::new(),
            loads0: BTreeMap::new(),
            initial_state: BTreeMap::new(),
            events: Vec::new(),
            t_end,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid0.validate()?;
        let h = self.solver.step_s;
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Scenario(format!("step must be positive, got {h}")));
        }
        if self.solver.record_stride == 0 {
            return Err(Error::Scenario("record_stride must be at least 1".into()));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::Scenario(format!("t_end must be nonnegative, got {}", self.t_end)));
        }
        for w in self.events.windows(2) {
            if w[1].time < w[0].time {
                return Err(Error::Scenario("events must be sorted by time".into()));
            }
        }
        if let Some(e) = self.events.iter().find(|e| !(e.time.is_finite() && e.time >= 0.0)) {
            return Err(Error::Scenario(format!("event time {} is invalid", e.time)));
        }
        for l in self.loads0.values() {
            l.validate()?;
        }
        Ok(())
    }
}

/// One DGU at one recorded instant. `x = [V_d, V_q, It_d, It_q, v_d, v_q]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DguSample {
    pub dgu: DguId,
    pub x: [f64; 6],
    /// Converter voltage actually applied, in the common frame.
    pub u: [f64; 2],
    pub z_ref: [f64; 2],
}

impl DguSample {
    pub fn voltage(&self) -> [f64; 2] {
        [self.x[0], self.x[1]]
    }

    pub fn tracking_error(&self) -> f64 {
        (self.x[0] - self.z_ref[0]).hypot(self.x[1] - self.z_ref[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub dgus: Vec<DguSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventMarker {
    pub time: f64,
    pub step: usize,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub step_s: f64,
    pub omega0: f64,
    pub frames: Vec<Frame>,
    pub events: Vec<EventMarker>,
}

impl Trajectory {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.frames.iter().map(|f| f.t)
    }

    pub fn last(&self) -> Option<&Frame> {
        self.frames.last()
    }

    /// Samples of one DGU, with their times.
    pub fn series(&self, id: DguId) -> Vec<(f64, DguSample)> {
        self.frames
            .iter()
            .filter_map(|f| f.dgus.iter().find(|s| s.dgu == id).map(|s| (f.t, *s)))
            .collect()
    }
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Gain acting in the common frame for a DGU whose clock leads by `theta`:
/// `Rot(θ) K D(θ)` with `D(θ) = diag(Rot(−θ), Rot(−θ), I₂)`.
pub fn shifted_gain(k: &Gain, theta: f64) -> Gain {
    let r = rot(theta);
    let rm = rot(-theta);
    let mut d = nalgebra::Matrix6::<f64>::identity();
    d.fixed_view_mut::<2, 2>(0, 0).copy_from(&rm);
    d.fixed_view_mut::<2, 2>(2, 2).copy_from(&rm);
    r * k * d
}

/// Live configuration between events.
#[derive(Debug, Clone)]
struct Config {
    grid: GridSpec,
    refs: BTreeMap<DguId, [f64; 2]>,
    loads: BTreeMap<DguId, LoadModel>,
    theta: BTreeMap<DguId, f64>,
}

/// Matrices and state layout of one LTI segment.
struct Segment {
    ids: Vec<DguId>,
    /// Offset of each DGU's load state, if it has one.
    load_state: BTreeMap<DguId, usize>,
    gains: Vec<Gain>,
    refs: Vec<[f64; 2]>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl Segment {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
}

/// Closed-loop matrices `ẋ = A x + b` of a configuration.
fn build_segment(cfg: &Config, controllers: &ControllerSet) -> Result<Segment> {
    let gm = model::assemble_global(&cfg.grid, None)?;
    let ids = gm.ordering.clone();
    let n = ids.len();
    let mut load_state = BTreeMap::new();
    let mut dim = n * AUG;
    for id in &ids {
        if cfg.loads.get(id).is_some_and(LoadModel::has_state) {
            load_state.insert(*id, dim);
            dim += 2;
        }
    }
    let mut a = DMatrix::zeros(dim, dim);
    a.view_mut((0, 0), (n * AUG, n * AUG)).copy_from(&gm.a_hat());
    let mut b = DVector::zeros(dim);
    let mut gains = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    let w = cfg.grid.omega0;

    for (bi, id) in ids.iter().enumerate() {
        let params = cfg.grid.dgu(*id).expect("ordering comes from the grid");
        let ctrl = controllers
            .get(id)
            .ok_or_else(|| Error::Scenario(format!("DGU {id} has no controller")))?;
        let theta = cfg.theta.get(id).copied().unwrap_or(0.0);
        let o = bi * AUG;
        // The integrators see the voltage measured in the local frame.
        let meas = -rot(-theta);
        a.view_mut((o + 4, o), (2, 2)).copy_from(&meas);
        let kc = shifted_gain(&ctrl.k, theta);
        let bk = gm.b_hat.view((o, 2 * bi), (AUG, 2)) * kc;
        let mut blk = a.view_mut((o, o), (AUG, AUG));
        blk += &bk;

        let z = cfg.refs.get(id).copied().unwrap_or([0.0, 0.0]);
        b[o + 4] = z[0];
        b[o + 5] = z[1];
        let c = params.c_t;
        match cfg.loads.get(id).copied().unwrap_or_default() {
            LoadModel::ConstantCurrent { i_d, i_q } => {
                b[o] -= i_d / c;
                b[o + 1] -= i_q / c;
            }
            LoadModel::RlLoad { r, l } if l > 0.0 => {
                let s = load_state[id];
                for k in 0..2 {
                    a[(o + k, s + k)] -= 1.0 / c;
                    a[(s + k, o + k)] = 1.0 / l;
                    a[(s + k, s + k)] = -r / l;
                }
                a[(s, s + 1)] = w;
                a[(s + 1, s)] = -w;
            }
            LoadModel::RlLoad { r, .. } => {
                a[(o, o)] -= 1.0 / (r * c);
                a[(o + 1, o + 1)] -= 1.0 / (r * c);
            }
        }
        gains.push(kc);
        refs.push(z);
    }
    Ok(Segment {
        ids,
        load_state,
        gains,
        refs,
        a,
        b,
    })
}

/// Moves a state vector from one layout to another, by DGU id. DGUs that
/// appear start from `init` (or zero); a load state that appears starts from
/// the load current just before the change.
fn remap(
    x: &DVector<f64>,
    old: &Segment,
    old_loads: &BTreeMap<DguId, LoadModel>,
    new: &Segment,
    init: &BTreeMap<DguId, [f64; 6]>,
) -> DVector<f64> {
    let mut y = DVector::zeros(new.dim());
    let old_index: BTreeMap<DguId, usize> = old.ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    for (bi, id) in new.ids.iter().enumerate() {
        let dst = bi * AUG;
        match old_index.get(id) {
            Some(&oi) => y.rows_mut(dst, AUG).copy_from(&x.rows(oi * AUG, AUG)),
            None => {
                if let Some(v) = init.get(id) {
                    y.rows_mut(dst, AUG).copy_from_slice(v);
                }
            }
        }
        if let Some(&s) = new.load_state.get(id) {
            let current = match (old.load_state.get(id), old_loads.get(id)) {
                (Some(&os), _) => [x[os], x[os + 1]],
                (None, Some(LoadModel::ConstantCurrent { i_d, i_q })) => [*i_d, *i_q],
                (None, Some(LoadModel::RlLoad { r, .. })) if old_index.contains_key(id) => {
                    let oi = old_index[id] * AUG;
                    [x[oi] / r, x[oi + 1] / r]
                }
                _ => [0.0, 0.0],
            };
            y[s] = current[0];
            y[s + 1] = current[1];
        }
    }
    y
}

fn apply_event(cfg: &mut Config, ev: &Event, controllers: &ControllerSet) -> Result<()> {
    let missing = |id: DguId| Error::Scenario(format!("event at t={} references missing DGU {id}", ev.time));
    match &ev.kind {
        EventKind::PlugIn { dgu, lines } => {
            if !controllers.contains_key(&dgu.id) {
                return Err(Error::Scenario(format!("plug-in of DGU {} without a controller", dgu.id)));
            }
            cfg.grid = model::mutate_topology(
                &cfg.grid,
                &TopologyChange::PlugIn {
                    dgu: *dgu,
                    lines: lines.clone(),
                },
            )
            .map_err(|e| Error::Scenario(format!("plug-in at t={}: {e}", ev.time)))?;
        }
        EventKind::PlugOut { dgu } => {
            if cfg.grid.dgu(*dgu).is_none() {
                return Err(missing(*dgu));
            }
            cfg.grid = model::mutate_topology(&cfg.grid, &TopologyChange::PlugOut { dgu: *dgu })?;
        }
        EventKind::LineTrip { a, b } => {
            cfg.grid = model::mutate_topology(&cfg.grid, &TopologyChange::LineTrip { a: *a, b: *b })
                .map_err(|e| Error::Scenario(format!("line trip at t={}: {e}", ev.time)))?;
        }
        EventKind::LineAdd { line } => {
            cfg.grid = model::mutate_topology(&cfg.grid, &TopologyChange::LineAdd { line: *line })
                .map_err(|e| Error::Scenario(format!("line addition at t={}: {e}", ev.time)))?;
        }
        EventKind::LoadStep { dgu, load } => {
            load.validate()?;
            if cfg.grid.dgu(*dgu).is_none() {
                return Err(missing(*dgu));
            }
            cfg.loads.insert(*dgu, *load);
        }
        EventKind::RefStep { dgu, v_d_ref, v_q_ref } => {
            if cfg.grid.dgu(*dgu).is_none() {
                return Err(missing(*dgu));
            }
            cfg.refs.insert(*dgu, [*v_d_ref, *v_q_ref]);
        }
        EventKind::ClockShift { dgu, theta_deg } => {
            if cfg.grid.dgu(*dgu).is_none() {
                return Err(missing(*dgu));
            }
            cfg.theta.insert(*dgu, theta_deg.to_radians());
        }
    }
    Ok(())
}

fn record(t: f64, x: &DVector<f64>, seg: &Segment) -> Frame {
    let dgus = seg
        .ids
        .iter()
        .enumerate()
        .map(|(bi, id)| {
            let o = bi * AUG;
            let mut xi = [0.0; 6];
            xi.copy_from_slice(x.rows(o, AUG).as_slice());
            let u = seg.gains[bi] * nalgebra::Vector6::from_row_slice(&xi);
            DguSample {
                dgu: *id,
                x: xi,
                u: [u[0], u[1]],
                z_ref: seg.refs[bi],
            }
        })
        .collect();
    Frame { t, dgus }
}

/// Number of integration steps covering `[0, t_end]`.
pub fn step_count(t_end: f64, step: f64) -> usize {
    (t_end / step * (1.0 + 1e-12)).floor() as usize
}

/// Runs the scenario. On divergence returns the trajectory up to the last
/// finite state together with the error.
pub fn simulate_partial(sc: &Scenario) -> (Trajectory, Option<Error>) {
    let mut traj = Trajectory {
        step_s: sc.solver.step_s,
        omega0: sc.grid0.omega0,
        frames: Vec::new(),
        events: Vec::new(),
    };
    match run(sc, &mut traj) {
        Ok(()) => (traj, None),
        Err(e) => (traj, Some(e)),
    }
}

pub fn simulate(sc: &Scenario) -> Result<Trajectory> {
    match simulate_partial(sc) {
        (t, None) => Ok(t),
        (_, Some(e)) => Err(e),
    }
}

fn run(sc: &Scenario, traj: &mut Trajectory) -> Result<()> {
    sc.validate()?;
    if sc.t_end == 0.0 {
        return Ok(());
    }
    let h = sc.solver.step_s;
    let n_steps = step_count(sc.t_end, h);
    let stride = sc.solver.record_stride;

    let mut cfg = Config {
        grid: sc.grid0.clone(),
        refs: sc.refs0.clone(),
        loads: sc.loads0.clone(),
        theta: BTreeMap::new(),
    };
    let mut seg = build_segment(&cfg, &sc.controllers)?;
    let mut step = AffineStep::rk4_substepped(&seg.a, &seg.b, h);
    let mut x = remap(&DVector::zeros(0), &empty_segment(), &BTreeMap::new(), &seg, &sc.initial_state);
    let mut scratch = DVector::zeros(x.len());

    let mut events = sc.events.iter().peekable();
    for k in 0..=n_steps {
        let mut changed = false;
        let old_loads = cfg.loads.clone();
        while let Some(ev) = events.next_if(|e| ((e.time / h).round() as usize) <= k) {
            apply_event(&mut cfg, ev, &sc.controllers)?;
            traj.events.push(EventMarker {
                time: ev.time,
                step: k,
                description: ev.describe(),
            });
            changed = true;
        }
        if changed {
            let next = build_segment(&cfg, &sc.controllers)?;
            x = remap(&x, &seg, &old_loads, &next, &sc.initial_state);
            seg = next;
            step = AffineStep::rk4_substepped(&seg.a, &seg.b, h);
            scratch = DVector::zeros(x.len());
        }
        let t = k as f64 * h;
        if k % stride == 0 || k == n_steps {
            traj.frames.push(record(t, &x, &seg));
        }
        if k == n_steps {
            break;
        }
        step.apply_into(&mut x, &mut scratch);
        if !x.iter().all(|v| v.is_finite() && v.abs() < 1e150) {
            return Err(Error::Divergence { time: t + h });
        }
    }
    Ok(())
}

fn empty_segment() -> Segment {
    Segment {
        ids: Vec::new(),
        load_state: BTreeMap::new(),
        gains: Vec::new(),
        refs: Vec::new(),
        a: DMatrix::zeros(0, 0),
        b: DVector::zeros(0),
    }
}

/// Closed-loop state matrix of a configuration, including load states and
/// clock shifts given in degrees.
pub fn closed_loop_matrix(
    grid: &GridSpec,
    controllers: &ControllerSet,
    loads: &BTreeMap<DguId, LoadModel>,
    theta_deg: &BTreeMap<DguId, f64>,
) -> Result<DMatrix<f64>> {
    let cfg = Config {
        grid: grid.clone(),
        refs: BTreeMap::new(),
        loads: loads.clone(),
        theta: theta_deg.iter().map(|(k, v)| (*k, v.to_radians())).collect(),
    };
    Ok(build_segment(&cfg, controllers)?.a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthesis::{synthesize_all, Route, SynthesisOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new(
            2.0 * std::f64::consts::PI * 50.0,
            1e4,
            [
                DguParams::new(1, 0.2, 1.8e-3, 25e-6),
                DguParams::new(2, 0.15, 2.2e-3, 30e-6),
                DguParams::new(3, 0.25, 1.5e-3, 20e-6),
            ],
            [LineParams::new(1, 2, 0.3, 20e-6), LineParams::new(2, 3, 0.5, 10e-6)],
        )
        .unwrap()
    }

    fn ctrls(g: &GridSpec) -> ControllerSet {
        let o = SynthesisOptions {
            route: Route::Analytic,
            ..SynthesisOptions::for_grid(g)
        };
        synthesize_all(g, &o).unwrap().into_iter().map(|(k, (c, _))| (k, c)).collect()
    }

    fn random_init(g: &GridSpec, seed: u64) -> BTreeMap<DguId, [f64; 6]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        g.dgu_ids()
            .into_iter()
            .map(|id| (id, std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
            .collect()
    }

    #[test]
    fn matrix_matches_global_model_without_loads() {
        let g = grid();
        let cs = ctrls(&g);
        let a = closed_loop_matrix(&g, &cs, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        let gains: BTreeMap<_, _> = cs.iter().map(|(k, c)| (*k, c.k)).collect();
        let f = model::assemble_global(&g, Some(&gains)).unwrap().closed_loop().unwrap();
        assert_eq!(a, f);
    }

    #[test]
    fn zero_shift_is_identity() {
        let g = grid();
        let cs = ctrls(&g);
        let mut sc = Scenario::new(g.clone(), cs, 0.05);
        sc.refs0.insert(DguId(1), [0.6, 0.5]);
        sc.initial_state = random_init(&g, 1);
        let base = simulate(&sc).unwrap();
        sc.events = g
            .dgu_ids()
            .into_iter()
            .map(|id| Event::new(0.0, EventKind::ClockShift { dgu: id, theta_deg: 0.0 }))
            .collect();
        let shifted = simulate(&sc).unwrap();
        assert_eq!(base.frames, shifted.frames);
    }

    #[test]
    fn free_response_decays_and_lyapunov_is_monotone() {
        let g = grid();
        let cs = ctrls(&g);
        let mut sc = Scenario::new(g.clone(), cs.clone(), 0.4);
        sc.initial_state = random_init(&g, 2);
        sc.solver.record_stride = 50;
        let tr = simulate(&sc).unwrap();
        let v = |f: &Frame| -> f64 {
            f.dgus
                .iter()
                .map(|s| {
                    let x = nalgebra::Vector6::from_row_slice(&s.x);
                    (x.transpose() * cs[&s.dgu].p * x)[(0, 0)]
                })
                .sum()
        };
        let vs: Vec<f64> = tr.frames.iter().map(v).collect();
        for w in vs.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "{} > {}", w[1], w[0]);
        }
        let norm = |f: &Frame| f.dgus.iter().flat_map(|s| s.x).map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm(tr.last().unwrap()) < 1e-6 * norm(&tr.frames[0]));
    }

    #[test]
    fn integral_action_tracks_references() {
        let g = grid();
        let mut sc = Scenario::new(g.clone(), ctrls(&g), 0.5);
        sc.refs0 = [(DguId(1), [0.6, 0.5]), (DguId(2), [0.7, 0.6]), (DguId(3), [0.8, 0.2])].into();
        sc.loads0 = [
            (DguId(1), LoadModel::ConstantCurrent { i_d: 2.0, i_q: -1.0 }),
            (DguId(2), LoadModel::RlLoad { r: 60.0, l: 2e-5 }),
            (DguId(3), LoadModel::RlLoad { r: 40.0, l: 0.0 }),
        ]
        .into();
        sc.solver.record_stride = 100;
        let tr = simulate(&sc).unwrap();
        for s in &tr.last().unwrap().dgus {
            assert!(s.tracking_error() < 1e-6, "{s:?}");
        }
    }

    #[test]
    fn constant_current_superposition() {
        let g = grid();
        let cs = ctrls(&g);
        let run = |scale: f64| {
            let mut sc = Scenario::new(g.clone(), cs.clone(), 0.3);
            sc.loads0.insert(DguId(2), LoadModel::ConstantCurrent { i_d: 3.0 * scale, i_q: scale });
            sc.solver.record_stride = 1000;
            simulate(&sc).unwrap()
        };
        let (a, b) = (run(1.0), run(2.0));
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (sa, sb) in fa.dgus.iter().zip(&fb.dgus) {
                for k in 0..6 {
                    assert!((2.0 * sa.x[k] - sb.x[k]).abs() <= 1e-9 * (1.0 + sb.x[k].abs()));
                }
            }
        }
    }

    #[test]
    fn islands_evolve_independently() {
        let g = grid();
        let cs = ctrls(&g);
        let split = model::mutate_topology(&g, &TopologyChange::LineTrip { a: DguId(2), b: DguId(3) }).unwrap();
        let init = random_init(&g, 4);
        let mut whole = Scenario::new(split.clone(), cs.clone(), 0.05);
        whole.initial_state = init.clone();
        let mut part = Scenario::new(split.subgrid(&[DguId(1), DguId(2)]), cs, 0.05);
        part.initial_state = init;
        let (a, b) = (simulate(&whole).unwrap(), simulate(&part).unwrap());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for sb in &fb.dgus {
                let sa = fa.dgus.iter().find(|s| s.dgu == sb.dgu).unwrap();
                for k in 0..6 {
                    assert!((sa.x[k] - sb.x[k]).abs() <= 1e-12 * (1.0 + sb.x[k].abs()));
                }
            }
        }
    }

    #[test]
    fn sample_count_and_events() {
        let g = grid();
        let cs = ctrls(&g);
        let mut sc = Scenario::new(g, cs, 0.01);
        sc.events.push(Event::new(0.004, EventKind::LineTrip { a: DguId(1), b: DguId(2) }));
        sc.events.push(Event::new(0.006, EventKind::PlugOut { dgu: DguId(3) }));
        let tr = simulate(&sc).unwrap();
        assert_eq!(tr.frames.len(), 501);
        assert_eq!(tr.events.len(), 2);
        assert_eq!(tr.events[0].step, 200);
        assert_eq!(tr.frames[400].dgus.len(), 2);
        let mut empty = sc.clone();
        empty.t_end = 0.0;
        assert!(simulate(&empty).unwrap().frames.is_empty());
    }

    #[test]
    fn bad_events_are_rejected() {
        let g = grid();
        let cs = ctrls(&g);
        let mut sc = Scenario::new(g, cs, 0.01);
        sc.events.push(Event::new(0.001, EventKind::RefStep { dgu: DguId(9), v_d_ref: 1.0, v_q_ref: 0.0 }));
        assert!(matches!(simulate(&sc), Err(Error::Scenario(_))));
        sc.events = vec![Event::new(0.001, EventKind::PlugIn { dgu: DguParams::new(9, 0.1, 1e-3, 1e-5), lines: vec![] })];
        assert!(matches!(simulate(&sc), Err(Error::Scenario(_))));
    }

    #[test]
    fn divergence_is_reported_with_partial_trajectory() {
        let g = grid();
        let mut cs = ctrls(&g);
        for c in cs.values_mut() {
            c.k = -c.k * 50.0;
        }
        let mut sc = Scenario::new(g.clone(), cs, 10.0);
        sc.initial_state = random_init(&g, 5);
        sc.solver.record_stride = 100;
        let (tr, err) = simulate_partial(&sc);
        assert!(matches!(err, Some(Error::Divergence { .. })));
        assert!(!tr.frames.is_empty());
    }
}
