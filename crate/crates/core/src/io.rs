//! File formats: grid, controller, certificate and scenario JSON, trajectory CSV.
//!
//! Matrices are written as row-major nested arrays. Map keys are DGU ids, so
//! outputs are ordered and byte-for-byte reproducible.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::Matrix6;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gain_from_rows, DguId, DguParams, GridSpec, LineParams};
use crate::sim::{DguSample, Event, Frame, LoadModel, Scenario, SolverConfig, Trajectory};
use crate::synthesis::{Certificate, Controller, ControllerSet, Route, SynthesisOptions};

pub const SCENARIO_SCHEMA: u32 = 1;
pub const TRAJECTORY_HEADER: &str = "t,dgu,Vd,Vq,Itd,Itq,vd,vq,ud,uq";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub omega0_hz: f64,
    pub sigma_bar: f64,
    pub dgus: Vec<DguParams>,
    pub lines: Vec<LineParams>,
}

impl GridFile {
    pub fn from_grid(g: &GridSpec) -> Self {
        GridFile {
            omega0_hz: g.omega0 / (2.0 * PI),
            sigma_bar: g.sigma_bar,
            dgus: g.dgus().copied().collect(),
            lines: g.lines().copied().collect(),
        }
    }

    pub fn to_grid(&self) -> Result<GridSpec> {
        GridSpec::new(
            2.0 * PI * self.omega0_hz,
            self.sigma_bar,
            self.dgus.iter().copied(),
            self.lines.iter().copied(),
        )
    }

    /// Builds the grid without validation, e.g. to report every bad DGU at once.
    pub fn to_grid_unchecked(&self) -> Result<GridSpec> {
        GridSpec::new_unchecked(
            2.0 * PI * self.omega0_hz,
            self.sigma_bar,
            self.dgus.iter().copied(),
            self.lines.iter().copied(),
        )
    }
}

fn rows<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> Vec<Vec<f64>> {
    (0..R).map(|i| (0..C).map(|j| m[(i, j)]).collect()).collect()
}

fn mat<const R: usize, const C: usize>(what: &str, v: &[Vec<f64>]) -> Result<nalgebra::SMatrix<f64, R, C>> {
    if v.len() != R || v.iter().any(|r| r.len() != C) {
        return Err(Error::Shape {
            what: what.into(),
            expected: format!("{R}x{C}"),
            found: format!("{}x{}", v.len(), v.first().map_or(0, Vec::len)),
        });
    }
    Ok(nalgebra::SMatrix::from_fn(|i, j| v[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub gamma: Vec<Vec<f64>>,
    pub beta: f64,
    pub zeta: f64,
    pub max_eig_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerFile {
    pub dgu_id: DguId,
    pub k: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub sigma_bar: f64,
    pub certificate: Option<CertificateSummary>,
    /// `Y = P⁻¹` and `G = KY` as synthesized; rebuilt from `(K, P)` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
}

impl ControllerFile {
    pub fn new(c: &Controller, cert: Option<&Certificate>) -> Self {
        ControllerFile {
            dgu_id: c.dgu,
            k: rows(&c.k),
            p: rows(&c.p),
            sigma_bar: c.sigma_bar,
            certificate: cert.map(|c| CertificateSummary {
                gamma: rows(&c.gamma),
                beta: c.beta,
                zeta: c.zeta,
                max_eig_q: c.max_eig_q,
            }),
            y: Some(rows(&c.y)),
            g: Some(rows(&c.g)),
        }
    }

    pub fn to_controller(&self) -> Result<Controller> {
        let k = gain_from_rows(&self.k)?;
        let p: Matrix6<f64> = mat("P", &self.p)?;
        match (&self.y, &self.g) {
            (Some(y), Some(g)) => Ok(Controller {
                dgu: self.dgu_id,
                sigma_bar: self.sigma_bar,
                k,
                p,
                y: mat("Y", y)?,
                g: mat("G", g)?,
            }),
            _ => Controller::from_kp(self.dgu_id, self.sigma_bar, k, p),
        }
    }
}

pub fn controllers_to_files(set: &ControllerSet, certs: &BTreeMap<DguId, Certificate>) -> Vec<ControllerFile> {
    set.values().map(|c| ControllerFile::new(c, certs.get(&c.dgu))).collect()
}

pub fn controllers_from_files(files: &[ControllerFile]) -> Result<ControllerSet> {
    let mut out = ControllerSet::new();
    for f in files {
        if out.insert(f.dgu_id, f.to_controller()?).is_some() {
            return Err(Error::param("controllers", format!("duplicate controller for DGU {}", f.dgu_id)));
        }
    }
    Ok(out)
}

/// Full certificate record written by `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRecord {
    pub dgu_id: DguId,
    pub valid: bool,
    pub gamma: Vec<Vec<f64>>,
    pub beta: f64,
    pub zeta: f64,
    pub max_eig_q: f64,
    pub q_norm: f64,
    pub gain_norm: f64,
    pub gain_bound: f64,
    pub closed_loop_max_re: f64,
    pub residuals: BTreeMap<String, f64>,
    pub failures: Vec<String>,
}

impl CertificateRecord {
    pub fn new(dgu: DguId, c: &Certificate) -> Self {
        CertificateRecord {
            dgu_id: dgu,
            valid: c.is_valid(),
            gamma: rows(&c.gamma),
            beta: c.beta,
            zeta: c.zeta,
            max_eig_q: c.max_eig_q,
            q_norm: c.q_norm,
            gain_norm: c.gain_norm,
            gain_bound: c.gain_bound(),
            closed_loop_max_re: c.closed_loop_max_re,
            residuals: c.residuals.clone(),
            failures: c.failures.clone(),
        }
    }
}

/// How a scenario without explicit controllers obtains them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisSettings {
    pub route: Route,
    pub alphas: [f64; 4],
}

impl Default for SynthesisSettings {
    fn default() -> Self {
        SynthesisSettings {
            route: Route::Analytic,
            alphas: [1.0; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub schema: u32,
    pub grid: GridFile,
    /// DGUs that plug in later are listed in their `PlugIn` events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controllers: Option<Vec<ControllerFile>>,
    #[serde(default)]
    pub synthesis: SynthesisSettings,
    #[serde(default)]
    pub refs: BTreeMap<DguId, [f64; 2]>,
    #[serde(default)]
    pub loads: BTreeMap<DguId, LoadModel>,
    #[serde(default)]
    pub initial_state: BTreeMap<DguId, [f64; 6]>,
    #[serde(default)]
    pub events: Vec<Event>,
    pub t_end: f64,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl ScenarioFile {
    pub fn from_scenario(sc: &Scenario) -> Self {
        ScenarioFile {
            schema: SCENARIO_SCHEMA,
            grid: GridFile::from_grid(&sc.grid0),
            controllers: Some(sc.controllers.values().map(|c| ControllerFile::new(c, None)).collect()),
            synthesis: SynthesisSettings::default(),
            refs: sc.refs0.clone(),
            loads: sc.loads0.clone(),
            initial_state: sc.initial_state.clone(),
            events: sc.events.clone(),
            t_end: sc.t_end,
            solver: sc.solver,
        }
    }

    /// Resolves the scenario, synthesizing controllers for every DGU that is
    /// ever present when none are given.
    pub fn to_scenario(&self) -> Result<Scenario> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(Error::Scenario(format!(
                "unsupported scenario schema {} (expected {SCENARIO_SCHEMA})",
                self.schema
            )));
        }
        let grid0 = self.grid.to_grid()?;
        let controllers = match &self.controllers {
            Some(files) => controllers_from_files(files)?,
            None => {
                let mut all = grid0.clone();
                for e in &self.events {
                    if let crate::sim::EventKind::PlugIn { dgu, .. } = &e.kind {
                        all = GridSpec::new_unchecked(all.omega0, all.sigma_bar, all.dgus().copied().chain([*dgu]), all.lines().copied())?;
                    }
                }
                let opts = SynthesisOptions {
                    route: self.synthesis.route,
                    alphas: self.synthesis.alphas,
                    ..SynthesisOptions::for_grid(&grid0)
                };
                crate::synthesis::synthesize_all(&all, &opts)?
                    .into_iter()
                    .map(|(k, (c, _))| (k, c))
                    .collect()
            }
        };
        let sc = Scenario {
            grid0,
            controllers,
            refs0: self.refs.clone(),
            loads0: self.loads.clone(),
            initial_state: self.initial_state.clone(),
            events: self.events.clone(),
            t_end: self.t_end,
            solver: self.solver,
        };
        sc.validate()?;
        Ok(sc)
    }
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Shortest representation that round-trips exactly.
fn num(out: &mut String, v: f64) {
    let _ = write!(out, "{v:?}");
}

/// Writes the trajectory as CSV, one row per (time, DGU).
pub fn write_trajectory_csv(traj: &Trajectory, w: &mut impl Write) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    let mut line = String::with_capacity(256);
    for f in &traj.frames {
        for s in &f.dgus {
            line.clear();
            num(&mut line, f.t);
            let _ = write!(line, ",{}", s.dgu);
            for v in s.x.iter().chain(&s.u) {
                line.push(',');
                num(&mut line, *v);
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
    }
    Ok(())
}

/// Reads a trajectory CSV back. References, events and the step are not part of
/// the format; `step_s` and `omega0` are supplied by the caller.
pub fn read_trajectory_csv(r: impl BufRead, step_s: f64, omega0: f64) -> Result<Trajectory> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    fn norm(s: &str) -> Vec<&str> {
        s.split(',').map(str::trim).collect()
    }
    if norm(&header) != norm(TRAJECTORY_HEADER) {
        return Err(Error::Scenario(format!("unexpected trajectory header {header:?}")));
    }
    let mut frames: Vec<Frame> = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Scenario(format!("malformed trajectory row {}", n + 2));
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 10 {
            return Err(bad());
        }
        let t: f64 = cells[0].parse().map_err(|_| bad())?;
        let dgu = DguId(cells[1].parse().map_err(|_| bad())?);
        let mut v = [0.0; 8];
        for (k, c) in cells[2..].iter().enumerate() {
            v[k] = c.parse().map_err(|_| bad())?;
        }
        let sample = DguSample {
            dgu,
            x: [v[0], v[1], v[2], v[3], v[4], v[5]],
            u: [v[6], v[7]],
            z_ref: [0.0, 0.0],
        };
        match frames.last_mut() {
            Some(f) if f.t == t => f.dgus.push(sample),
            _ => frames.push(Frame { t, dgus: vec![sample] }),
        }
    }
    Ok(Trajectory {
        step_s,
        omega0,
        frames,
        events: Vec::new(),
    })
}
