//! `pnpmg` command-line front end.
//!
//! Exit codes: 0 success, 1 stability verdict not stable, 2 synthesis failure,
//! 3 I/O or format error, 4 simulation divergence. Errors are reported on
//! stderr as a single JSON object.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pnpmg::analysis::{self, LasalleReport, StabilityReport};
use pnpmg::io::{self, CertificateRecord, ControllerFile, GridFile, ScenarioFile};
use pnpmg::sim::{self, metrics::MetricsOptions, BenchmarkConfig, Scenario, Trajectory};
use pnpmg::sweep::{self, SweepSpec};
use pnpmg::synthesis::{self, ControllerSet, Route, SynthesisOptions};
use pnpmg::{DguId, Error, GridSpec};
use serde::Serialize;
use serde_json::json;

pub const EXIT_OK: i32 = 0;
pub const EXIT_UNSTABLE: i32 = 1;
pub const EXIT_SYNTHESIS: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "pnpmg", version, about = "Plug-and-play voltage and frequency control for islanded AC microgrids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RouteArg {
    Lmi,
    Analytic,
}

impl From<RouteArg> for Route {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::Lmi => Route::Lmi,
            RouteArg::Analytic => Route::Analytic,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Overrides the grid's common ratio σ̄.
    #[arg(long = "sigma-bar")]
    pub sigma_bar: Option<f64>,
    /// Cost weights of (γ₁, γ₂, β, ζ).
    #[arg(long, value_name = "A1,A2,A3,A4", value_parser = parse_alphas)]
    pub alphas: Option<[f64; 4]>,
    #[arg(long, value_enum)]
    pub route: Option<RouteArg>,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long = "step-us")]
    pub step_us: Option<f64>,
    #[arg(long = "t-end")]
    pub t_end: Option<f64>,
    /// Seed of the benchmark's electrical parameters.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record every n-th integration step.
    #[arg(long = "record-stride")]
    pub record_stride: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize one local controller per DGU.
    Synth {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Certify collective stability of a grid under given controllers.
    Verify {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        controllers: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Random vectors per DGU in the invariant-set checks.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a scenario file or one of the canned benchmark scenarios.
    Simulate {
        #[arg(long, required_unless_present_any = ["benchmark", "clock_drift"])]
        scenario: Option<PathBuf>,
        #[arg(long)]
        benchmark: bool,
        #[arg(long = "clock-drift")]
        clock_drift: bool,
        /// Controllers to use instead of those in (or synthesized for) the scenario.
        #[arg(long)]
        controllers: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Materialize the 10-DGU benchmark, certify it and simulate it.
    Benchmark {
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long = "clock-drift")]
        clock_drift: bool,
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Run a feasibility or stability sweep described by a JSON spec.
    Sweep {
        spec: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// A failed command: exit code and the JSON object printed on stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub body: serde_json::Value,
}

impl Failure {
    fn from_error(code: i32, e: &Error) -> Self {
        let mut body = json!({ "kind": e.kind(), "message": e.to_string() });
        let dgu = match e {
            Error::Synthesis { dgu, .. } => Some(*dgu),
            Error::InvalidParameter { context, .. } => context.strip_prefix("DGU ").and_then(|s| s.parse().ok()).map(DguId),
            _ => None,
        };
        if let Some(d) = dgu {
            body["dgu"] = json!(d);
        }
        Failure {
            code,
            body: json!({ "error": body }),
        }
    }

    fn io(e: Error) -> Self {
        Self::from_error(EXIT_IO, &e)
    }

    fn synthesis(e: Error) -> Self {
        Self::from_error(EXIT_SYNTHESIS, &e)
    }
}

type CmdResult = Result<(), Failure>;

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(|e| Failure::io(e.into()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CmdResult {
    let text = io::to_json_pretty(v).map_err(Failure::io)?;
    write_file(path, &text)
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::io(e.into()))
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    io::read_json(path).map_err(|e| {
        let mut f = Failure::io(e);
        f.body["error"]["path"] = json!(path.display().to_string());
        f
    })
}

fn parse_alphas(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 4]>::try_from(v.as_slice()).map_err(|_| format!("expected 4 comma-separated weights, got {}", v.len()))
}

fn synthesis_options(grid: &GridSpec, args: &SynthArgs, default_route: Route) -> Result<SynthesisOptions, Failure> {
    let mut o = SynthesisOptions::for_grid(grid);
    o.route = args.route.map(Route::from).unwrap_or(default_route);
    if let Some(a) = &args.alphas {
        o.alphas = *a;
    }
    o.validate().map_err(Failure::synthesis)?;
    Ok(o)
}

fn with_sigma_bar(grid: GridSpec, sigma_bar: Option<f64>) -> Result<GridSpec, Failure> {
    match sigma_bar {
        None => Ok(grid),
        Some(sb) => GridSpec::new_unchecked(grid.omega0, sb, grid.dgus().copied(), grid.lines().copied()).map_err(Failure::synthesis),
    }
}

/// Synthesizes, writes `controllers.json` and `certificates.json`, and returns
/// the controllers; fails with exit 2 unless every certificate is valid.
fn synthesize_and_write(grid: &GridSpec, opts: &SynthesisOptions, out: &Path) -> Result<ControllerSet, Failure> {
    grid.validate().map_err(Failure::synthesis)?;
    let all = synthesis::synthesize_all(grid, opts).map_err(Failure::synthesis)?;
    let set: ControllerSet = all.iter().map(|(k, (c, _))| (*k, c.clone())).collect();
    let certs: BTreeMap<_, _> = all.iter().map(|(k, (_, c))| (*k, c.clone())).collect();
    write_json(&out.join("controllers.json"), &io::controllers_to_files(&set, &certs))?;
    let records: Vec<CertificateRecord> = certs.iter().map(|(k, c)| CertificateRecord::new(*k, c)).collect();
    write_json(&out.join("certificates.json"), &records)?;
    if let Some(bad) = records.iter().find(|r| !r.valid) {
        return Err(Failure {
            code: EXIT_SYNTHESIS,
            body: json!({ "error": {
                "kind": "certificate",
                "dgu": bad.dgu_id,
                "message": format!("certificate of DGU {} is invalid: {}", bad.dgu_id, bad.failures.join("; ")),
            }}),
        });
    }
    Ok(set)
}

pub fn cmd_synth(grid: &Path, out: &Path, args: &SynthArgs) -> CmdResult {
    let file: GridFile = read(grid)?;
    let grid = file.to_grid_unchecked().map_err(Failure::synthesis)?;
    let grid = with_sigma_bar(grid, args.sigma_bar)?;
    // Parameter errors are synthesis failures so that the offending DGU is named.
    for d in grid.dgus() {
        d.validate().map_err(Failure::synthesis)?;
    }
    let opts = synthesis_options(&grid, args, Route::Lmi)?;
    ensure_dir(out)?;
    synthesize_and_write(&grid, &opts, out).map(|_| ())
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub stable: bool,
    pub stability: StabilityReport,
    pub lasalle: Option<LasalleReport>,
    pub failures: Vec<String>,
}

pub fn verify(grid: &GridSpec, controllers: &ControllerSet, samples: usize, seed: u64) -> Result<VerifyReport, Error> {
    let stability = analysis::certify_stability(grid, controllers)?;
    let mut failures = stability.failures.clone();
    let lasalle = match analysis::check_lasalle_sets(grid, controllers, samples, seed) {
        Ok(r) => {
            failures.extend(r.failures.iter().map(|f| format!("lasalle {f}")));
            Some(r)
        }
        Err(e) => {
            failures.push(format!("lasalle: {e}"));
            None
        }
    };
    Ok(VerifyReport {
        stable: stability.verdict == analysis::Verdict::Stable && failures.is_empty(),
        stability,
        lasalle,
        failures,
    })
}

pub fn cmd_verify(grid: &Path, controllers: &Path, out: &Path, samples: usize, seed: u64) -> CmdResult {
    let grid: GridFile = read(grid)?;
    let grid = grid.to_grid().map_err(Failure::io)?;
    let files: Vec<ControllerFile> = read(controllers)?;
    let set = io::controllers_from_files(&files).map_err(Failure::io)?;
    ensure_dir(out)?;
    let report = verify(&grid, &set, samples, seed).map_err(|e| Failure::from_error(EXIT_UNSTABLE, &e))?;
    write_json(&out.join("stability_report.json"), &report)?;
    if report.stable {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_UNSTABLE,
            body: json!({ "error": {
                "kind": "not_stable",
                "verdict": report.stability.verdict,
                "message": report.failures.join("; "),
                "failures": report.failures,
            }}),
        })
    }
}

fn benchmark_config(sim: &SimArgs, synth: &SynthArgs) -> BenchmarkConfig {
    let mut cfg = BenchmarkConfig::default();
    if let Some(s) = sim.seed {
        cfg.seed = s;
    }
    if let Some(sb) = synth.sigma_bar {
        cfg.sigma_bar = sb;
    }
    if let Some(r) = synth.route {
        cfg.route = r.into();
    }
    apply_sim_args(&mut cfg.solver, &mut cfg.t_end, sim);
    cfg
}

fn apply_sim_args(solver: &mut sim::SolverConfig, t_end: &mut f64, sim: &SimArgs) {
    if let Some(h) = sim.step_us {
        solver.step_s = h * 1e-6;
    }
    if let Some(t) = sim.t_end {
        *t_end = t;
    }
    if let Some(s) = sim.record_stride {
        solver.record_stride = s;
    }
}

fn write_run_outputs(traj: &Trajectory, out: &Path) -> CmdResult {
    let f = fs::File::create(out.join("trajectory.csv")).map_err(|e| Failure::io(e.into()))?;
    let mut w = BufWriter::new(f);
    io::write_trajectory_csv(traj, &mut w).map_err(Failure::io)?;
    w.flush().map_err(|e| Failure::io(e.into()))?;

    let opts = MetricsOptions::default();
    let freq = sim::frequency_trace(traj, &opts);
    let mut text = String::from("t,dgu,f_hz,v_rms\n");
    for (i, fr) in traj.frames.iter().enumerate() {
        for s in &fr.dgus {
            let f = freq.get(&s.dgu).and_then(|tr| tr[i]);
            let rms = s.x[0].hypot(s.x[1]) / 2f64.sqrt();
            let f = f.map(|v| format!("{v:?}")).unwrap_or_default();
            text.push_str(&format!("{:?},{},{f},{rms:?}\n", fr.t, s.dgu));
        }
    }
    write_file(&out.join("frequency.csv"), &text)?;
    if !traj.frames.is_empty() {
        let m = sim::compute_metrics(traj, &opts).map_err(Failure::io)?;
        write_json(&out.join("metrics.json"), &m)?;
    } else {
        write_json(&out.join("metrics.json"), &json!({ "samples": 0 }))?;
    }
    Ok(())
}

fn run_and_write(sc: &Scenario, out: &Path) -> CmdResult {
    let (traj, err) = sim::simulate_partial(sc);
    write_run_outputs(&traj, out)?;
    match err {
        None => Ok(()),
        Some(e @ Error::Divergence { .. }) => Err(Failure::from_error(EXIT_DIVERGED, &e)),
        Some(e @ (Error::Io(_) | Error::Json(_))) => Err(Failure::io(e)),
        Some(e) => Err(Failure::from_error(EXIT_IO, &e)),
    }
}

pub fn cmd_simulate(
    scenario: Option<&Path>,
    benchmark: bool,
    clock_drift: bool,
    controllers: Option<&Path>,
    out: &Path,
    sim_args: &SimArgs,
    synth: &SynthArgs,
) -> CmdResult {
    let mut sc = if benchmark || clock_drift {
        let cfg = benchmark_config(sim_args, synth);
        let r = if clock_drift { sim::clock_drift_scenario(&cfg) } else { sim::benchmark_scenario(&cfg) };
        r.map_err(Failure::synthesis)?
    } else {
        let path = scenario.expect("clap enforces --scenario");
        let mut file: ScenarioFile = read(path)?;
        if let Some(r) = synth.route {
            file.synthesis.route = r.into();
        }
        if let Some(a) = &synth.alphas {
            file.synthesis.alphas = *a;
        }
        if let Some(sb) = synth.sigma_bar {
            file.grid.sigma_bar = sb;
        }
        let mut sc = file.to_scenario().map_err(|e| match e {
            Error::Synthesis { .. } => Failure::synthesis(e),
            e => Failure::io(e),
        })?;
        apply_sim_args(&mut sc.solver, &mut sc.t_end, sim_args);
        sc
    };
    if let Some(p) = controllers {
        let files: Vec<ControllerFile> = read(p)?;
        sc.controllers = io::controllers_from_files(&files).map_err(Failure::io)?;
    }
    ensure_dir(out)?;
    write_json(&out.join("scenario.json"), &ScenarioFile::from_scenario(&sc))?;
    run_and_write(&sc, out)
}

pub fn cmd_benchmark(out: &Path, clock_drift: bool, sim_args: &SimArgs, synth: &SynthArgs) -> CmdResult {
    let cfg = benchmark_config(sim_args, synth);
    ensure_dir(out)?;
    let bg = sim::bench::benchmark_grid(&cfg).map_err(Failure::synthesis)?;
    write_json(&out.join("grid.json"), &GridFile::from_grid(&bg.full))?;
    let opts = synthesis_options(&bg.full, synth, cfg.route)?;
    let controllers = synthesize_and_write(&bg.full, &opts, out)?;

    let mut reports = BTreeMap::new();
    let mut trip = bg.full.clone();
    for (a, b) in sim::bench::TRIPPED_EDGES {
        trip = pnpmg::model::mutate_topology(&trip, &pnpmg::model::TopologyChange::LineTrip { a: DguId(a), b: DguId(b) })
            .map_err(Failure::io)?;
    }
    let mut all_stable = true;
    for (name, g) in [("initial", &bg.grid0), ("after_plug_in", &bg.full), ("after_trip", &trip)] {
        let rep = verify(g, &controllers, 200, 0).map_err(|e| Failure::from_error(EXIT_UNSTABLE, &e))?;
        all_stable &= rep.stable;
        reports.insert(name, rep);
    }
    write_json(&out.join("stability_report.json"), &reports)?;

    let mut sc = sim::benchmark_scenario(&cfg).map_err(Failure::synthesis)?;
    sc.controllers = controllers;
    if clock_drift {
        sc = sim::bench::with_clock_shifts(sc, &sim::bench::CLOCK_SHIFTS).map_err(Failure::io)?;
    }
    write_json(&out.join("scenario.json"), &ScenarioFile::from_scenario(&sc))?;
    run_and_write(&sc, out)?;
    if all_stable {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_UNSTABLE,
            body: json!({ "error": { "kind": "not_stable", "message": "benchmark configuration is not certified stable" } }),
        })
    }
}

pub fn cmd_sweep(spec: &Path, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut spec: SweepSpec = read(spec)?;
    if let Some(s) = seed {
        match &mut spec {
            SweepSpec::Synthesis { seed, .. } | SweepSpec::Grids { seed, .. } => *seed = s,
        }
    }
    ensure_dir(out)?;
    let records = sweep::run_sweep(&spec);
    write_file(&out.join("summary.csv"), &sweep::summary_csv(&records))
}

pub fn run(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Synth { grid, out, synth } => cmd_synth(grid, out, synth),
        Command::Verify {
            grid,
            controllers,
            out,
            samples,
            seed,
        } => cmd_verify(grid, controllers, out, *samples, *seed),
        Command::Simulate {
            scenario,
            benchmark,
            clock_drift,
            controllers,
            out,
            sim,
            synth,
        } => cmd_simulate(
            scenario.as_deref(),
            *benchmark,
            *clock_drift,
            controllers.as_deref(),
            out,
            sim,
            synth,
        ),
        Command::Benchmark {
            out,
            clock_drift,
            sim,
            synth,
        } => cmd_benchmark(out, *clock_drift, sim, synth),
        Command::Sweep { spec, out, seed } => cmd_sweep(spec, out, *seed),
    }
}

/// Caps the global worker pool from `PNPMG_THREADS`, if set.
pub fn configure_threads() {
    if let Some(n) = std::env::var("PNPMG_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}
