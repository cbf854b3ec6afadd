//! Tracking, settling and frequency metrics of a trajectory.
//!
//! The instantaneous frequency of a PCC voltage is
//! `f = ω0/2π + (1/2π) dφ/dt` with `φ = atan2(V_q, V_d)`. The unwrapped phase is
//! smoothed with a centred moving average of [`MetricsOptions::frequency_window_s`]
//! before a central difference, which keeps the step spikes of events from
//! dominating the trace.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::Trajectory;
use crate::error::{Error, Result};
use crate::model::DguId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsOptions {
    pub frequency_window_s: f64,
    /// Frequency is undefined where `|V_dq|` is below this.
    pub amplitude_floor: f64,
    /// Absolute error threshold (pu) used for recovery times.
    pub tracking_threshold: f64,
    /// Relative band used for settling times.
    pub settling_band: f64,
    /// Fraction of each window averaged for steady-state values.
    pub steady_fraction: f64,
}

impl Default for MetricsOptions {
    fn default() -> Self {
        MetricsOptions {
            frequency_window_s: 5e-3,
            amplitude_floor: 1e-3,
            tracking_threshold: 1e-3,
            settling_band: 0.02,
            steady_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DguWindowMetrics {
    /// Mean tracking error over the trailing part of the window (pu).
    pub steady_state_error: f64,
    /// Time after the window start at which the error last leaves the
    /// `settling_band · |z_ref|` band; `None` if it is still outside at the end.
    pub settling_time_s: Option<f64>,
    /// Same with the absolute `tracking_threshold`.
    pub recovery_time_s: Option<f64>,
    pub max_error: f64,
    pub max_frequency_deviation_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMetrics {
    pub start: f64,
    pub end: f64,
    pub events: Vec<String>,
    pub dgus: BTreeMap<DguId, DguWindowMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DguMetrics {
    pub final_error: f64,
    pub steady_state_error: f64,
    /// Mean frequency over the trailing part of the run (Hz).
    pub steady_frequency_hz: Option<f64>,
    pub max_frequency_deviation_hz: Option<f64>,
    /// Phase RMS voltage `|V_dq| / √2` at the end of the run.
    pub final_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub nominal_frequency_hz: f64,
    pub options: MetricsOptions,
    pub windows: Vec<WindowMetrics>,
    pub dgus: BTreeMap<DguId, DguMetrics>,
    pub max_frequency_deviation_hz: Option<f64>,
    pub max_steady_frequency_deviation_hz: Option<f64>,
}

/// Per-DGU frequency trace aligned with `traj.frames`; `None` where the DGU is
/// absent or its voltage amplitude is below the floor.
pub fn frequency_trace(traj: &Trajectory, opts: &MetricsOptions) -> BTreeMap<DguId, Vec<Option<f64>>> {
    let f0 = traj.omega0 / (2.0 * PI);
    let n = traj.frames.len();
    let mut ids: Vec<DguId> = traj.frames.iter().flat_map(|f| f.dgus.iter().map(|s| s.dgu)).collect();
    ids.sort();
    ids.dedup();
    let mut out = BTreeMap::new();
    for id in ids {
        let mut trace = vec![None; n];
        let mut phase: Vec<Option<f64>> = traj
            .frames
            .iter()
            .map(|f| {
                f.dgus.iter().find(|s| s.dgu == id).and_then(|s| {
                    let [d, q] = s.voltage();
                    (d.hypot(q) >= opts.amplitude_floor).then(|| q.atan2(d))
                })
            })
            .collect();
        let mut k = 0;
        while k < n {
            if phase[k].is_none() {
                k += 1;
                continue;
            }
            let start = k;
            while k < n && phase[k].is_some() {
                k += 1;
            }
            let run = unwrap(&phase[start..k].iter().map(|p| p.unwrap()).collect::<Vec<_>>());
            let times: Vec<f64> = traj.frames[start..k].iter().map(|f| f.t).collect();
            for (i, f) in run_frequency(&run, &times, opts.frequency_window_s).into_iter().enumerate() {
                trace[start + i] = f.map(|df| f0 + df);
            }
            for p in &mut phase[start..k] {
                *p = None;
            }
        }
        out.insert(id, trace);
    }
    out
}

fn unwrap(phase: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phase.len());
    let mut offset = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let d = p - phase[i - 1];
            if d > PI {
                offset -= 2.0 * PI;
            } else if d < -PI {
                offset += 2.0 * PI;
            }
        }
        out.push(p + offset);
    }
    out
}

/// Frequency deviation (Hz) of one contiguous run of unwrapped phase samples.
fn run_frequency(phase: &[f64], times: &[f64], window: f64) -> Vec<Option<f64>> {
    let n = phase.len();
    if n < 3 {
        return vec![None; n];
    }
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    let half = (window / dt / 2.0).round() as usize;
    // Symmetric window, shrunk at the ends so that a linear phase stays linear.
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let w = half.min(i).min(n - 1 - i);
            let base = phase[i - w];
            let dev: f64 = phase[i - w..=i + w].iter().map(|p| p - base).sum();
            base + dev / (2 * w + 1) as f64
        })
        .collect();
    (0..n)
        .map(|i| {
            let (a, b) = if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            Some((smooth[b] - smooth[a]) / (times[b] - times[a]) / (2.0 * PI))
        })
        .collect()
}

fn max_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.max(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

pub fn compute_metrics(traj: &Trajectory, opts: &MetricsOptions) -> Result<Metrics> {
    if traj.frames.is_empty() {
        return Err(Error::Scenario("cannot compute metrics of an empty trajectory".into()));
    }
    let f0 = traj.omega0 / (2.0 * PI);
    let freq = frequency_trace(traj, opts);
    let t_last = traj.frames.last().unwrap().t;

    let mut bounds: Vec<(f64, Vec<String>)> = vec![(traj.frames[0].t, Vec::new())];
    for ev in &traj.events {
        let t = ev.step as f64 * traj.step_s;
        match bounds.last_mut() {
            Some((s, names)) if (*s - t).abs() < 0.5 * traj.step_s => names.push(ev.description.clone()),
            _ => bounds.push((t, vec![ev.description.clone()])),
        }
    }

    let mut windows = Vec::new();
    for (w, (start, names)) in bounds.iter().enumerate() {
        let end = bounds.get(w + 1).map(|b| b.0).unwrap_or(t_last);
        let last_window = w + 1 == bounds.len();
        let idx: Vec<usize> = (0..traj.frames.len())
            .filter(|&i| {
                let t = traj.frames[i].t;
                t >= *start && (t < end || (last_window && t <= end))
            })
            .collect();
        if idx.is_empty() {
            continue;
        }
        let tail_from = end - opts.steady_fraction * (end - start);
        let mut dgus = BTreeMap::new();
        let ids: Vec<DguId> = traj.frames[idx[0]].dgus.iter().map(|s| s.dgu).collect();
        for id in ids {
            let mut tail = Vec::new();
            let mut max_error = 0.0f64;
            let mut last_out_band = None;
            let mut last_out_thresh = None;
            let mut max_df: Option<f64> = None;
            let mut last_err = 0.0;
            for &i in &idx {
                let f = &traj.frames[i];
                let Some(s) = f.dgus.iter().find(|s| s.dgu == id) else { continue };
                let e = s.tracking_error();
                let band = opts.settling_band * s.z_ref[0].hypot(s.z_ref[1]);
                max_error = max_error.max(e);
                if e > band {
                    last_out_band = Some(f.t);
                }
                if e > opts.tracking_threshold {
                    last_out_thresh = Some(f.t);
                }
                if f.t >= tail_from {
                    tail.push(e);
                }
                if let Some(Some(fr)) = freq.get(&id).map(|tr| tr[i]) {
                    max_df = max_opt(max_df, Some((fr - f0).abs()));
                }
                last_err = e;
            }
            let band_now = {
                let s = traj.frames[*idx.last().unwrap()].dgus.iter().find(|s| s.dgu == id);
                s.map(|s| opts.settling_band * s.z_ref[0].hypot(s.z_ref[1])).unwrap_or(0.0)
            };
            let settle = |last: Option<f64>, limit: f64| match last {
                None => Some(0.0),
                Some(_) if last_err > limit => None,
                Some(t) => Some(t - start + traj.step_s),
            };
            let steady = if tail.is_empty() { last_err } else { tail.iter().sum::<f64>() / tail.len() as f64 };
            dgus.insert(
                id,
                DguWindowMetrics {
                    steady_state_error: steady,
                    settling_time_s: settle(last_out_band, band_now),
                    recovery_time_s: settle(last_out_thresh, opts.tracking_threshold),
                    max_error,
                    max_frequency_deviation_hz: max_df,
                },
            );
        }
        windows.push(WindowMetrics {
            start: *start,
            end,
            events: names.clone(),
            dgus,
        });
    }

    let tail_from = t_last - opts.steady_fraction * (t_last - traj.frames[0].t);
    let mut dgus = BTreeMap::new();
    let mut max_dev = None;
    let mut max_steady_dev = None;
    for (id, tr) in &freq {
        let series: Vec<(usize, f64, super::DguSample)> = traj
            .frames
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.dgus.iter().find(|s| s.dgu == *id).map(|s| (i, f.t, *s)))
            .collect();
        let Some(&(_, _, last)) = series.last() else { continue };
        let tail: Vec<&(usize, f64, super::DguSample)> = series.iter().filter(|(_, t, _)| *t >= tail_from).collect();
        let steady = tail.iter().map(|(_, _, s)| s.tracking_error()).sum::<f64>() / tail.len().max(1) as f64;
        let tail_f: Vec<f64> = tail.iter().filter_map(|(i, _, _)| tr[*i]).collect();
        let steady_f = (!tail_f.is_empty()).then(|| tail_f.iter().sum::<f64>() / tail_f.len() as f64);
        let dev = tr.iter().flatten().map(|f| (f - f0).abs()).fold(None, |a, b| max_opt(a, Some(b)));
        max_dev = max_opt(max_dev, dev);
        max_steady_dev = max_opt(max_steady_dev, steady_f.map(|f| (f - f0).abs()));
        let [d, q] = last.voltage();
        dgus.insert(
            *id,
            DguMetrics {
                final_error: last.tracking_error(),
                steady_state_error: steady,
                steady_frequency_hz: steady_f,
                max_frequency_deviation_hz: dev,
                final_rms: d.hypot(q) / 2f64.sqrt(),
            },
        );
    }

    Ok(Metrics {
        nominal_frequency_hz: f0,
        options: *opts,
        windows,
        dgus,
        max_frequency_deviation_hz: max_dev,
        max_steady_frequency_deviation_hz: max_steady_dev,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{DguSample, Frame};
    use super::*;

    fn synthetic(f: impl Fn(f64) -> [f64; 2], n: usize, dt: f64) -> Trajectory {
        Trajectory {
            step_s: dt,
            omega0: 2.0 * PI * 50.0,
            frames: (0..n)
                .map(|k| {
                    let t = k as f64 * dt;
                    let v = f(t);
                    Frame {
                        t,
                        dgus: vec![DguSample {
                            dgu: DguId(1),
                            x: [v[0], v[1], 0.0, 0.0, 0.0, 0.0],
                            u: [0.0; 2],
                            z_ref: [0.6, 0.5],
                        }],
                    }
                })
                .collect(),
            events: Vec::new(),
        }
    }

    #[test]
    fn stationary_vector_is_nominal() {
        let tr = synthetic(|_| [0.6, 0.5], 1000, 1e-4);
        let m = compute_metrics(&tr, &MetricsOptions::default()).unwrap();
        assert!(m.max_frequency_deviation_hz.unwrap() < 1e-12);
        assert!(m.dgus[&DguId(1)].final_error < 1e-15);
        assert_eq!(m.windows[0].dgus[&DguId(1)].settling_time_s, Some(0.0));
    }

    #[test]
    fn rotating_vector_shifts_frequency() {
        let tr = synthetic(|t| [t.cos(), t.sin()], 20000, 1e-4);
        let trace = frequency_trace(&tr, &MetricsOptions::default());
        let expected = 50.0 + 1.0 / (2.0 * PI);
        for f in trace[&DguId(1)].iter().flatten() {
            assert!((f - expected).abs() < 1e-9, "{f}");
        }
    }

    #[test]
    fn fast_rotation_unwraps() {
        let tr = synthetic(|t| [(300.0 * t).cos(), (300.0 * t).sin()], 5000, 1e-4);
        let m = compute_metrics(&tr, &MetricsOptions::default()).unwrap();
        let f = m.dgus[&DguId(1)].steady_frequency_hz.unwrap();
        assert!((f - 50.0 - 300.0 / (2.0 * PI)).abs() < 1e-6);
    }

    #[test]
    fn low_amplitude_is_undefined() {
        let tr = synthetic(|_| [1e-5, 0.0], 100, 1e-4);
        let trace = frequency_trace(&tr, &MetricsOptions::default());
        assert!(trace[&DguId(1)].iter().all(Option::is_none));
    }

    #[test]
    fn settling_of_exponential_approach() {
        let tr = synthetic(|t| [0.6 - 0.1 * (-100.0 * t).exp(), 0.5], 2001, 1e-4);
        let m = compute_metrics(&tr, &MetricsOptions::default()).unwrap();
        let w = &m.windows[0].dgus[&DguId(1)];
        // 0.1·e^{−100t} ≤ 1e−3 at t = ln(100)/100.
        let expected = (100.0f64).ln() / 100.0;
        assert!((w.recovery_time_s.unwrap() - expected).abs() <= 2e-4);
    }
}
