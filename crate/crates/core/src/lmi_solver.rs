//! Small dense LMI solver: log-det barrier interior point with damped Newton steps.
//!
//! A program minimizes `cᵀz` subject to affine blocks `F(z) = F₀ + Σ z_k F_k`
//! carrying a sign requirement. Blocks are tiny (≤ 8×8) and the variable count is
//! a few dozen at most, so every Newton system is formed densely.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    /// `F(z) ⪰ 0`
    Psd,
    /// `F(z) ⪯ 0`
    Nsd,
    /// `F(z) ≻ 0`, enforced as `F(z) ⪰ δI`
    Pd,
    /// `F(z) ≺ 0`, enforced as `F(z) ⪯ −δI`
    Nd,
}

impl Sense {
    fn sign(self) -> f64 {
        match self {
            Sense::Psd | Sense::Pd => 1.0,
            Sense::Nsd | Sense::Nd => -1.0,
        }
    }

    fn strict(self) -> bool {
        matches!(self, Sense::Pd | Sense::Nd)
    }
}

#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub name: String,
    pub sense: Sense,
    pub f0: DMatrix<f64>,
    /// Sparse list of `(variable, F_k)`; repeated variables accumulate.
    pub terms: Vec<(usize, DMatrix<f64>)>,
    /// Scale of the strict margin; `max(‖F₀‖_F, 1)` when unset.
    pub margin_scale: Option<f64>,
}

impl LmiBlock {
    pub fn new(name: impl Into<String>, dim: usize, sense: Sense) -> Self {
        LmiBlock {
            name: name.into(),
            sense,
            f0: DMatrix::zeros(dim, dim),
            terms: Vec::new(),
            margin_scale: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.f0.nrows()
    }

    pub fn with_constant(mut self, f0: DMatrix<f64>) -> Self {
        self.f0 = f0;
        self
    }

    pub fn add_constant(&mut self, r: usize, c: usize, m: &DMatrix<f64>) {
        let mut v = self.f0.view_mut((r, c), m.shape());
        v += m;
    }

    pub fn add_term(&mut self, var: usize, fk: DMatrix<f64>) {
        self.terms.push((var, fk));
    }

    /// Adds `coeff` at `(r, c)` and its mirror `(c, r)` for variable `var`.
    pub fn add_sym_entry(&mut self, var: usize, r: usize, c: usize, coeff: f64) {
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        m[(r, c)] += coeff;
        if r != c {
            m[(c, r)] += coeff;
        }
        self.terms.push((var, m));
    }

    /// `F(z)` before orientation and margin.
    pub fn eval(&self, z: &[f64]) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (k, fk) in &self.terms {
            f += fk * z[*k];
        }
        f
    }
}

#[derive(Debug, Clone)]
pub struct LmiProgram {
    pub n_vars: usize,
    pub cost: DVector<f64>,
    pub blocks: Vec<LmiBlock>,
}

impl LmiProgram {
    pub fn new(n_vars: usize) -> Self {
        LmiProgram {
            n_vars,
            cost: DVector::zeros(n_vars),
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, block: LmiBlock) {
        self.blocks.push(block);
    }

    pub fn validate(&self) -> Result<()> {
        if self.cost.len() != self.n_vars {
            return Err(Error::Lmi(format!(
                "cost has length {} but program has {} variables",
                self.cost.len(),
                self.n_vars
            )));
        }
        for b in &self.blocks {
            let d = b.dim();
            if b.f0.ncols() != d || d == 0 {
                return Err(Error::Lmi(format!("block {} has non-square constant term", b.name)));
            }
            if !is_symmetric(&b.f0) {
                return Err(Error::Lmi(format!("block {} constant term is not symmetric", b.name)));
            }
            for (k, fk) in &b.terms {
                if *k >= self.n_vars {
                    return Err(Error::Lmi(format!("block {} references variable {k} out of range", b.name)));
                }
                if fk.shape() != (d, d) {
                    return Err(Error::Lmi(format!(
                        "block {} variable {k}: coefficient is {}x{}, block is {d}x{d}",
                        b.name,
                        fk.nrows(),
                        fk.ncols()
                    )));
                }
                if !is_symmetric(fk) {
                    return Err(Error::Lmi(format!("block {} variable {k}: coefficient not symmetric", b.name)));
                }
            }
        }
        Ok(())
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.norm().max(f64::MIN_POSITIVE);
    (m - m.transpose()).norm() <= 1e-12 * scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub feas_tol: f64,
    pub gap_tol: f64,
    /// Margin for strict blocks, relative to each block's margin scale.
    pub strict_margin: f64,
    /// Cap on the total number of Newton steps (phase I included).
    pub max_iter: usize,
    /// Barrier parameter growth factor.
    pub mu: f64,
    /// Box `|z_k| ≤ R` that keeps the phase-I problem bounded.
    pub phase_one_bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            feas_tol: 1e-8,
            gap_tol: 1e-8,
            strict_margin: 1e-9,
            max_iter: 200,
            mu: 20.0,
            phase_one_bound: 1e8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct LmiSolution {
    pub z: Vec<f64>,
    pub status: Status,
    pub objective: f64,
    /// Smallest eigenvalue over all blocks after orienting each to `⪰ 0`.
    pub worst_block_mineig: f64,
    pub iterations: usize,
}

/// Pluggable solver backend; the barrier method below is the reference one.
pub trait LmiBackend {
    fn solve(&self, prog: &LmiProgram, opts: &SolverOptions, start: Option<&[f64]>) -> Result<LmiSolution>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BarrierSolver;

impl LmiBackend for BarrierSolver {
    fn solve(&self, prog: &LmiProgram, opts: &SolverOptions, start: Option<&[f64]>) -> Result<LmiSolution> {
        solve_from(prog, opts, start)
    }
}

pub fn solve(prog: &LmiProgram, opts: &SolverOptions) -> Result<LmiSolution> {
    solve_from(prog, opts, None)
}

/// Solves `prog`, starting from `start` when it is strictly feasible and running
/// a phase-I problem otherwise.
pub fn solve_from(prog: &LmiProgram, opts: &SolverOptions, start: Option<&[f64]>) -> Result<LmiSolution> {
    prog.validate()?;
    if let Some(z) = start {
        if z.len() != prog.n_vars {
            return Err(Error::Lmi(format!("start point has length {}, expected {}", z.len(), prog.n_vars)));
        }
    }
    let barrier = Barrier::new(prog, opts);
    let mut budget = opts.max_iter;

    let z0 = match start.filter(|z| barrier.interior(z)) {
        Some(z) => z.to_vec(),
        None => match phase_one(&barrier, opts, &mut budget) {
            PhaseOne::Found(z) => z,
            PhaseOne::Infeasible(z) => return Ok(barrier.finish(z, Status::Infeasible, opts.max_iter - budget)),
            PhaseOne::Exhausted(z) => return Ok(barrier.finish(z, Status::MaxIter, opts.max_iter - budget)),
        },
    };

    let c = prog.cost.as_slice();
    let m = barrier.total_dim() as f64;
    let mut z = z0;
    let mut t = barrier.initial_t(&z, c);
    loop {
        let Some(zc) = barrier.center(&z, c, t, &mut budget) else {
            return Ok(barrier.finish(z, Status::MaxIter, opts.max_iter));
        };
        z = zc;
        let obj = dot(c, &z);
        if m / t <= opts.gap_tol * (1.0 + obj.abs()) {
            let status = if barrier.satisfied(&z, opts.feas_tol) {
                Status::Optimal
            } else {
                Status::MaxIter
            };
            return Ok(barrier.finish(z, status, opts.max_iter - budget));
        }
        if budget == 0 {
            return Ok(barrier.finish(z, Status::MaxIter, opts.max_iter));
        }
        t *= opts.mu;
    }
}

enum PhaseOne {
    Found(Vec<f64>),
    Infeasible(Vec<f64>),
    Exhausted(Vec<f64>),
}

/// Minimizes `s` subject to `G_b(z) + sI ⪰ 0`, `s ≥ −1` and `|z_k| ≤ R` until `s < 0`.
fn phase_one(barrier: &Barrier, opts: &SolverOptions, budget: &mut usize) -> PhaseOne {
    let n = barrier.n;
    let z = vec![0.0; n];
    let worst = barrier.blocks.iter().map(|b| min_eig(&b.eval(&z))).fold(f64::INFINITY, f64::min);
    let s0 = (-worst).max(0.0) + 1.0;

    let mut shifted = barrier.clone();
    shifted.n = n + 1;
    for b in &mut shifted.blocks {
        let d = b.f0.nrows();
        b.coeffs.push(DMatrix::identity(d, d));
        b.active.push(n);
    }
    let mut floor_coeffs = vec![DMatrix::zeros(1, 1); n];
    floor_coeffs.push(DMatrix::identity(1, 1));
    shifted.blocks.push(OrientedBlock {
        f0: DMatrix::identity(1, 1),
        coeffs: floor_coeffs,
        active: vec![n],
    });
    for k in 0..n {
        for sign in [1.0, -1.0] {
            let mut coeffs = vec![DMatrix::zeros(1, 1); n + 1];
            coeffs[k][(0, 0)] = sign;
            shifted.blocks.push(OrientedBlock {
                f0: DMatrix::from_element(1, 1, opts.phase_one_bound),
                coeffs,
                active: vec![k],
            });
        }
    }
    let mut c = vec![0.0; n + 1];
    c[n] = 1.0;
    shifted.cost = c.clone();
    let m = shifted.total_dim() as f64;

    let mut w = z;
    w.push(s0);
    let mut t = shifted.initial_t(&w, &c);
    loop {
        let Some((wc, outcome)) = shifted.center_until(&w, &c, t, budget, |w| w[n] < 0.0) else {
            return PhaseOne::Exhausted(w[..n].to_vec());
        };
        w = wc;
        if outcome == Centering::Stopped || w[n] < 0.0 {
            return PhaseOne::Found(w[..n].to_vec());
        }
        // On the central path the optimal s is at least s − m/t.
        if outcome == Centering::Converged && w[n] - m / t > opts.feas_tol {
            return PhaseOne::Infeasible(w[..n].to_vec());
        }
        if m / t <= opts.feas_tol * 1e-3 {
            return PhaseOne::Infeasible(w[..n].to_vec());
        }
        t *= opts.mu;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Centering {
    Converged,
    Stalled,
    Stopped,
}

/// Blocks oriented to `G(z) = G₀ + Σ z_k G_k ⪰ 0` with margins folded into `G₀`.
#[derive(Debug, Clone)]
struct Barrier {
    n: usize,
    cost: Vec<f64>,
    blocks: Vec<OrientedBlock>,
    originals: Vec<(Sense, DMatrix<f64>, Vec<DMatrix<f64>>, f64)>,
}

#[derive(Debug, Clone)]
struct OrientedBlock {
    f0: DMatrix<f64>,
    /// Dense coefficients, one per variable (zero when absent).
    coeffs: Vec<DMatrix<f64>>,
    /// Variables with a nonzero coefficient.
    active: Vec<usize>,
}

impl OrientedBlock {
    fn eval(&self, z: &[f64]) -> DMatrix<f64> {
        let mut f = self.f0.clone();
        for (k, fk) in self.coeffs.iter().enumerate() {
            if z[k] != 0.0 {
                f += fk * z[k];
            }
        }
        f
    }
}

impl Barrier {
    fn new(prog: &LmiProgram, opts: &SolverOptions) -> Self {
        let mut blocks = Vec::new();
        let mut originals = Vec::new();
        for b in &prog.blocks {
            let d = b.dim();
            let s = b.sense.sign();
            let mut dense = vec![DMatrix::zeros(d, d); prog.n_vars];
            for (k, fk) in &b.terms {
                dense[*k] += fk;
            }
            let margin = if b.sense.strict() {
                opts.strict_margin * b.margin_scale.unwrap_or_else(|| b.f0.norm().max(1.0))
            } else {
                0.0
            };
            let f0 = &b.f0 * s - DMatrix::identity(d, d) * margin;
            let coeffs: Vec<_> = dense.iter().map(|m| m * s).collect();
            let active = (0..prog.n_vars).filter(|&k| coeffs[k].iter().any(|v| *v != 0.0)).collect();
            originals.push((b.sense, b.f0.clone(), dense, margin));
            blocks.push(OrientedBlock { f0, coeffs, active });
        }
        Barrier {
            n: prog.n_vars,
            cost: prog.cost.iter().copied().collect(),
            blocks,
            originals,
        }
    }

    fn total_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.f0.nrows()).sum()
    }

    fn interior(&self, z: &[f64]) -> bool {
        z.iter().all(|v| v.is_finite()) && self.blocks.iter().all(|b| Cholesky::new(b.eval(z)).is_some())
    }

    fn satisfied(&self, z: &[f64], feas_tol: f64) -> bool {
        self.originals.iter().all(|(sense, f0, coeffs, margin)| {
            let mut f = f0.clone();
            for (k, fk) in coeffs.iter().enumerate() {
                f += fk * z[k];
            }
            let e = min_eig(&(f * sense.sign()));
            if sense.strict() {
                e >= *margin * (1.0 - 1e-6)
            } else {
                e >= -feas_tol * (1.0 + f0.norm())
            }
        })
    }

    fn worst(&self, z: &[f64]) -> f64 {
        self.originals
            .iter()
            .map(|(sense, f0, coeffs, _)| {
                let mut f = f0.clone();
                for (k, fk) in coeffs.iter().enumerate() {
                    f += fk * z[k];
                }
                min_eig(&(f * sense.sign()))
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn finish(&self, z: Vec<f64>, status: Status, iterations: usize) -> LmiSolution {
        LmiSolution {
            worst_block_mineig: self.worst(&z),
            objective: dot(&self.cost, &z),
            z,
            status,
            iterations,
        }
    }

    /// `t cᵀz − Σ log det G_b(z)`, or `None` outside the domain.
    fn value(&self, z: &[f64], c: &[f64], t: f64) -> Option<f64> {
        let mut v = t * dot(c, z);
        for b in &self.blocks {
            let ch = Cholesky::new(b.eval(z))?;
            v -= 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        }
        v.is_finite().then_some(v)
    }

    /// Gradient and Hessian of the barrier term alone.
    fn derivatives(&self, z: &[f64]) -> Option<(DVector<f64>, DMatrix<f64>)> {
        let n = self.n;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for b in &self.blocks {
            let ch = Cholesky::new(b.eval(z))?;
            let l = ch.l();
            let mut s: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(b.active.len());
            for &k in &b.active {
                // S_k = L⁻¹ G_k L⁻ᵀ
                let x = l.solve_lower_triangular(&b.coeffs[k])?;
                let sk = l.solve_lower_triangular(&x.transpose())?;
                g[k] -= sk.trace();
                s.push((k, sk));
            }
            for (a, (ka, sa)) in s.iter().enumerate() {
                for (kb, sb) in &s[a..] {
                    let v = sa.dot(sb);
                    h[(*ka, *kb)] += v;
                    if ka != kb {
                        h[(*kb, *ka)] += v;
                    }
                }
            }
        }
        Some((g, h))
    }

    /// Picks the barrier weight that best balances cost and barrier gradients.
    fn initial_t(&self, z: &[f64], c: &[f64]) -> f64 {
        let Some((g, h)) = self.derivatives(z) else { return 1.0 };
        let c = DVector::from_column_slice(c);
        let (Some(hc), Some(hg)) = (newton_solve(&h, &c), newton_solve(&h, &g)) else {
            return 1.0;
        };
        let t = -c.dot(&hg) / c.dot(&hc);
        if t.is_finite() && t > 0.0 {
            t.clamp(1e-12, 1e12)
        } else {
            1.0
        }
    }

    fn center(&self, z: &[f64], c: &[f64], t: f64, budget: &mut usize) -> Option<Vec<f64>> {
        self.center_until(z, c, t, budget, |_| false).map(|(z, _)| z)
    }

    /// Damped Newton centering. Returns the new point and how centering ended;
    /// `None` once the Newton-step budget is exhausted.
    fn center_until(
        &self,
        z: &[f64],
        c: &[f64],
        t: f64,
        budget: &mut usize,
        stop: impl Fn(&[f64]) -> bool,
    ) -> Option<(Vec<f64>, Centering)> {
        let mut z = z.to_vec();
        let cv = DVector::from_column_slice(c);
        let mut f = self.value(&z, c, t)?;
        loop {
            let (gb, h) = self.derivatives(&z)?;
            let g = &cv * t + gb;
            let Some(dz) = newton_solve(&h, &g).map(|d| -d) else {
                return Some((z, Centering::Stalled));
            };
            let decrement = -g.dot(&dz);
            if !decrement.is_finite() || decrement < 0.0 {
                return Some((z, Centering::Stalled));
            }
            if decrement <= 1e-10 {
                return Some((z, Centering::Converged));
            }
            if *budget == 0 {
                return None;
            }
            *budget -= 1;

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, b)| a + step * b).collect();
                if let Some(ft) = self.value(&trial, c, t) {
                    if ft <= f - 0.01 * step * decrement {
                        accepted = Some((trial, ft));
                        break;
                    }
                }
                step *= 0.5;
            }
            let Some((trial, ft)) = accepted else {
                return Some((z, Centering::Stalled));
            };
            let progress = f - ft;
            z = trial;
            f = ft;
            if stop(&z) {
                return Some((z, Centering::Stopped));
            }
            if progress <= 1e-15 * f.abs().max(1.0) {
                return Some((z, Centering::Stalled));
            }
        }
    }
}

/// Solves `H x = g` with Jacobi scaling, falling back to a regularized solve.
fn newton_solve(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let d = DVector::from_iterator(n, h.diagonal().iter().map(|v| if *v > 0.0 { 1.0 / v.sqrt() } else { 1.0 }));
    let mut hs = h.clone();
    hs.fill_lower_triangle_with_upper_triangle();
    for i in 0..n {
        for j in 0..n {
            hs[(i, j)] *= d[i] * d[j];
        }
    }
    let gs = g.component_mul(&d);
    let mut reg = 0.0;
    for _ in 0..8 {
        let mut m = hs.clone();
        for i in 0..n {
            m[(i, i)] += reg;
        }
        if let Some(ch) = Cholesky::new(m) {
            let x = ch.solve(&gs).component_mul(&d);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        reg = if reg == 0.0 { 1e-12 } else { reg * 100.0 };
    }
    None
}

pub(crate) fn min_eig(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
