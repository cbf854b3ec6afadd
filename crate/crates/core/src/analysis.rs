//! Collective stability certificates.
//!
//! With block-diagonal `P = diag(P_i)` the global Lyapunov derivative splits as
//! `Q = (a) + (b) + (c)`: local terms `Q_i`, the self-coupling terms
//! `Â_ξiᵀP_i + P_iÂ_ξi` and the edge terms `P_iÂ_ij + Â_jiᵀP_j`. Under the common
//! ratio `η_i / C_ti = σ̄`, `(b) + (c)` is a Laplacian on the voltage coordinates.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, DguId, Gain, GridSpec, Mat2, Mat6, AUG};
use crate::synthesis::{self, ControllerSet};

/// Largest eigenvalue of the global `Q` allowed, relative to `‖Q‖_F`.
pub const GLOBAL_Q_TOL: f64 = 1e-8;
/// Relative tolerance of the Laplacian structure checks.
pub const LAPLACIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GlobalLyapunov {
    pub ordering: Vec<DguId>,
    pub p: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub part_a: DMatrix<f64>,
    pub part_b: DMatrix<f64>,
    pub part_c: DMatrix<f64>,
    /// `‖Q − (a + b + c)‖_F / ‖Q‖_F`.
    pub decomposition_residual: f64,
}

impl GlobalLyapunov {
    pub fn max_eig(&self) -> f64 {
        sym_eigenvalues(&self.q).max()
    }
}

/// Checks `η_i = σ̄ C_ti` and the block structure of each `P_i`.
pub fn check_assumptions(grid: &GridSpec, controllers: &ControllerSet) -> Result<()> {
    for d in grid.dgus() {
        let c = controllers
            .get(&d.id)
            .ok_or_else(|| Error::Assumption(format!("DGU {} has no controller", d.id)))?;
        let expected = grid.sigma_bar * d.c_t;
        if (c.eta() - expected).abs() > 1e-9 * expected {
            return Err(Error::Assumption(format!(
                "DGU {}: eta = {} but sigma_bar * C_t = {}",
                d.id,
                c.eta(),
                expected
            )));
        }
        let off = c.p.fixed_view::<2, 4>(0, 2).amax().max(c.p.fixed_view::<4, 2>(2, 0).amax());
        let top = (c.p.fixed_view::<2, 2>(0, 0) - Mat2::identity() * c.eta()).amax();
        if off + top > 1e-12 * c.p.norm() {
            return Err(Error::Assumption(format!(
                "DGU {}: P is not of the form diag(eta I, P22) (residual {:.3e})",
                d.id,
                (off + top) / c.p.norm()
            )));
        }
    }
    Ok(())
}

pub fn build_global_lyapunov(grid: &GridSpec, controllers: &ControllerSet) -> Result<GlobalLyapunov> {
    check_assumptions(grid, controllers)?;
    build_global_lyapunov_unchecked(grid, controllers)
}

/// Same as [`build_global_lyapunov`] without the assumption checks; used to
/// exhibit what goes wrong when they fail.
pub fn build_global_lyapunov_unchecked(grid: &GridSpec, controllers: &ControllerSet) -> Result<GlobalLyapunov> {
    let gains: BTreeMap<DguId, Gain> = grid
        .dgu_ids()
        .into_iter()
        .map(|id| {
            controllers
                .get(&id)
                .map(|c| (id, c.k))
                .ok_or_else(|| Error::Assumption(format!("DGU {id} has no controller")))
        })
        .collect::<Result<_>>()?;
    let gm = model::assemble_global(grid, Some(&gains))?;
    let n = gm.ordering.len();
    let dim = n * AUG;
    let index = grid.block_index();

    let mut p = DMatrix::zeros(dim, dim);
    for (bi, id) in gm.ordering.iter().enumerate() {
        p.view_mut((bi * AUG, bi * AUG), (AUG, AUG)).copy_from(&controllers[id].p);
    }

    let mut part_a = DMatrix::zeros(dim, dim);
    let mut part_b = DMatrix::zeros(dim, dim);
    let mut part_c = DMatrix::zeros(dim, dim);
    for (bi, id) in gm.ordering.iter().enumerate() {
        let params = grid.dgu(*id).expect("ordering comes from the grid");
        let ctrl = &controllers[id];
        let f = ctrl.closed_loop(params, grid.omega0)?;
        let q = f.transpose() * ctrl.p + ctrl.p * f;
        let r0 = bi * AUG;
        part_a.view_mut((r0, r0), (AUG, AUG)).copy_from(&q);

        let xi = gm.a_xi.view((r0, r0), (AUG, AUG)).clone_owned();
        let pd = DMatrix::from_column_slice(AUG, AUG, ctrl.p.as_slice());
        part_b.view_mut((r0, r0), (AUG, AUG)).copy_from(&(xi.transpose() * &pd + &pd * xi));

        for (j, line) in grid.incident(*id) {
            let pj = &controllers[&j].p;
            let cj = grid.dgu(j).expect("line endpoints exist").c_t;
            let a_ij = model::augment_coupling(&model::build_coupling_block(line, params.c_t, grid.omega0)?);
            let a_ji = model::augment_coupling(&model::build_coupling_block(line, cj, grid.omega0)?);
            let blk: Mat6 = ctrl.p * a_ij + a_ji.transpose() * pj;
            let c0 = index[&j] * AUG;
            part_c.view_mut((r0, c0), (AUG, AUG)).copy_from(&blk);
        }
    }

    let f = gm.closed_loop().expect("gains were supplied");
    let q = f.transpose() * &p + &p * f;
    let sum = &part_a + &part_b + &part_c;
    let qn = q.norm();
    let decomposition_residual = if qn > 0.0 { (&q - &sum).norm() / qn } else { sum.norm() };
    Ok(GlobalLyapunov {
        ordering: gm.ordering,
        p,
        q,
        part_a,
        part_b,
        part_c,
        decomposition_residual,
    })
}

#[derive(Debug, Clone)]
pub struct CouplingLaplacian {
    pub ordering: Vec<DguId>,
    /// `ℒ = ℳ + 𝒢` on the stacked `(V_d, V_q)` coordinates.
    pub l: DMatrix<f64>,
    /// Block-diagonal part ℳ.
    pub m: DMatrix<f64>,
    /// Off-diagonal part 𝒢.
    pub g: DMatrix<f64>,
    pub max_eig: f64,
    pub row_sum_residual: f64,
    pub kernel_dim: usize,
}

/// Deletes the last four rows and columns of every 6×6 block of `(b) + (c)`
/// and validates the Laplacian structure of what remains.
pub fn extract_laplacian(gl: &GlobalLyapunov) -> Result<CouplingLaplacian> {
    let n = gl.ordering.len();
    let bc = &gl.part_b + &gl.part_c;
    let scale = bc.norm().max(f64::MIN_POSITIVE);
    let mut l = DMatrix::zeros(2 * n, 2 * n);
    for bi in 0..n {
        for bj in 0..n {
            let blk = bc.view((bi * AUG, bj * AUG), (AUG, AUG));
            let mut rest = 0.0f64;
            for r in 0..AUG {
                for c in 0..AUG {
                    if r < 2 && c < 2 {
                        l[(2 * bi + r, 2 * bj + c)] = blk[(r, c)];
                    } else {
                        rest = rest.max(blk[(r, c)].abs());
                    }
                }
            }
            if rest > LAPLACIAN_TOL * scale {
                return Err(Error::Structure(format!(
                    "block ({}, {}) of (b)+(c) has entries outside the voltage coordinates ({:.3e})",
                    gl.ordering[bi], gl.ordering[bj], rest
                )));
            }
            let b2 = l.view((2 * bi, 2 * bj), (2, 2));
            let off = b2[(0, 1)].abs().max(b2[(1, 0)].abs()) + (b2[(0, 0)] - b2[(1, 1)]).abs();
            if off > LAPLACIAN_TOL * scale {
                return Err(Error::Structure(format!(
                    "block ({}, {}) of the Laplacian is not a multiple of I2 ({:.3e})",
                    gl.ordering[bi], gl.ordering[bj], off
                )));
            }
            if bi != bj && b2[(0, 0)] < -LAPLACIAN_TOL * scale {
                return Err(Error::Structure(format!(
                    "off-diagonal block ({}, {}) of the Laplacian is negative",
                    gl.ordering[bi], gl.ordering[bj]
                )));
            }
        }
    }
    if (&l - l.transpose()).amax() > LAPLACIAN_TOL * scale {
        return Err(Error::Structure("Laplacian is not symmetric".into()));
    }
    let row_sum_residual = l.row_iter().map(|r| r.sum().abs()).fold(0.0, f64::max) / scale;
    if row_sum_residual > LAPLACIAN_TOL {
        return Err(Error::Structure(format!("Laplacian row sums are not zero ({row_sum_residual:.3e})")));
    }
    let mut m = DMatrix::zeros(2 * n, 2 * n);
    for bi in 0..n {
        m.view_mut((2 * bi, 2 * bi), (2, 2)).copy_from(&l.view((2 * bi, 2 * bi), (2, 2)));
    }
    let g = &l - &m;
    let eig = sym_eigenvalues(&l);
    let max_eig = eig.max();
    let lscale = l.norm().max(f64::MIN_POSITIVE);
    if max_eig > LAPLACIAN_TOL * lscale * (2 * n) as f64 {
        return Err(Error::Structure(format!("Laplacian has a positive eigenvalue {max_eig:.3e}")));
    }
    let kernel_dim = eig.iter().filter(|e| e.abs() <= 1e-10 * lscale).count();
    Ok(CouplingLaplacian {
        ordering: gl.ordering.clone(),
        l,
        m,
        g,
        max_eig,
        row_sum_residual,
        kernel_dim,
    })
}

/// The Laplacian predicted from line data alone: off-diagonal blocks `2σ̄R̃_ij I₂`.
pub fn expected_laplacian(grid: &GridSpec) -> Result<DMatrix<f64>> {
    let n = grid.num_dgus();
    let index = grid.block_index();
    let mut l = DMatrix::zeros(2 * n, 2 * n);
    for line in grid.lines() {
        let (rt, _) = line.admittance_parts(grid.omega0)?;
        let w = 2.0 * grid.sigma_bar * rt;
        let (i, j) = (index[&line.a], index[&line.b]);
        for k in 0..2 {
            l[(2 * i + k, 2 * j + k)] += w;
            l[(2 * j + k, 2 * i + k)] += w;
            l[(2 * i + k, 2 * i + k)] -= w;
            l[(2 * j + k, 2 * j + k)] -= w;
        }
    }
    Ok(l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Stable,
    Marginal,
    Unstable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentReport {
    pub dgus: Vec<DguId>,
    pub spectrum: Vec<[f64; 2]>,
    pub max_re: f64,
    /// Rounding resolution of the eigenvalue attaining `max_re`; eigenvalues with
    /// `|Re λ|` below their resolution count as on the axis.
    pub eig_tol: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub max_eig_q: f64,
    pub q_norm: f64,
    pub components: Vec<ComponentReport>,
    pub local_valid: BTreeMap<DguId, bool>,
    pub residuals: BTreeMap<String, f64>,
    pub failures: Vec<String>,
    pub verdict: Verdict,
}

impl StabilityReport {
    pub fn is_stable(&self) -> bool {
        self.verdict == Verdict::Stable && self.failures.is_empty()
    }
}

/// Eigenvalues of a general real matrix after diagonal balancing, sorted by real
/// then imaginary part.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    balanced_eigenvalues(m).0
}

/// Eigenvalues together with the Frobenius norm of the balanced matrix the QR
/// iteration actually ran on, which sets the scale of the rounding error.
fn balanced_eigenvalues(m: &DMatrix<f64>) -> (Vec<Complex64>, f64) {
    if m.nrows() == 0 {
        return (Vec::new(), 0.0);
    }
    let b = balance(m);
    let mut ev: Vec<Complex64> = b.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    (ev, b.norm())
}

/// Parlett–Reinsch balancing by powers of two; a similarity transform.
pub fn balance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let radix = 2.0f64;
    let mut done = false;
    let mut sweeps = 0;
    while !done && sweeps < 100 {
        done = true;
        sweeps += 1;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[(j, i)].abs();
                    r += a[(i, j)].abs();
                }
            }
            if c == 0.0 || r == 0.0 {
                continue;
            }
            let s = c + r;
            let mut f = 1.0;
            let mut cc = c;
            let mut rr = r;
            while cc < rr / radix {
                f *= radix;
                cc *= radix;
                rr /= radix;
            }
            while cc >= rr * radix {
                f /= radix;
                cc /= radix;
                rr *= radix;
            }
            if (cc + rr) < 0.95 * s {
                done = false;
                for j in 0..n {
                    a[(i, j)] /= f;
                }
                for j in 0..n {
                    a[(j, i)] *= f;
                }
            }
        }
    }
    a
}

fn classify(spectrum: &[Complex64], norm: f64) -> (f64, f64, Verdict) {
    let max_re = spectrum.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    let eig_tol = 64.0 * f64::EPSILON * norm;
    let verdict = if max_re < -eig_tol {
        Verdict::Stable
    } else if max_re <= eig_tol {
        Verdict::Marginal
    } else {
        Verdict::Unstable
    };
    (max_re, eig_tol, verdict)
}

/// Classifies the spectrum of `f`.
///
/// Eigenvalues within the worst-case rounding distance of the axis are
/// recomputed from `f⁻¹`, where the slowest modes dominate. The two routes
/// round differently, so their disagreement (times a safety factor) serves as
/// the resolution of such an eigenvalue. A sign is only trusted when both agree
/// well inside it.
fn classify_matrix(f: &DMatrix<f64>) -> (Vec<Complex64>, f64, f64, Verdict) {
    const SAFETY: f64 = 8.0;
    let (spectrum, norm) = balanced_eigenvalues(f);
    let (max_re, eig_tol, verdict) = classify(&spectrum, norm);
    if verdict != Verdict::Marginal {
        return (spectrum, max_re, eig_tol, verdict);
    }
    let Some(inv) = f.clone().try_inverse().filter(|m| m.iter().all(|v| v.is_finite())) else {
        return (spectrum, max_re, eig_tol, verdict);
    };
    let (mu, inv_norm) = balanced_eigenvalues(&inv);
    let mu_tol = 64.0 * f64::EPSILON * inv_norm;
    // (refined eigenvalue, its resolution); |δλ| ≈ |λ|² |δμ|.
    let refined: Vec<(Complex64, f64)> = spectrum
        .iter()
        .map(|&l| {
            if l.re < -eig_tol {
                return (l, eig_tol);
            }
            let li = mu
                .iter()
                .map(|m| m.inv())
                .min_by(|a, b| (a - l).norm().total_cmp(&(b - l).norm()))
                .expect("same dimension");
            let tol = (SAFETY * (li - l).norm()).max(li.norm_sqr() * mu_tol);
            if tol < eig_tol {
                (li, tol)
            } else {
                (l, eig_tol)
            }
        })
        .collect();
    let (lam, tol) = refined.iter().copied().max_by(|a, b| a.0.re.total_cmp(&b.0.re)).expect("non-empty");
    let verdict = if refined.iter().all(|(l, t)| l.re < -t) {
        Verdict::Stable
    } else if refined.iter().any(|(l, t)| l.re > *t) {
        Verdict::Unstable
    } else {
        Verdict::Marginal
    };
    (refined.iter().map(|r| r.0).collect(), lam.re, tol, verdict)
}

/// Spectrum of `Â + B̂K` for each connected component.
pub fn component_spectra(grid: &GridSpec, gains: &BTreeMap<DguId, Gain>) -> Result<Vec<ComponentReport>> {
    grid.connected_components()
        .into_iter()
        .map(|comp| {
            let sub = grid.subgrid(&comp);
            let gm = model::assemble_global(&sub, Some(gains))?;
            let f = gm.closed_loop().expect("gains were supplied");
            let (spectrum, max_re, eig_tol, verdict) = classify_matrix(&f);
            Ok(ComponentReport {
                dgus: comp,
                spectrum: spectrum.iter().map(|z| [z.re, z.im]).collect(),
                max_re,
                eig_tol,
                verdict,
            })
        })
        .collect()
}

/// Local certificates, global semidefiniteness, Laplacian structure and the
/// per-component closed-loop spectrum.
pub fn certify_stability(grid: &GridSpec, controllers: &ControllerSet) -> Result<StabilityReport> {
    let mut residuals = BTreeMap::new();
    let mut failures = Vec::new();
    let mut local_valid = BTreeMap::new();
    for d in grid.dgus() {
        let Some(c) = controllers.get(&d.id) else {
            return Err(Error::Assumption(format!("DGU {} has no controller", d.id)));
        };
        let cert = synthesis::verify_local(d, grid.omega0, c)?;
        local_valid.insert(d.id, cert.is_valid());
        for f in &cert.failures {
            failures.push(format!("DGU {}: {f}", d.id));
        }
    }

    let (max_eig_q, q_norm) = match build_global_lyapunov(grid, controllers) {
        Ok(gl) => {
            let max_eig_q = gl.max_eig();
            let q_norm = gl.q.norm();
            let rel = if q_norm > 0.0 { max_eig_q / q_norm } else { max_eig_q };
            residuals.insert("global_q_max_eig".into(), rel);
            residuals.insert("global_q_decomposition".into(), gl.decomposition_residual);
            if rel > GLOBAL_Q_TOL {
                failures.push(format!("global_q_max_eig: {rel:.3e} exceeds {GLOBAL_Q_TOL:.1e}"));
            }
            if gl.decomposition_residual > 1e-12 {
                failures.push(format!(
                    "global_q_decomposition: residual {:.3e} exceeds 1e-12",
                    gl.decomposition_residual
                ));
            }
            match extract_laplacian(&gl) {
                Ok(lap) => {
                    residuals.insert("laplacian_row_sum".into(), lap.row_sum_residual);
                    let expected = expected_laplacian(grid)?;
                    let dev = (&lap.l - &expected).norm() / expected.norm().max(f64::MIN_POSITIVE);
                    residuals.insert("laplacian_vs_lines".into(), dev);
                    if dev > 1e-10 {
                        failures.push(format!("laplacian_vs_lines: residual {dev:.3e} exceeds 1e-10"));
                    }
                    let comps = grid.connected_components().len();
                    if lap.kernel_dim != 2 * comps {
                        failures.push(format!(
                            "laplacian_kernel: dimension {} but {} components",
                            lap.kernel_dim, comps
                        ));
                    }
                }
                Err(e) => failures.push(format!("laplacian: {e}")),
            }
            (max_eig_q, q_norm)
        }
        Err(e) => {
            failures.push(format!("assumptions: {e}"));
            (f64::NAN, f64::NAN)
        }
    };

    let gains: BTreeMap<DguId, Gain> = controllers.iter().map(|(id, c)| (*id, c.k)).collect();
    let components = component_spectra(grid, &gains)?;
    let verdict = components
        .iter()
        .map(|c| c.verdict)
        .max_by_key(|v| match v {
            Verdict::Stable => 0,
            Verdict::Marginal => 1,
            Verdict::Unstable => 2,
        })
        .unwrap_or(Verdict::Stable);
    Ok(StabilityReport {
        max_eig_q,
        q_norm,
        components,
        local_valid,
        residuals,
        failures,
        verdict,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LasalleReport {
    /// Largest `|w̄ᵀQ_iw̄| / (‖Q_i‖_F ‖w̄‖²)` over the sampled vectors.
    pub max_local_quadratic: f64,
    /// Largest `|xᵀQx| / (‖Q‖_F ‖x‖²)` over sampled global vectors in R.
    pub max_global_quadratic: f64,
    /// Largest `‖F₂₁ + σ̄Y₂₂‖ / ‖σ̄Y₂₂‖`.
    pub max_f21_residual: f64,
    /// Largest relative norm of `ℒ_i = −F₂₂σ̄⁻¹Y₃₃⁻¹ − F₂₃`.
    pub max_l_residual: f64,
    /// Largest relative residual of `σ̄⁻¹(K₁₂ + L_tÂ₂₂) + K₁₃Y₃₃ = 0`.
    pub max_k13_residual: f64,
    /// Smallest eigenvalue of `σ̄Y₂₂ − σ̄⁻¹Y₃₃⁻¹` (must be positive).
    pub min_alpha_matrix_eig: f64,
    pub failures: Vec<String>,
}

impl LasalleReport {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Exercises the invariant-set argument numerically.
///
/// Vectors `w̄ = [η⁻¹α, σ̄⁻¹β, Y₃₃β]` must annihilate the local quadratic forms,
/// global vectors with a shared voltage part and `β_i = σ̄⁻¹Y₃₃,ᵢ⁻¹γ_i` must
/// annihilate the global one, and the block identities behind the argument must hold.
pub fn check_lasalle_sets(grid: &GridSpec, controllers: &ControllerSet, n_samples: usize, seed: u64) -> Result<LasalleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sb = grid.sigma_bar;
    let mut rep = LasalleReport {
        min_alpha_matrix_eig: f64::INFINITY,
        ..Default::default()
    };
    let normal2 = |rng: &mut ChaCha8Rng| nalgebra::Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));

    for d in grid.dgus() {
        let c = controllers
            .get(&d.id)
            .ok_or_else(|| Error::Assumption(format!("DGU {} has no controller", d.id)))?;
        let y = c.lyapunov_param();
        let f = c.closed_loop(d, grid.omega0)?;
        let q = f.transpose() * c.p + c.p * f;
        let qn = q.norm().max(f64::MIN_POSITIVE);
        let y33_inv = y.y33.try_inverse().ok_or_else(|| Error::Structure(format!("DGU {}: Y33 is singular", d.id)))?;

        for _ in 0..n_samples {
            let (a, b) = (normal2(&mut rng), normal2(&mut rng));
            let mut w = nalgebra::Vector6::zeros();
            w.fixed_rows_mut::<2>(0).copy_from(&(a / y.eta));
            w.fixed_rows_mut::<2>(2).copy_from(&(b / sb));
            w.fixed_rows_mut::<2>(4).copy_from(&(y.y33 * b));
            let wn = w.norm_squared();
            if wn > 0.0 {
                let v = (w.transpose() * q * w)[(0, 0)].abs() / (qn * wn);
                rep.max_local_quadratic = rep.max_local_quadratic.max(v);
            }
        }

        let f21 = f.fixed_view::<2, 2>(2, 0).into_owned();
        let target = y.y22 * sb;
        rep.max_f21_residual = rep.max_f21_residual.max((f21 + target).norm() / target.norm());

        let f22 = f.fixed_view::<2, 2>(2, 2).into_owned();
        let f23 = f.fixed_view::<2, 2>(2, 4).into_owned();
        let t1 = f22 * y33_inv / sb;
        let li = -t1 - f23;
        rep.max_l_residual = rep.max_l_residual.max(li.norm() / (t1.norm() + f23.norm()).max(f64::MIN_POSITIVE));

        let k12 = c.k.fixed_view::<2, 2>(0, 2).into_owned();
        let k13 = c.k.fixed_view::<2, 2>(0, 4).into_owned();
        let la = d.a22(grid.omega0) * d.l_t;
        let lhs = (k12 + la) / sb;
        let rhs = -(k13 * y.y33);
        rep.max_k13_residual = rep
            .max_k13_residual
            .max((lhs - rhs).norm() / (lhs.norm() + rhs.norm()).max(f64::MIN_POSITIVE));

        let am = y.y22 * sb - y33_inv / sb;
        let am = (am + am.transpose()) * 0.5;
        rep.min_alpha_matrix_eig = rep.min_alpha_matrix_eig.min(SymmetricEigen::new(am).eigenvalues.min() / am.norm());
    }

    if grid.num_dgus() > 0 {
        let gl = build_global_lyapunov(grid, controllers)?;
        let qn = gl.q.norm().max(f64::MIN_POSITIVE);
        for _ in 0..n_samples.min(100) {
            for comp in grid.connected_components() {
                let alpha = normal2(&mut rng);
                let mut x = DVector::zeros(gl.q.nrows());
                for (bi, id) in gl.ordering.iter().enumerate() {
                    if !comp.contains(id) {
                        continue;
                    }
                    let y = controllers[id].lyapunov_param();
                    let gamma = normal2(&mut rng);
                    let beta = y.y33.try_inverse().expect("checked above") * gamma / sb;
                    x.fixed_rows_mut::<2>(bi * AUG).copy_from(&alpha);
                    x.fixed_rows_mut::<2>(bi * AUG + 2).copy_from(&beta);
                    x.fixed_rows_mut::<2>(bi * AUG + 4).copy_from(&gamma);
                }
                let xn = x.norm_squared();
                let v = (x.transpose() * &gl.q * &x)[(0, 0)].abs() / (qn * xn);
                rep.max_global_quadratic = rep.max_global_quadratic.max(v);
            }
        }
    }

    let mut fail = |name: &str, v: f64, tol: f64| {
        if !(v <= tol) {
            rep.failures.push(format!("{name}: residual {v:.3e} exceeds {tol:.1e}"));
        }
    };
    fail("local_quadratic", rep.max_local_quadratic, 1e-9);
    fail("global_quadratic", rep.max_global_quadratic, 1e-9);
    fail("f21", rep.max_f21_residual, 1e-10);
    fail("l_i", rep.max_l_residual, 1e-10);
    fail("k13", rep.max_k13_residual, 1e-10);
    if !(rep.min_alpha_matrix_eig > 0.0) {
        rep.failures.push(format!(
            "alpha_matrix: smallest eigenvalue {:.3e} is not positive",
            rep.min_alpha_matrix_eig
        ));
    }
    Ok(rep)
}

pub(crate) fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DguParams, LineParams};
    use crate::synthesis::{synthesize_all, Route, SynthesisOptions};

    fn pair(sb: f64) -> GridSpec {
        GridSpec::new(
            2.0 * std::f64::consts::PI * 50.0,
            sb,
            [DguParams::new(1, 0.2, 1.8e-3, 25e-6), DguParams::new(2, 0.15, 2.2e-3, 30e-6)],
            [LineParams::new(1, 2, 0.3, 20e-6)],
        )
        .unwrap()
    }

    fn controllers(grid: &GridSpec, route: Route) -> ControllerSet {
        let opts = SynthesisOptions {
            route,
            ..SynthesisOptions::for_grid(grid)
        };
        synthesize_all(grid, &opts).unwrap().into_iter().map(|(k, (c, _))| (k, c)).collect()
    }

    #[test]
    fn two_node_laplacian_spectrum() {
        let g = pair(1e4);
        let cs = controllers(&g, Route::Analytic);
        let gl = build_global_lyapunov(&g, &cs).unwrap();
        let lap = extract_laplacian(&gl).unwrap();
        let line = g.line(DguId(1), DguId(2)).unwrap();
        let eta_t = g.sigma_bar * line.admittance_parts(g.omega0).unwrap().0;
        let mut ev: Vec<f64> = sym_eigenvalues(&lap.l).iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        let expected = [-4.0 * eta_t, -4.0 * eta_t, 0.0, 0.0];
        for (a, b) in ev.iter().zip(expected) {
            assert!((a - b).abs() <= 1e-9 * eta_t, "{ev:?}");
        }
        assert_eq!(lap.kernel_dim, 2);
    }

    #[test]
    fn edge_and_self_blocks_have_line_form() {
        let g = pair(1e3);
        let cs = controllers(&g, Route::Analytic);
        let gl = build_global_lyapunov(&g, &cs).unwrap();
        let line = g.line(DguId(1), DguId(2)).unwrap();
        let eta_t = g.sigma_bar * line.admittance_parts(g.omega0).unwrap().0;
        let c = gl.part_c.view((0, 6), (6, 6)).clone_owned();
        let mut expected = DMatrix::zeros(6, 6);
        expected[(0, 0)] = 2.0 * eta_t;
        expected[(1, 1)] = 2.0 * eta_t;
        assert!((&c - &expected).norm() <= 1e-12 * expected.norm());
        let b = gl.part_b.view((0, 0), (6, 6)).clone_owned();
        assert!((&b + &expected).norm() <= 1e-12 * expected.norm());
        assert!(gl.decomposition_residual < 1e-12);
    }

    #[test]
    fn isolated_units_have_no_coupling_terms() {
        let g = pair(1e4);
        let g = model::mutate_topology(&g, &model::TopologyChange::LineTrip { a: DguId(1), b: DguId(2) }).unwrap();
        let cs = controllers(&g, Route::Analytic);
        let gl = build_global_lyapunov(&g, &cs).unwrap();
        assert_eq!(gl.part_b.norm(), 0.0);
        assert_eq!(gl.part_c.norm(), 0.0);
        assert!((&gl.q - &gl.part_a).norm() <= 1e-12 * gl.q.norm());
    }

    #[test]
    fn eta_mismatch_is_rejected() {
        let g = pair(1e4);
        let other = GridSpec::new(g.omega0, 2e4, g.dgus().copied(), g.lines().copied()).unwrap();
        let cs = controllers(&other, Route::Analytic);
        assert!(matches!(build_global_lyapunov(&g, &cs), Err(Error::Assumption(_))));
    }

    #[test]
    fn pair_is_certified_stable() {
        for route in [Route::Analytic, Route::Lmi] {
            let g = pair(1e4);
            let cs = controllers(&g, route);
            let rep = certify_stability(&g, &cs).unwrap();
            assert!(rep.is_stable(), "{route:?}: {:?} {:?}", rep.failures, rep.components);
            let las = check_lasalle_sets(&g, &cs, 200, 7).unwrap();
            assert!(las.is_valid(), "{route:?}: {:?}", las);
        }
    }

    #[test]
    fn balancing_preserves_spectrum() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 1e6, 0.0, 1e-6, 2.0, 1e3, 0.0, 1e-3, -3.0]);
        let a = eigenvalues(&m);
        let b: Vec<Complex64> = {
            let mut v: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
            v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
            v
        };
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() < 1e-9);
        }
        assert!((m.trace() - a.iter().map(|z| z.re).sum::<f64>()).abs() < 1e-9);
    }

    /// `U D Uᵀ` with a random orthogonal `U` and `D` holding a fast real pair
    /// and a slow complex pair `s ± 1e-9 i`. Rounding `U D Uᵀ` alone moves the
    /// slow pair by more than `|s|`.
    fn stiff(slow_re: f64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = DMatrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let u = r.qr().q();
        let mut d = DMatrix::zeros(5, 5);
        d[(0, 0)] = -1e8;
        d[(1, 1)] = -2e8;
        d[(2, 2)] = -3.0;
        d[(3, 3)] = slow_re;
        d[(4, 4)] = slow_re;
        d[(3, 4)] = 1e-9;
        d[(4, 3)] = -1e-9;
        &u * d * u.transpose()
    }

    #[test]
    fn unresolvable_slow_modes_stay_marginal() {
        for s in [-1e-9, 1e-9] {
            let f = stiff(s);
            let (_, tol, direct) = classify(&eigenvalues(&f), balance(&f).norm());
            assert!(tol > 1e-9);
            assert_eq!(direct, Verdict::Marginal);
            assert_eq!(classify_matrix(&f).3, Verdict::Marginal);
        }
    }

    #[test]
    fn slow_integrator_modes_are_resolved() {
        // Minimum-cost LMI controllers at large σ̄ leave integrator modes around
        // -1e-8 s⁻¹ next to filter modes around -1e6 s⁻¹.
        let mut rng = ChaCha8Rng::seed_from_u64(1005);
        let n = rng.random_range(2..=20);
        let g = crate::random::random_connected_grid(
            &mut rng,
            n,
            2.0 * std::f64::consts::PI * 50.0,
            1e6,
            &Default::default(),
            &Default::default(),
            0.1,
        )
        .unwrap();
        let ctrls = controllers(&g, Route::Lmi);
        let gains: BTreeMap<DguId, Gain> = ctrls.iter().map(|(id, c)| (*id, c.k)).collect();
        let f = model::assemble_global(&g, Some(&gains)).unwrap().closed_loop().unwrap();
        let (direct, norm) = balanced_eigenvalues(&f);
        let (direct_max, direct_tol, direct_verdict) = classify(&direct, norm);
        assert_eq!(direct_verdict, Verdict::Marginal);
        let (_, max_re, tol, verdict) = classify_matrix(&f);
        assert!(max_re < 0.0 && max_re > -1e-5, "{max_re:e}");
        assert!(tol < 1e-3 * max_re.abs(), "{tol:e} {max_re:e} {direct_max:e} {direct_tol:e}");
        assert!((max_re - direct_max).abs() <= tol, "{max_re:e} vs {direct_max:e}");
        assert_eq!(verdict, Verdict::Stable, "direct tol {direct_tol:e}");
    }
}
