//! Local controller synthesis.
//!
//! Each DGU gets a state-feedback gain `K = G Y⁻¹` and a Lyapunov matrix
//! `P = Y⁻¹` with the structure `P = diag(η I₂, P₂₂)`, `η = σ̄ C_t`. Only the DGU's
//! own filter parameters enter, never line data. Two routes produce `(Y, G)`:
//! the LMI problem with cost `α₁γ₁ + α₂γ₂ + α₃β + α₄ζ`, or the explicit
//! construction that places the filter-current loop at `−κ I₂`.
//!
//! With `Y₂₃ = σ̄⁻¹ I₂`, `G₁₃ = −(L/σ̄) Â₂₂` and `G₁₁ = η⁻¹ I₂ − (L/C) Y₂₂` the
//! matrix `Q̃ = Y Q Y` reduces to its central block `Q̃₂₂`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix4, SMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmi_solver::{self, LmiBlock, LmiProgram, Sense, SolverOptions, Status};
use crate::model::{self, DguId, DguParams, Gain, GridSpec, Mat2, Mat6};

pub type GMatrix = SMatrix<f64, 2, 6>;

/// Largest eigenvalue of `Q` allowed, relative to `‖Q‖_F`.
pub const Q_SEMIDEF_TOL: f64 = 1e-8;
/// Largest entry allowed in the first two rows/columns of `Q`, relative to `‖Q‖_F`.
pub const Q_ZERO_TOL: f64 = 1e-9;
/// Relative residual allowed for the forced equalities `Q̃₁₂ = Q̃₁₃ = Q̃₂₃ = 0`.
pub const FORCED_TOL: f64 = 1e-12;
/// Relative residual allowed when reproducing `K` from `(Y, G)`.
pub const GAIN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Lmi,
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions {
    pub sigma_bar: f64,
    pub omega0: f64,
    pub alphas: [f64; 4],
    pub route: Route,
    /// Γ for the analytic route; `gamma_scale · σ̄⁻² · I₂` when unset.
    pub analytic_gamma: Option<[[f64; 2]; 2]>,
    pub gamma_scale: f64,
    /// Closed-loop rate of the current loop in the analytic route; `R_t/L_t + ω0` when unset.
    pub kappa: Option<f64>,
    /// Margin μ in `Y₃₃ = (1 + μ) σ̄⁻² Y₂₂⁻¹`.
    pub y33_margin: f64,
    /// Weight of `tr(Y₃₃)` added to the LMI cost to keep the optimum bounded.
    pub y33_weight: f64,
    pub solver: SolverOptions,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions {
            sigma_bar: 1e4,
            omega0: 2.0 * std::f64::consts::PI * 50.0,
            alphas: [1.0; 4],
            route: Route::Lmi,
            analytic_gamma: None,
            gamma_scale: 1e5,
            kappa: None,
            y33_margin: 1.0,
            y33_weight: 1e-6,
            solver: SolverOptions::default(),
        }
    }
}

impl SynthesisOptions {
    pub fn for_grid(grid: &GridSpec) -> Self {
        SynthesisOptions {
            sigma_bar: grid.sigma_bar,
            omega0: grid.omega0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_bar.is_finite() && self.sigma_bar > 0.0) {
            return Err(Error::param("synthesis", format!("sigma_bar must be positive, got {}", self.sigma_bar)));
        }
        if let Some(a) = self.alphas.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::param("synthesis", format!("alpha weights must be positive, got {a}")));
        }
        if !(self.gamma_scale > 0.0 && self.y33_margin > 0.0 && self.y33_weight >= 0.0) {
            return Err(Error::param("synthesis", "gamma_scale and y33_margin must be positive"));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) {
                return Err(Error::param("synthesis", "kappa must be positive"));
            }
        }
        Ok(())
    }

    pub fn gamma(&self) -> Result<Mat2> {
        let g = match self.analytic_gamma {
            Some(g) => Mat2::new(g[0][0], g[0][1], g[1][0], g[1][1]),
            None => Mat2::identity() * (self.gamma_scale / (self.sigma_bar * self.sigma_bar)),
        };
        if (g - g.transpose()).norm() > 1e-12 * g.norm() || SymmetricEigen::new(g).eigenvalues.min() <= 0.0 {
            return Err(Error::param("synthesis", "gamma must be symmetric positive definite"));
        }
        Ok(g)
    }
}

/// Free and forced blocks of `Y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovParam {
    pub eta: f64,
    pub y22: Mat2,
    pub y23: Mat2,
    pub y33: Mat2,
}

impl LyapunovParam {
    pub fn full(&self) -> Mat6 {
        let mut y = Mat6::zeros();
        y.fixed_view_mut::<2, 2>(0, 0).copy_from(&(Mat2::identity() / self.eta));
        y.fixed_view_mut::<2, 2>(2, 2).copy_from(&self.y22);
        y.fixed_view_mut::<2, 2>(2, 4).copy_from(&self.y23);
        y.fixed_view_mut::<2, 2>(4, 2).copy_from(&self.y23.transpose());
        y.fixed_view_mut::<2, 2>(4, 4).copy_from(&self.y33);
        y
    }

    pub fn lower(&self) -> Matrix4<f64> {
        self.full().fixed_view::<4, 4>(2, 2).into_owned()
    }

    fn from_full(y: &Mat6) -> Self {
        LyapunovParam {
            eta: 1.0 / y[(0, 0)],
            y22: y.fixed_view::<2, 2>(2, 2).into_owned(),
            y23: y.fixed_view::<2, 2>(2, 4).into_owned(),
            y33: y.fixed_view::<2, 2>(4, 4).into_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainParam {
    pub g11: Mat2,
    pub g12: Mat2,
    pub g13: Mat2,
}

impl GainParam {
    pub fn full(&self) -> GMatrix {
        let mut g = GMatrix::zeros();
        g.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.g11);
        g.fixed_view_mut::<2, 2>(0, 2).copy_from(&self.g12);
        g.fixed_view_mut::<2, 2>(0, 4).copy_from(&self.g13);
        g
    }

    fn from_full(g: &GMatrix) -> Self {
        GainParam {
            g11: g.fixed_view::<2, 2>(0, 0).into_owned(),
            g12: g.fixed_view::<2, 2>(0, 2).into_owned(),
            g13: g.fixed_view::<2, 2>(0, 4).into_owned(),
        }
    }
}

/// `Y₂₃ = σ̄⁻¹ I₂`.
pub fn forced_y23(sigma_bar: f64) -> Mat2 {
    Mat2::identity() / sigma_bar
}

/// `G₁₃ = −(L_t/σ̄) Â₂₂`.
pub fn forced_g13(params: &DguParams, sigma_bar: f64, omega0: f64) -> Mat2 {
    -params.a22(omega0) * (params.l_t / sigma_bar)
}

/// `G₁₁ = η⁻¹ I₂ − (L_t/C_t) Y₂₂`, the solution of `Q̃₁₂ = 0`.
pub fn forced_g11(params: &DguParams, eta: f64, y22: &Mat2) -> Mat2 {
    Mat2::identity() / eta - y22 * (params.l_t / params.c_t)
}

/// Local controller with the matrices it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    pub dgu: DguId,
    pub sigma_bar: f64,
    pub k: Gain,
    pub p: Mat6,
    pub y: Mat6,
    pub g: GMatrix,
}

impl Controller {
    /// Assembles `K = G Y⁻¹` and `P = Y⁻¹ = diag(η I₂, Y_low⁻¹)`.
    pub fn from_parts(dgu: DguId, sigma_bar: f64, y: &LyapunovParam, g: &GainParam) -> Result<Self> {
        let ylow = y.lower();
        let ylow = (ylow + ylow.transpose()) * 0.5;
        let inv = ylow.cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Synthesis {
            dgu,
            reason: "lower block of Y is not positive definite".into(),
        })?;
        let inv = (inv + inv.transpose()) * 0.5;
        let mut p = Mat6::zeros();
        p.fixed_view_mut::<2, 2>(0, 0).copy_from(&(Mat2::identity() * y.eta));
        p.fixed_view_mut::<4, 4>(2, 2).copy_from(&inv);
        let gf = g.full();
        let mut k = Gain::zeros();
        k.fixed_view_mut::<2, 2>(0, 0).copy_from(&(g.g11 * y.eta));
        k.fixed_view_mut::<2, 4>(0, 2).copy_from(&(gf.fixed_view::<2, 4>(0, 2) * inv));
        Ok(Controller {
            dgu,
            sigma_bar,
            k,
            p,
            y: y.full(),
            g: gf,
        })
    }

    /// Rebuilds `Y = P⁻¹` and `G = K Y` from a stored `(K, P)` pair.
    pub fn from_kp(dgu: DguId, sigma_bar: f64, k: Gain, p: Mat6) -> Result<Self> {
        let ps = (p + p.transpose()) * 0.5;
        let y = ps.cholesky().map(|c| c.inverse()).ok_or_else(|| Error::Synthesis {
            dgu,
            reason: "P is not positive definite".into(),
        })?;
        let y = (y + y.transpose()) * 0.5;
        Ok(Controller {
            dgu,
            sigma_bar,
            k,
            p,
            y,
            g: k * y,
        })
    }

    pub fn eta(&self) -> f64 {
        self.p[(0, 0)]
    }

    pub fn lyapunov_param(&self) -> LyapunovParam {
        LyapunovParam::from_full(&self.y)
    }

    pub fn gain_param(&self) -> GainParam {
        GainParam::from_full(&self.g)
    }

    /// `F = Â_ii + B̂ K`.
    pub fn closed_loop(&self, params: &DguParams, omega0: f64) -> Result<Mat6> {
        let aug = model::augmented_dgu(params, omega0)?;
        Ok(aug.a_hat + aug.b_hat * self.k)
    }
}

/// Named blocks of `Q̃ = F̂Y + YF̂ᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QTilde {
    pub full: Mat6,
    pub q12: Mat2,
    pub q13: Mat2,
    pub q22: Mat2,
    pub q23: Mat2,
    /// Relative residuals of `Q̃₁₂`, `Q̃₁₃`, `Q̃₂₃`; each block divided by the sum of its term magnitudes.
    pub residual_12: f64,
    pub residual_13: f64,
    pub residual_23: f64,
}

/// Evaluates the blocks of `Q̃` directly from `(Y, G)` without forming `Q`.
pub fn compute_q_tilde(params: &DguParams, omega0: f64, y: &LyapunovParam, g: &GainParam) -> QTilde {
    let (l, c, eta) = (params.l_t, params.c_t, y.eta);
    let a11 = Mat2::new(0.0, omega0, -omega0, 0.0);
    let a22 = params.a22(omega0);
    let id = Mat2::identity();

    let q11 = (a11 + a11.transpose()) / eta;
    let q12 = y.y22 / c - id / (l * eta) + g.g11.transpose() / l;
    let q13 = y.y23 / c - id / eta;
    let q22 = a22 * y.y22 + y.y22 * a22.transpose() + (g.g12 + g.g12.transpose()) / l;
    let q23 = a22 * y.y23 + g.g13 / l;
    // Row 3 of F̂Y is [−η⁻¹I, 0, 0], so the remaining blocks vanish.
    let q33 = Mat2::zeros();

    let mut full = Mat6::zeros();
    let place = |m: &mut Mat6, r: usize, cc: usize, b: &Mat2| {
        m.fixed_view_mut::<2, 2>(r, cc).copy_from(b);
        if r != cc {
            m.fixed_view_mut::<2, 2>(cc, r).copy_from(&b.transpose());
        }
    };
    place(&mut full, 0, 0, &q11);
    place(&mut full, 0, 2, &q12);
    place(&mut full, 0, 4, &q13);
    place(&mut full, 2, 2, &q22);
    place(&mut full, 2, 4, &q23);
    place(&mut full, 4, 4, &q33);

    let rel = |r: &Mat2, scale: f64| if scale > 0.0 { r.norm() / scale } else { r.norm() };
    let s12 = y.y22.norm() / c + id.norm() / (l * eta) + g.g11.norm() / l;
    let s13 = y.y23.norm() / c + id.norm() / eta;
    let s23 = (a22 * y.y23).norm() + g.g13.norm() / l;
    QTilde {
        full,
        q12,
        q13,
        q22,
        q23,
        residual_12: rel(&q12, s12),
        residual_13: rel(&q13, s13),
        residual_23: rel(&q23, s23),
    }
}

/// Local stability certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub gamma: Mat2,
    pub beta: f64,
    pub zeta: f64,
    pub q: Mat6,
    pub q_tilde: Mat6,
    pub max_eig_q: f64,
    pub q_norm: f64,
    pub gain_norm: f64,
    pub closed_loop_max_re: f64,
    /// Relative residual of every structural check.
    pub residuals: BTreeMap<String, f64>,
    /// Checks that exceeded their tolerance.
    pub failures: Vec<String>,
}

impl Certificate {
    pub fn is_valid(&self) -> bool {
        self.failures.is_empty()
    }

    /// Bound `‖K‖₂ ≤ √β ζ`.
    pub fn gain_bound(&self) -> f64 {
        gain_bound(self.beta, self.zeta)
    }
}

pub fn gain_bound(beta: f64, zeta: f64) -> f64 {
    beta.sqrt() * zeta
}

/// Spectral norm of a 2×6 matrix via its 2×2 Gram matrix.
pub(crate) fn spectral_norm(m: &GMatrix) -> f64 {
    SymmetricEigen::new(m * m.transpose()).eigenvalues.max().max(0.0).sqrt()
}

fn sym_max_eig(m: &Mat6) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.max()
}

/// Smallest diagonal `Γ = γI` with `[Q̃₂₂, Y₂₂; Y₂₂, −Γ] ⪯ 0`, if `Q̃₂₂ ≺ 0`.
fn tight_gamma(q22: &Mat2, y22: &Mat2) -> Option<Mat2> {
    let neg = -(q22 + q22.transpose()) * 0.5;
    let inv = neg.cholesky()?.inverse();
    let m = y22 * inv * y22;
    let g = SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.max();
    Some(Mat2::identity() * g)
}

/// Re-derives every certificate quantity from `(K, P)` and the stored `(Y, G)`.
///
/// `β` and `ζ` are set to the tight values `‖G‖₂²` and `‖Y⁻¹‖₂`; `Γ` to the
/// smallest multiple of the identity satisfying the stability LMI.
pub fn verify_local(params: &DguParams, omega0: f64, controller: &Controller) -> Result<Certificate> {
    let y = controller.lyapunov_param();
    let g = controller.gain_param();
    let qt = compute_q_tilde(params, omega0, &y, &g);
    let beta = spectral_norm(&controller.g).powi(2);
    let zeta = sym_max_eig(&controller.p);
    let gamma = tight_gamma(&qt.q22, &y.y22).unwrap_or_else(|| Mat2::identity() * f64::INFINITY);
    certify(params, omega0, controller, qt, gamma, beta, zeta)
}

fn certify(
    params: &DguParams,
    omega0: f64,
    ctrl: &Controller,
    qt: QTilde,
    gamma: Mat2,
    beta: f64,
    zeta: f64,
) -> Result<Certificate> {
    let f = ctrl.closed_loop(params, omega0)?;
    let p = &ctrl.p;
    let q = f.transpose() * p + p * f;
    let q_norm = q.norm();
    let scale = if q_norm > 0.0 { q_norm } else { 1.0 };
    let max_eig_q = sym_max_eig(&q);

    let mut residuals = BTreeMap::new();
    let mut failures = Vec::new();
    let mut check = |name: &str, value: f64, tol: f64| {
        residuals.insert(name.to_string(), value);
        if !(value <= tol) {
            failures.push(format!("{name}: residual {value:.3e} exceeds {tol:.1e}"));
        }
    };

    check("q_max_eig", max_eig_q / scale, Q_SEMIDEF_TOL);
    let rows = q.fixed_view::<2, 6>(0, 0).amax().max(q.fixed_view::<6, 2>(0, 0).amax());
    check("q_zero_rows", rows / scale, Q_ZERO_TOL);
    check("q_symmetry", (q - q.transpose()).amax() / scale, Q_ZERO_TOL);

    let eta = ctrl.eta();
    let eta_expected = ctrl.sigma_bar * params.c_t;
    check("eta_assumption", (eta - eta_expected).abs() / eta_expected, 1e-12);
    let p_off = p.fixed_view::<2, 4>(0, 2).amax().max(p.fixed_view::<4, 2>(2, 0).amax());
    let p_top = (p.fixed_view::<2, 2>(0, 0) - Mat2::identity() * eta).amax();
    check("p_structure", (p_off + p_top) / p.norm(), 1e-12);
    check("p_y_consistency", (p * ctrl.y - Mat6::identity()).amax(), 1e-8);

    let aug = model::augmented_dgu(params, omega0)?;
    let f11 = (f.fixed_view::<2, 2>(0, 0) - aug.a_hat.fixed_view::<2, 2>(0, 0)).amax();
    let f12 = (f.fixed_view::<2, 2>(0, 2) - Mat2::identity() / params.c_t).amax();
    check("f11", f11 / (omega0.max(1.0)), 1e-14);
    check("f12", f12 * params.c_t, 1e-14);

    check("q_tilde_12", qt.residual_12, FORCED_TOL);
    check("q_tilde_13", qt.residual_13, FORCED_TOL);
    check("q_tilde_23", qt.residual_23, FORCED_TOL);
    let yqy = ctrl.y * q * ctrl.y;
    let qt_scale = qt.full.norm().max(f64::MIN_POSITIVE);
    check("q_tilde_consistency", (yqy - qt.full).norm() / qt_scale, 1e-6);

    let k_repr = ctrl.g * p;
    check("k_reproduction", (k_repr - ctrl.k).norm() / ctrl.k.norm().max(f64::MIN_POSITIVE), GAIN_TOL);

    let gain_norm = spectral_norm(&ctrl.k);
    let bound = gain_bound(beta, zeta);
    check("gain_bound", ((gain_norm - bound) / bound).max(0.0), 1e-12);

    let spectrum = f.complex_eigenvalues();
    let closed_loop_max_re = spectrum.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    check("closed_loop_spectrum", if closed_loop_max_re < 0.0 { 0.0 } else { 1.0 }, 0.0);

    Ok(Certificate {
        gamma,
        beta,
        zeta,
        q,
        q_tilde: qt.full,
        max_eig_q,
        q_norm,
        gain_norm,
        closed_loop_max_re,
        residuals,
        failures,
    })
}

/// Unique `P` with `AᵀP + PA = −W` for a Hurwitz 2×2 `A`.
pub fn lyapunov2(a: &Mat2, w: &Mat2) -> Option<Mat2> {
    let at = a.transpose();
    let id = Mat2::identity();
    // Column-major vec: vec(AᵀP) = (I ⊗ Aᵀ) vec P, vec(PA) = (Aᵀ ⊗ I) vec P.
    let mut m = Matrix4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            m.fixed_view_mut::<2, 2>(2 * j, 2 * i).copy_from(&(at * id[(j, i)] + id * at[(j, i)]));
        }
    }
    let rhs = -nalgebra::Vector4::new(w[(0, 0)], w[(1, 0)], w[(0, 1)], w[(1, 1)]);
    let x = m.lu().solve(&rhs)?;
    let p = Mat2::new(x[0], x[2], x[1], x[3]);
    Some((p + p.transpose()) * 0.5)
}

/// Explicit construction: `K̃₂₂ = −Â₂₂ − κI₂`, `P̃₂₂` from the Lyapunov equation
/// `(Â₂₂ + K̃₂₂)ᵀP̃₂₂ + P̃₂₂(Â₂₂ + K̃₂₂) = −Γ⁻¹`, `Y₂₂ = P̃₂₂⁻¹`, `G₁₂ = L_t K̃₂₂ Y₂₂`.
pub fn analytic_parts(params: &DguParams, opts: &SynthesisOptions, gamma: &Mat2) -> Result<(LyapunovParam, GainParam)> {
    params.validate()?;
    opts.validate()?;
    let sb = opts.sigma_bar;
    let a22 = params.a22(opts.omega0);
    let kappa = opts.kappa.unwrap_or(params.r_t / params.l_t + opts.omega0);
    let k22 = -a22 - Mat2::identity() * kappa;
    let gamma_inv = gamma.try_inverse().ok_or_else(|| Error::param("synthesis", "gamma is singular"))?;
    let synth_err = |reason: &str| Error::Synthesis {
        dgu: params.id,
        reason: reason.into(),
    };
    let pt = lyapunov2(&(a22 + k22), &gamma_inv).ok_or_else(|| synth_err("Lyapunov equation is singular"))?;
    let y22 = pt.try_inverse().ok_or_else(|| synth_err("P̃22 is singular"))?;
    let y22 = (y22 + y22.transpose()) * 0.5;
    let y22_inv = (pt + pt.transpose()) * 0.5;
    let eta = sb * params.c_t;
    let y = LyapunovParam {
        eta,
        y22,
        y23: forced_y23(sb),
        y33: y22_inv * ((1.0 + opts.y33_margin) / (sb * sb)),
    };
    let g = GainParam {
        g11: forced_g11(params, eta, &y22),
        g12: k22 * y22 * params.l_t,
        g13: forced_g13(params, sb, opts.omega0),
    };
    Ok((y, g))
}

pub fn synthesize_analytic(params: &DguParams, opts: &SynthesisOptions) -> Result<(Controller, Certificate)> {
    let gamma = opts.gamma()?;
    let (y, g) = analytic_parts(params, opts, &gamma)?;
    let ctrl = Controller::from_parts(params.id, opts.sigma_bar, &y, &g)?;
    let qt = compute_q_tilde(params, opts.omega0, &y, &g);
    let beta = spectral_norm(&ctrl.g).powi(2) * (1.0 + 1e-9);
    let zeta = sym_max_eig(&ctrl.p) * (1.0 + 1e-9);
    let cert = certify(params, opts.omega0, &ctrl, qt, gamma, beta, zeta)?;
    Ok((ctrl, cert))
}

/// Variable layout of the LMI problem.
mod var {
    pub const Y22: usize = 0; // 3 entries: (0,0), (0,1), (1,1)
    pub const Y33: usize = 3;
    pub const G12: usize = 6; // 4 entries, row-major
    pub const GAMMA: usize = 10;
    pub const BETA: usize = 12;
    pub const ZETA: usize = 13;
    pub const COUNT: usize = 14;
}

/// Affine matrix expression `C + Σ z_k M_k`.
#[derive(Debug, Clone)]
struct Affine {
    c: DMatrix<f64>,
    terms: Vec<(usize, DMatrix<f64>)>,
}

impl Affine {
    fn constant(c: DMatrix<f64>) -> Self {
        Affine { c, terms: Vec::new() }
    }

    fn zeros(r: usize, c: usize) -> Self {
        Self::constant(DMatrix::zeros(r, c))
    }

    fn sym2(base: usize) -> Self {
        let e = |r, c| {
            let mut m = DMatrix::zeros(2, 2);
            m[(r, c)] = 1.0;
            m[(c, r)] = 1.0;
            m
        };
        Affine {
            c: DMatrix::zeros(2, 2),
            terms: vec![(base, e(0, 0)), (base + 1, e(0, 1)), (base + 2, e(1, 1))],
        }
    }

    fn full2(base: usize) -> Self {
        let terms = (0..4)
            .map(|k| {
                let mut m = DMatrix::zeros(2, 2);
                m[(k / 2, k % 2)] = 1.0;
                (base + k, m)
            })
            .collect();
        Affine {
            c: DMatrix::zeros(2, 2),
            terms,
        }
    }

    fn scalar_identity(var: usize, n: usize) -> Self {
        Affine {
            c: DMatrix::zeros(n, n),
            terms: vec![(var, DMatrix::identity(n, n))],
        }
    }

    fn add(&self, o: &Affine) -> Affine {
        let mut terms = self.terms.clone();
        terms.extend(o.terms.iter().cloned());
        Affine {
            c: &self.c + &o.c,
            terms,
        }
    }

    fn scale(&self, s: f64) -> Affine {
        Affine {
            c: &self.c * s,
            terms: self.terms.iter().map(|(k, m)| (*k, m * s)).collect(),
        }
    }

    fn left(&self, a: &DMatrix<f64>) -> Affine {
        Affine {
            c: a * &self.c,
            terms: self.terms.iter().map(|(k, m)| (*k, a * m)).collect(),
        }
    }

    fn right(&self, a: &DMatrix<f64>) -> Affine {
        Affine {
            c: &self.c * a,
            terms: self.terms.iter().map(|(k, m)| (*k, m * a)).collect(),
        }
    }

    fn transpose(&self) -> Affine {
        Affine {
            c: self.c.transpose(),
            terms: self.terms.iter().map(|(k, m)| (*k, m.transpose())).collect(),
        }
    }

    fn shape(&self) -> (usize, usize) {
        self.c.shape()
    }
}

/// Builds a symmetric block from a grid of expressions, the upper triangle given.
fn block(name: &str, sense: Sense, grid: &[Vec<Option<Affine>>]) -> LmiBlock {
    let sizes: Vec<usize> = grid
        .iter()
        .enumerate()
        .map(|(i, row)| row[i].as_ref().map(|a| a.shape().0).expect("diagonal entries are present"))
        .collect();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, s| {
        let o = *acc;
        *acc += s;
        Some(o)
    })
    .collect();
    let dim: usize = sizes.iter().sum();
    let mut out = LmiBlock::new(name, dim, sense);
    let mut per_var: BTreeMap<usize, DMatrix<f64>> = BTreeMap::new();
    for (i, row) in grid.iter().enumerate() {
        for (j, entry) in row.iter().enumerate().skip(i) {
            let Some(a) = entry else { continue };
            let place = |m: &DMatrix<f64>, target: &mut DMatrix<f64>| {
                let mut v = target.view_mut((offsets[i], offsets[j]), m.shape());
                v += m;
                if i != j {
                    let mut vt = target.view_mut((offsets[j], offsets[i]), (m.ncols(), m.nrows()));
                    vt += m.transpose();
                }
            };
            place(&a.c, &mut out.f0);
            for (k, m) in &a.terms {
                let target = per_var.entry(*k).or_insert_with(|| DMatrix::zeros(dim, dim));
                place(m, target);
            }
        }
    }
    out.terms = per_var.into_iter().collect();
    out
}

fn to_d(m: &Mat2) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, 2, m.as_slice())
}

/// The LMI problem of one DGU.
pub fn build_lmi_program(params: &DguParams, opts: &SynthesisOptions) -> Result<LmiProgram> {
    params.validate()?;
    opts.validate()?;
    let (l, c, sb) = (params.l_t, params.c_t, opts.sigma_bar);
    let eta = sb * c;
    let a22 = to_d(&params.a22(opts.omega0));
    let i2 = DMatrix::identity(2, 2);
    let i4 = DMatrix::identity(4, 4);

    let y22 = Affine::sym2(var::Y22);
    let y33 = Affine::sym2(var::Y33);
    let g12 = Affine::full2(var::G12);
    let y23 = Affine::constant(&i2 / sb);
    let g11 = y22.scale(-l / c).add(&Affine::constant(&i2 / eta));
    let g13 = Affine::constant(to_d(&forced_g13(params, sb, opts.omega0)));

    let q22 = y22
        .left(&a22)
        .add(&y22.right(&a22.transpose()))
        .add(&g12.add(&g12.transpose()).scale(1.0 / l));
    let mut gamma = Affine::zeros(2, 2);
    for k in 0..2 {
        let mut m = DMatrix::zeros(2, 2);
        m[(k, k)] = 1.0;
        gamma.terms.push((var::GAMMA + k, m));
    }

    let mut prog = LmiProgram::new(var::COUNT);
    prog.cost[var::GAMMA] = opts.alphas[0];
    prog.cost[var::GAMMA + 1] = opts.alphas[1];
    prog.cost[var::BETA] = opts.alphas[2];
    prog.cost[var::ZETA] = opts.alphas[3];
    prog.cost[var::Y33] = opts.y33_weight;
    prog.cost[var::Y33 + 2] = opts.y33_weight;

    prog.push(block(
        "y_positive",
        Sense::Pd,
        &[vec![Some(y22.clone()), Some(y23.clone())], vec![None, Some(y33.clone())]],
    ));
    prog.push(block(
        "stability",
        Sense::Nsd,
        &[vec![Some(q22), Some(y22.clone())], vec![None, Some(gamma.scale(-1.0))]],
    ));
    let g_row = |a: &Affine, b: &Affine, cc: &Affine| {
        let mut out = Affine::zeros(2, 6);
        for (off, part) in [(0, a), (2, b), (4, cc)] {
            out.c.view_mut((0, off), (2, 2)).copy_from(&part.c);
            for (k, m) in &part.terms {
                let mut full = DMatrix::zeros(2, 6);
                full.view_mut((0, off), (2, 2)).copy_from(m);
                out.terms.push((*k, full));
            }
        }
        out
    };
    let g = g_row(&g11, &g12, &g13);
    prog.push(block(
        "gain_beta",
        Sense::Nd,
        &[
            vec![Some(Affine::scalar_identity(var::BETA, 6).scale(-1.0)), Some(g.transpose())],
            vec![None, Some(Affine::constant(-&i2))],
        ],
    ));
    prog.push(block(
        "gain_zeta_top",
        Sense::Pd,
        &[
            vec![Some(Affine::constant(&i2 / eta)), Some(Affine::constant(i2.clone()))],
            vec![None, Some(Affine::scalar_identity(var::ZETA, 2))],
        ],
    ));
    prog.push(block(
        "gain_zeta_low",
        Sense::Pd,
        &[
            vec![Some(y22.clone()), Some(y23.clone()), Some(Affine::constant(i4.view((0, 0), (2, 4)).into_owned()))],
            vec![None, Some(y33.clone()), Some(Affine::constant(i4.view((2, 0), (2, 4)).into_owned()))],
            vec![None, None, Some(Affine::scalar_identity(var::ZETA, 4))],
        ],
    ));
    for k in 0..2 {
        let mut b = LmiBlock::new(format!("gamma_{}", k + 1), 1, Sense::Pd);
        b.add_term(var::GAMMA + k, DMatrix::identity(1, 1));
        prog.push(b);
    }
    Ok(prog)
}

fn pack(y: &LyapunovParam, g: &GainParam, gamma: &Mat2, beta: f64, zeta: f64) -> Vec<f64> {
    let mut z = vec![0.0; var::COUNT];
    z[var::Y22] = y.y22[(0, 0)];
    z[var::Y22 + 1] = y.y22[(0, 1)];
    z[var::Y22 + 2] = y.y22[(1, 1)];
    z[var::Y33] = y.y33[(0, 0)];
    z[var::Y33 + 1] = y.y33[(0, 1)];
    z[var::Y33 + 2] = y.y33[(1, 1)];
    for k in 0..4 {
        z[var::G12 + k] = g.g12[(k / 2, k % 2)];
    }
    z[var::GAMMA] = gamma[(0, 0)];
    z[var::GAMMA + 1] = gamma[(1, 1)];
    z[var::BETA] = beta;
    z[var::ZETA] = zeta;
    z
}

fn unpack(params: &DguParams, opts: &SynthesisOptions, z: &[f64]) -> (LyapunovParam, GainParam, Mat2, f64, f64) {
    let sb = opts.sigma_bar;
    let eta = sb * params.c_t;
    let s2 = |b: usize| Mat2::new(z[b], z[b + 1], z[b + 1], z[b + 2]);
    let y22 = s2(var::Y22);
    let y = LyapunovParam {
        eta,
        y22,
        y23: forced_y23(sb),
        y33: s2(var::Y33),
    };
    let g = GainParam {
        g11: forced_g11(params, eta, &y22),
        g12: Mat2::new(z[var::G12], z[var::G12 + 1], z[var::G12 + 2], z[var::G12 + 3]),
        g13: forced_g13(params, sb, opts.omega0),
    };
    let gamma = Mat2::new(z[var::GAMMA], 0.0, 0.0, z[var::GAMMA + 1]);
    (y, g, gamma, z[var::BETA], z[var::ZETA])
}

/// Strictly feasible point of the LMI problem built from the explicit construction.
///
/// `Γ = (2κσ̄)⁻¹ I₂` makes `Y₂₂ = σ̄⁻¹ I₂`, the scale of the forced `Y₂₃`, which keeps
/// the lower block of `Y` well conditioned.
pub fn lmi_warm_start(params: &DguParams, opts: &SynthesisOptions) -> Result<Vec<f64>> {
    let kappa = opts.kappa.unwrap_or(params.r_t / params.l_t + opts.omega0);
    let gamma = Mat2::identity() / (2.0 * kappa * opts.sigma_bar);
    let (y, g) = analytic_parts(params, opts, &gamma)?;
    let ctrl = Controller::from_parts(params.id, opts.sigma_bar, &y, &g)?;
    let gmax = SymmetricEigen::new(gamma).eigenvalues.max();
    let beta = 2.0 * spectral_norm(&ctrl.g).powi(2);
    let zeta = 2.0 * sym_max_eig(&ctrl.p);
    Ok(pack(&y, &g, &(Mat2::identity() * (2.0 * gmax)), beta, zeta))
}

/// Solves the LMI problem of one DGU and installs the forced blocks.
pub fn synthesize_lmi(params: &DguParams, opts: &SynthesisOptions) -> Result<(Controller, Certificate)> {
    let mut prog = build_lmi_program(params, opts)?;
    let z0 = lmi_warm_start(params, opts)?;
    for b in &mut prog.blocks {
        if matches!(b.sense, Sense::Pd | Sense::Nd) {
            b.margin_scale = Some(b.eval(&z0).norm());
        }
    }
    let sol = lmi_solver::solve_from(&prog, &opts.solver, Some(&z0))?;
    if sol.status != Status::Optimal {
        return Err(Error::Synthesis {
            dgu: params.id,
            reason: format!(
                "LMI solver stopped with status {:?} after {} iterations (worst block eigenvalue {:.3e})",
                sol.status, sol.iterations, sol.worst_block_mineig
            ),
        });
    }
    let (y, g, gamma, beta, zeta) = unpack(params, opts, &sol.z);
    let ctrl = Controller::from_parts(params.id, opts.sigma_bar, &y, &g)?;
    let qt = compute_q_tilde(params, opts.omega0, &y, &g);
    let cert = certify(params, opts.omega0, &ctrl, qt, gamma, beta, zeta)?;
    Ok((ctrl, cert))
}

pub fn synthesize(params: &DguParams, opts: &SynthesisOptions) -> Result<(Controller, Certificate)> {
    match opts.route {
        Route::Lmi => synthesize_lmi(params, opts),
        Route::Analytic => synthesize_analytic(params, opts),
    }
}

pub type ControllerSet = BTreeMap<DguId, Controller>;

/// Synthesizes every DGU of the grid independently; `σ̄` and `ω0` are taken from
/// the grid. Only `DguParams` reach the per-unit synthesis, so line data cannot
/// influence any gain.
pub fn synthesize_all(grid: &GridSpec, opts: &SynthesisOptions) -> Result<BTreeMap<DguId, (Controller, Certificate)>> {
    let opts = SynthesisOptions {
        sigma_bar: grid.sigma_bar,
        omega0: grid.omega0,
        ..opts.clone()
    };
    opts.validate()?;
    let dgus: Vec<DguParams> = grid.dgus().copied().collect();
    let results = map_units(&dgus, |p| synthesize(p, &opts));
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for (p, r) in dgus.iter().zip(results) {
        match r {
            Ok(v) => {
                out.insert(p.id, v);
            }
            Err(e) => errors.push(e),
        }
    }
    match errors.len() {
        0 => Ok(out),
        1 => Err(errors.remove(0)),
        _ => Err(Error::Synthesis {
            dgu: dgus.iter().map(|d| d.id).find(|id| !out.contains_key(id)).unwrap_or(DguId(0)),
            reason: errors.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "),
        }),
    }
}

#[cfg(feature = "parallel")]
fn map_units<T: Send>(dgus: &[DguParams], f: impl Fn(&DguParams) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    dgus.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_units<T>(dgus: &[DguParams], f: impl Fn(&DguParams) -> T) -> Vec<T> {
    dgus.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference() -> DguParams {
        DguParams::new(1, 0.2, 1.8e-3, 25e-6)
    }

    fn opts(sb: f64, route: Route) -> SynthesisOptions {
        SynthesisOptions {
            sigma_bar: sb,
            route,
            ..Default::default()
        }
    }

    #[test]
    fn lyapunov_diagonal_closed_form() {
        let kappa = 3.5;
        let gamma = Mat2::new(2.0, 0.3, 0.3, 1.0);
        let gi = gamma.try_inverse().unwrap();
        let p = lyapunov2(&(-Mat2::identity() * kappa), &gi).unwrap();
        assert!((p - gi / (2.0 * kappa)).norm() < 1e-14);
    }

    #[test]
    fn lyapunov_general() {
        let a = Mat2::new(-1.0, 4.0, -2.0, -3.0);
        let w = Mat2::new(1.0, 0.2, 0.2, 2.0);
        let p = lyapunov2(&a, &w).unwrap();
        assert!((a.transpose() * p + p * a + w).norm() < 1e-12);
    }

    #[test]
    fn analytic_current_loop_closed_form() {
        let o = opts(1e4, Route::Analytic);
        let p = reference();
        let gamma = o.gamma().unwrap();
        let (y, g) = analytic_parts(&p, &o, &gamma).unwrap();
        let kappa = p.r_t / p.l_t + o.omega0;
        // Y₂₂ = 2κΓ when the current loop is −κI.
        assert!((y.y22 - gamma * (2.0 * kappa)).norm() <= 1e-12 * y.y22.norm());
        let qt = compute_q_tilde(&p, o.omega0, &y, &g);
        let bound = -(y.y22 * gamma.try_inverse().unwrap() * y.y22);
        let gap = SymmetricEigen::new(qt.q22 - bound).eigenvalues.max();
        assert!(gap <= 1e-9 * bound.norm(), "{gap}");
    }

    #[test]
    fn forced_blocks_zero_residuals() {
        let o = opts(1e3, Route::Analytic);
        let p = reference();
        let (y, g) = analytic_parts(&p, &o, &o.gamma().unwrap()).unwrap();
        let qt = compute_q_tilde(&p, o.omega0, &y, &g);
        assert!(qt.residual_12 <= FORCED_TOL);
        assert!(qt.residual_13 <= FORCED_TOL);
        assert!(qt.residual_23 <= FORCED_TOL);
    }

    #[test]
    fn g11_perturbation_sensitivity() {
        let o = opts(1e3, Route::Analytic);
        let p = reference();
        let (y, mut g) = analytic_parts(&p, &o, &o.gamma().unwrap()).unwrap();
        let delta = 1e-3;
        g.g11 += Mat2::identity() * delta;
        let qt = compute_q_tilde(&p, o.omega0, &y, &g);
        let expected = Mat2::identity() * (delta / p.l_t);
        assert!((qt.q12 - expected).norm() <= 1e-9 * expected.norm());
    }

    #[test]
    fn q_tilde_two_ways() {
        let o = opts(1e4, Route::Analytic);
        let p = reference();
        let (c, _) = synthesize_analytic(&p, &o).unwrap();
        let qt = compute_q_tilde(&p, o.omega0, &c.lyapunov_param(), &c.gain_param());
        let f = c.closed_loop(&p, o.omega0).unwrap();
        let direct = f * c.y + c.y * f.transpose();
        assert!((direct - qt.full).norm() <= 1e-10 * qt.full.norm());
        let only_center = {
            let mut m = qt.full;
            m.fixed_view_mut::<2, 2>(2, 2).fill(0.0);
            m
        };
        assert!(only_center.norm() <= 1e-12 * qt.full.norm());
    }

    #[test]
    fn analytic_certificate_valid() {
        for sb in [1e2, 1e4, 1e6] {
            let (_, cert) = synthesize_analytic(&reference(), &opts(sb, Route::Analytic)).unwrap();
            assert!(cert.is_valid(), "σ̄={sb}: {:?}", cert.failures);
            assert!(cert.gain_norm <= cert.gain_bound());
        }
    }

    #[test]
    fn lmi_certificate_valid() {
        for sb in [1e2, 1e3, 1e4, 1e6] {
            let (c, cert) = synthesize_lmi(&reference(), &opts(sb, Route::Lmi)).unwrap();
            assert!(cert.is_valid(), "σ̄={sb}: {:?}", cert.failures);
            assert_eq!(c.p[(0, 0)], sb * 25e-6);
        }
    }

    #[test]
    fn zero_gain_is_rejected() {
        let o = opts(1e4, Route::Analytic);
        let (c, _) = synthesize_analytic(&reference(), &o).unwrap();
        let zero = Controller {
            k: Gain::zeros(),
            g: GMatrix::zeros(),
            ..c
        };
        let cert = verify_local(&reference(), o.omega0, &zero).unwrap();
        assert!(!cert.is_valid());
        assert!(cert.failures.iter().any(|f| f.starts_with("closed_loop_spectrum")));
    }

    #[test]
    fn bound_arithmetic() {
        assert_eq!(gain_bound(4.0, 0.5), 1.0);
    }

    #[test]
    fn rejects_bad_options() {
        let mut o = opts(1e4, Route::Lmi);
        o.alphas[2] = 0.0;
        assert!(synthesize(&reference(), &o).is_err());
        let o = opts(-1.0, Route::Lmi);
        assert!(synthesize(&reference(), &o).is_err());
    }
}
