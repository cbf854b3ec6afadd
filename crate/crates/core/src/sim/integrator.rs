//! Fixed-step RK4 for piecewise-constant affine systems `ẋ = A x + b`.
//!
//! For constant `A` and `b` one classical RK4 step of length `h` is the affine
//! map `x ↦ Φx + c` with `Φ = Σ_{k≤4} (hA)^k / k!`. Stiff segments are split into
//! `2^m` substeps with `h_sub ‖A‖₁ ≤ 1` and the substep map is composed by
//! repeated squaring, so one output step always costs a single mat-vec.

use nalgebra::{DMatrix, DVector};

/// Upper bound on `h_sub ‖A‖₁`; inside the RK4 stability region.
pub const SUBSTEP_NORM: f64 = 1.0;
const MAX_DOUBLINGS: u32 = 64;

#[derive(Debug, Clone)]
pub struct AffineStep {
    pub phi: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Number of RK4 substeps folded into one step.
    pub substeps: u64,
}

impl AffineStep {
    /// One RK4 step of length `h` for `ẋ = A x + b`.
    pub fn rk4(a: &DMatrix<f64>, b: &DVector<f64>, h: f64) -> Self {
        let n = a.nrows();
        let ha = a * h;
        let ha2 = &ha * &ha;
        let ha3 = &ha2 * &ha;
        let ha4 = &ha3 * &ha;
        let id = DMatrix::<f64>::identity(n, n);
        let phi = &id + &ha + &ha2 / 2.0 + &ha3 / 6.0 + &ha4 / 24.0;
        let psi = &id + &ha / 2.0 + &ha2 / 6.0 + &ha3 / 24.0;
        let c = psi * b * h;
        AffineStep { phi, c, substeps: 1 }
    }

    /// RK4 over `h` split into `2^m` equal substeps, `m` minimal with
    /// `(h / 2^m)‖A‖₁ ≤ SUBSTEP_NORM`.
    pub fn rk4_substepped(a: &DMatrix<f64>, b: &DVector<f64>, h: f64) -> Self {
        let norm = a.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
        let mut m = 0;
        while m < MAX_DOUBLINGS && h * norm / 2f64.powi(m as i32) > SUBSTEP_NORM {
            m += 1;
        }
        let mut step = Self::rk4(a, b, h / 2f64.powi(m as i32));
        for _ in 0..m {
            step = step.then(&step.clone());
        }
        step
    }

    /// The map "apply `self`, then `next`".
    pub fn then(&self, next: &AffineStep) -> Self {
        AffineStep {
            phi: &next.phi * &self.phi,
            c: &next.phi * &self.c + &next.c,
            substeps: self.substeps + next.substeps,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.phi * x + &self.c
    }

    /// Advances `x` in place using `scratch` as the output buffer.
    pub fn apply_into(&self, x: &mut DVector<f64>, scratch: &mut DVector<f64>) {
        scratch.copy_from(&self.c);
        scratch.gemv(1.0, &self.phi, x, 1.0);
        std::mem::swap(x, scratch);
    }
}

/// Plain RK4 on a general right-hand side; used to cross-check [`AffineStep`].
pub fn rk4_step(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 2.0)));
    let k3 = f(&(x + &k2 * (h / 2.0)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_step_equals_rk4() {
        let a = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, -3.0, -0.5, 1.0, 0.2, 0.0, -2.0]);
        let b = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let x = DVector::from_vec(vec![0.3, 0.1, -0.2]);
        let h = 0.05;
        let s = AffineStep::rk4(&a, &b, h);
        let direct = rk4_step(|y| &a * y + &b, &x, h);
        assert!((s.apply(&x) - direct).norm() < 1e-15);
    }

    #[test]
    fn substepping_matches_iterated_rk4() {
        let a = DMatrix::from_row_slice(2, 2, &[-400.0, 50.0, -50.0, -300.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let h = 0.01;
        let s = AffineStep::rk4_substepped(&a, &b, h);
        assert_eq!(s.substeps, 8);
        let mut x = DVector::from_vec(vec![1.0, -1.0]);
        let x0 = x.clone();
        for _ in 0..8 {
            x = rk4_step(|y| &a * y + &b, &x, h / 8.0);
        }
        assert!((s.apply(&x0) - x).norm() < 1e-13);
    }

    #[test]
    fn exponential_decay_accuracy() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let b = DVector::zeros(1);
        let s = AffineStep::rk4(&a, &b, 0.01);
        let mut x = DVector::from_element(1, 1.0);
        let mut buf = DVector::zeros(1);
        for _ in 0..100 {
            s.apply_into(&mut x, &mut buf);
        }
        assert!((x[0] - (-2.0f64).exp()).abs() < 1e-9);
    }
}
