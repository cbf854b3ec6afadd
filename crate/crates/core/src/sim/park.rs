//! Park transform, amplitude-invariant convention.
//!
//! With `θ = ω0 t + θ0`:
//! `v_a = v_d cos θ − v_q sin θ`, and `v_b`, `v_c` are the same expression at
//! `θ − 2π/3` and `θ + 2π/3`. A balanced set of peak amplitude `A` maps to
//! `|v_dq| = A`.

use std::f64::consts::PI;

const SHIFT: f64 = 2.0 * PI / 3.0;

pub fn dq_to_abc(v_dq: [f64; 2], omega0: f64, t: f64, theta0: f64) -> [f64; 3] {
    let th = omega0 * t + theta0;
    let [d, q] = v_dq;
    let f = |a: f64| d * a.cos() - q * a.sin();
    [f(th), f(th - SHIFT), f(th + SHIFT)]
}

pub fn abc_to_dq(v_abc: [f64; 3], omega0: f64, t: f64, theta0: f64) -> [f64; 2] {
    let th = omega0 * t + theta0;
    let angles = [th, th - SHIFT, th + SHIFT];
    let mut d = 0.0;
    let mut q = 0.0;
    for (v, a) in v_abc.iter().zip(angles) {
        d += v * a.cos();
        q -= v * a.sin();
    }
    [2.0 / 3.0 * d, 2.0 / 3.0 * q]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor() {
        let v = dq_to_abc([1.0, 0.0], 314.0, 0.0, 0.0);
        assert_eq!(v[0], 1.0);
        assert!((v.iter().sum::<f64>()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn power_identity_and_round_trip(d in -10.0..10.0f64, q in -10.0..10.0f64, t in 0.0..1.0f64, th in -4.0..4.0f64) {
            let w = 2.0 * PI * 50.0;
            let abc = dq_to_abc([d, q], w, t, th);
            let sq: f64 = abc.iter().map(|v| v * v).sum();
            prop_assert!((sq - 1.5 * (d * d + q * q)).abs() <= 1e-12 * (1.0 + sq));
            let back = abc_to_dq(abc, w, t, th);
            prop_assert!((back[0] - d).abs() <= 1e-12 * (1.0 + d.abs()));
            prop_assert!((back[1] - q).abs() <= 1e-12 * (1.0 + q.abs()));
            let again = dq_to_abc(back, w, t, th);
            for k in 0..3 {
                prop_assert!((again[k] - abc[k]).abs() <= 1e-12 * (1.0 + sq.sqrt()));
            }
        }
    }
}
