use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use pnpmg::analysis::{build_global_lyapunov, build_global_lyapunov_unchecked, check_assumptions, extract_laplacian};
use pnpmg::model::{assemble_global, AUG};
use pnpmg::random::{random_connected_grid, DguRanges, LineRanges};
use pnpmg::synthesis::{synthesize, synthesize_all, ControllerSet, Route, SynthesisOptions};
use pnpmg::{DguId, DguParams, GridSpec, LineParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const OMEGA0: f64 = 2.0 * PI * 50.0;

fn dgu() -> impl Strategy<Value = DguParams> {
    (0.01..1.0f64, 0.1e-3..10e-3f64, 1e-6..100e-6f64).prop_map(|(r, l, c)| DguParams::new(1, r, l, c))
}

fn grid(max_n: usize) -> impl Strategy<Value = GridSpec> {
    (2..=max_n, any::<u64>(), 0.0..0.5f64).prop_map(|(n, seed, p)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_connected_grid(&mut rng, n, OMEGA0, 1e4, &DguRanges::default(), &LineRanges::default(), p).unwrap()
    })
}

fn controllers(grid: &GridSpec, route: Route) -> ControllerSet {
    let opts = SynthesisOptions {
        route,
        ..SynthesisOptions::for_grid(grid)
    };
    synthesize_all(grid, &opts).unwrap().into_iter().map(|(k, (c, _))| (k, c)).collect()
}

fn relabel(grid: &GridSpec, map: &BTreeMap<DguId, DguId>) -> GridSpec {
    GridSpec::new(
        grid.omega0,
        grid.sigma_bar,
        grid.dgus().map(|d| DguParams { id: map[&d.id], ..*d }),
        grid.lines().map(|l| LineParams::new(map[&l.a], map[&l.b], l.r, l.l)),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn analytic_certificates_hold(p in dgu(), log_sb in 2.0..6.0f64) {
        let opts = SynthesisOptions { sigma_bar: 10f64.powf(log_sb), omega0: OMEGA0, route: Route::Analytic, ..Default::default() };
        let (c, cert) = synthesize(&p, &opts).unwrap();
        prop_assert!(cert.is_valid(), "{:?}", cert.failures);
        prop_assert!(cert.max_eig_q <= 1e-8 * cert.q_norm);
        prop_assert!(cert.gain_norm <= cert.gain_bound());
        prop_assert_eq!(c.eta(), opts.sigma_bar * p.c_t);
        // P = diag(η I₂, P₂₂) exactly.
        prop_assert_eq!(c.p.fixed_view::<2, 4>(0, 2).amax(), 0.0);
        prop_assert!(SymmetricEigen::new(c.p).eigenvalues.min() > 0.0);
    }

    #[test]
    fn controllers_ignore_the_label(p in dgu(), id in 2u32..1000, lmi in any::<bool>()) {
        let route = if lmi { Route::Lmi } else { Route::Analytic };
        let opts = SynthesisOptions { route, ..Default::default() };
        let (a, _) = synthesize(&p, &opts).unwrap();
        let (b, _) = synthesize(&DguParams { id: DguId(id), ..p }, &opts).unwrap();
        prop_assert_eq!(a.k, b.k);
        prop_assert_eq!(a.p, b.p);
    }

    #[test]
    fn equal_voltages_drive_no_line_current(g in grid(8), v in prop::array::uniform2(-2.0..2.0f64)) {
        let gm = assemble_global(&g, None).unwrap();
        let mut x = DVector::zeros(gm.dim());
        for b in 0..g.num_dgus() {
            x[b * AUG] = v[0];
            x[b * AUG + 1] = v[1];
        }
        let coupling = (&gm.a_xi + &gm.a_c) * &x;
        prop_assert!(coupling.amax() <= 1e-9 * (&gm.a_c).amax() * v[0].abs().max(v[1].abs()));
    }

    #[test]
    fn assembly_commutes_with_relabelling(g in grid(7), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let ids = g.dgu_ids();
        let mut targets: Vec<DguId> = (0..ids.len() as u32).map(|k| DguId(10 + 3 * k)).collect();
        targets.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let map: BTreeMap<DguId, DguId> = ids.iter().copied().zip(targets).collect();
        let h = relabel(&g, &map);
        let a = assemble_global(&g, None).unwrap().a_hat();
        let b = assemble_global(&h, None).unwrap().a_hat();
        let hi = h.block_index();
        let n = ids.len() * AUG;
        let perm: Vec<usize> = (0..n).map(|r| hi[&map[&ids[r / AUG]]] * AUG + r % AUG).collect();
        let permuted = DMatrix::from_fn(n, n, |r, c| b[(perm[r], perm[c])]);
        prop_assert!((&a - &permuted).amax() <= 1e-12 * a.amax());
    }

    #[test]
    fn laplacian_kernel_counts_islands(g in grid(8), trips in prop::collection::vec(any::<prop::sample::Index>(), 0..4)) {
        let cs = controllers(&g, Route::Analytic);
        let mut lines: Vec<LineParams> = g.lines().copied().collect();
        for t in trips {
            if !lines.is_empty() {
                lines.remove(t.index(lines.len()));
            }
        }
        let h = GridSpec::new(g.omega0, g.sigma_bar, g.dgus().copied(), lines).unwrap();
        let gl = build_global_lyapunov(&h, &cs).unwrap();
        let lap = extract_laplacian(&gl).unwrap();
        prop_assert_eq!(lap.kernel_dim, 2 * h.connected_components().len());
        prop_assert!(gl.max_eig() <= 1e-8 * gl.q.norm());
    }
}

/// With `η_i ≠ σ̄ C_ti` on one unit the coupling terms no longer cancel and `Q`
/// acquires a positive direction. The local forms vanish on the voltage
/// coordinates, so the random search runs there.
#[test]
fn mismatched_sigma_bar_breaks_semidefiniteness() {
    let g = GridSpec::new(
        OMEGA0,
        1e4,
        [DguParams::new(1, 0.2, 1.8e-3, 25e-6), DguParams::new(2, 0.15, 2.2e-3, 30e-6)],
        [LineParams::new(1, 2, 0.3, 20e-6)],
    )
    .unwrap();
    let mut cs = controllers(&g, Route::Analytic);
    let opts = SynthesisOptions {
        sigma_bar: 1e2,
        route: Route::Analytic,
        ..SynthesisOptions::for_grid(&g)
    };
    cs.insert(DguId(2), synthesize(g.dgu(DguId(2)).unwrap(), &opts).unwrap().0);
    assert!(check_assumptions(&g, &cs).is_err());

    let q = build_global_lyapunov_unchecked(&g, &cs).unwrap().q;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let witness = (0..10_000).find_map(|_| {
        use rand::Rng;
        let x = DVector::from_fn(q.nrows(), |i, _| if i % AUG < 2 { rng.random_range(-1.0..1.0) } else { 0.0 });
        let v = (x.transpose() * &q * &x)[(0, 0)];
        (v > 1e-12 * q.norm() * x.norm_squared()).then_some(v)
    });
    assert!(witness.is_some(), "no positive direction found");

    // The same units with matched σ̄ admit none.
    let ok = controllers(&g, Route::Analytic);
    let gl = build_global_lyapunov(&g, &ok).unwrap();
    assert!(gl.max_eig() <= 1e-8 * gl.q.norm());
}
