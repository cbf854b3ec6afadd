//! Seeded generators for DGUs, lines and connected grids.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{DguId, DguParams, GridSpec, LineParams};

/// Closed interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo >= self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    /// `center·(1 ± spread)`.
    pub fn around(center: f64, spread: f64) -> Self {
        Self::new(center * (1.0 - spread), center * (1.0 + spread))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DguRanges {
    pub r_t: Range,
    pub l_t: Range,
    pub c_t: Range,
}

impl Default for DguRanges {
    fn default() -> Self {
        Self {
            r_t: Range::new(0.01, 1.0),
            l_t: Range::new(0.1e-3, 10e-3),
            c_t: Range::new(1e-6, 100e-6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineRanges {
    pub r: Range,
    pub l: Range,
}

impl Default for LineRanges {
    fn default() -> Self {
        Self {
            r: Range::new(0.05, 0.8),
            l: Range::new(2e-6, 40e-6),
        }
    }
}

pub fn random_dgu(rng: &mut impl Rng, id: impl Into<DguId>, ranges: &DguRanges) -> DguParams {
    let r_t = ranges.r_t.sample(rng);
    let l_t = ranges.l_t.sample(rng);
    let c_t = ranges.c_t.sample(rng);
    DguParams::new(id, r_t, l_t, c_t)
}

pub fn random_line(rng: &mut impl Rng, a: DguId, b: DguId, ranges: &LineRanges) -> LineParams {
    let r = ranges.r.sample(rng);
    let l = ranges.l.sample(rng);
    LineParams::new(a, b, r, l)
}

/// A connected grid on DGUs `1..=n`: a random spanning tree plus each remaining
/// pair with probability `extra_edge_prob`.
pub fn random_connected_grid(
    rng: &mut impl Rng,
    n: usize,
    omega0: f64,
    sigma_bar: f64,
    dgu_ranges: &DguRanges,
    line_ranges: &LineRanges,
    extra_edge_prob: f64,
) -> Result<GridSpec> {
    let ids: Vec<DguId> = (1..=n as u32).map(DguId).collect();
    let dgus: Vec<DguParams> = ids.iter().map(|&id| random_dgu(rng, id, dgu_ranges)).collect();
    let mut order = ids.clone();
    order.shuffle(rng);
    let mut lines = Vec::new();
    for k in 1..order.len() {
        let parent = order[rng.random_range(0..k)];
        lines.push(random_line(rng, order[k], parent, line_ranges));
    }
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (ids[i], ids[j]);
            let present = lines.iter().any(|l: &LineParams| l.key() == (a, b));
            if !present && rng.random_bool(extra_edge_prob.clamp(0.0, 1.0)) {
                lines.push(random_line(rng, a, b, line_ranges));
            }
        }
    }
    GridSpec::new(omega0, sigma_bar, dgus, lines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grids_are_connected_and_reproducible() {
        for seed in 0..20 {
            let mk = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(1..=20);
                random_connected_grid(&mut rng, n, 314.0, 1e4, &DguRanges::default(), &LineRanges::default(), 0.1)
                    .unwrap()
            };
            let (a, b) = (mk(), mk());
            assert!(a.is_connected());
            assert!(a.num_lines() + 1 >= a.num_dgus());
            assert_eq!(a.dgus().collect::<Vec<_>>(), b.dgus().collect::<Vec<_>>());
            assert_eq!(a.lines().collect::<Vec<_>>(), b.lines().collect::<Vec<_>>());
        }
    }

    #[test]
    fn samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = DguRanges::default();
        for i in 0..500 {
            let d = random_dgu(&mut rng, i, &r);
            assert!((r.r_t.lo..=r.r_t.hi).contains(&d.r_t));
            assert!((r.l_t.lo..=r.l_t.hi).contains(&d.l_t));
            assert!((r.c_t.lo..=r.c_t.hi).contains(&d.c_t));
        }
    }
}
