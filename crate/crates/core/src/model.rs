//! Electrical model of a DGU and of the electric graph in the rotating dq frame.
//!
//! Local state is `x = [V_d, V_q, It_d, It_q]`; the augmented state appends the
//! two integrators of the voltage tracking error, `x̂ = [V_d, V_q, It_d, It_q, v_d, v_q]`.
//! Global vectors stack augmented states in ascending DGU id order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use nalgebra::{DMatrix, Matrix2, Matrix4, Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Mat2 = Matrix2<f64>;
pub type Mat4 = Matrix4<f64>;
pub type Mat6 = Matrix6<f64>;
/// State-feedback gain `u = K x̂`.
pub type Gain = SMatrix<f64, 2, 6>;

/// Number of states of an augmented DGU.
pub const AUG: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DguId(pub u32);

impl fmt::Display for DguId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for DguId {
    fn from(v: u32) -> Self {
        DguId(v)
    }
}

/// Converter-side RLC filter of one DGU (SI units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DguParams {
    pub id: DguId,
    pub r_t: f64,
    pub l_t: f64,
    pub c_t: f64,
}

impl DguParams {
    pub fn new(id: impl Into<DguId>, r_t: f64, l_t: f64, c_t: f64) -> Self {
        DguParams {
            id: id.into(),
            r_t,
            l_t,
            c_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = || format!("DGU {}", self.id);
        for (name, v) in [("r_t", self.r_t), ("l_t", self.l_t), ("c_t", self.c_t)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(ctx(), format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// `Â22 = [[-R/L, ω0], [-ω0, -R/L]]`, the filter-current block of `A_ii`.
    pub fn a22(&self, omega0: f64) -> Mat2 {
        let d = -self.r_t / self.l_t;
        Mat2::new(d, omega0, -omega0, d)
    }
}

/// Quasi-stationary power line between two PCCs. Endpoints are stored with `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineParams {
    pub a: DguId,
    pub b: DguId,
    pub r: f64,
    pub l: f64,
}

impl LineParams {
    pub fn new(a: impl Into<DguId>, b: impl Into<DguId>, r: f64, l: f64) -> Self {
        let (a, b) = (a.into(), b.into());
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        LineParams { a, b, r, l }
    }

    pub fn key(&self) -> (DguId, DguId) {
        (self.a, self.b)
    }

    pub fn other(&self, id: DguId) -> Option<DguId> {
        if id == self.a {
            Some(self.b)
        } else if id == self.b {
            Some(self.a)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = || format!("line {}-{}", self.a, self.b);
        if self.a == self.b {
            return Err(Error::Topology(format!("self-loop on DGU {}", self.a)));
        }
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(Error::param(ctx(), format!("r must be positive, got {}", self.r)));
        }
        if !(self.l.is_finite() && self.l >= 0.0) {
            return Err(Error::param(ctx(), format!("l must be non-negative, got {}", self.l)));
        }
        Ok(())
    }

    /// Reactance `X = ω0 L`.
    pub fn reactance(&self, omega0: f64) -> f64 {
        omega0 * self.l
    }

    /// Impedance magnitude `|R + iX|`.
    pub fn impedance(&self, omega0: f64) -> f64 {
        self.r.hypot(self.reactance(omega0))
    }

    /// `(R̃, X̃) = (R/Z², X/Z²)`.
    pub fn admittance_parts(&self, omega0: f64) -> Result<(f64, f64)> {
        let x = self.reactance(omega0);
        let z2 = self.r * self.r + x * x;
        if !(z2 > 0.0) {
            return Err(Error::DegenerateLine {
                a: self.a,
                b: self.b,
            });
        }
        Ok((self.r / z2, x / z2))
    }
}

/// Electric graph: DGUs, lines, the rotating-frame frequency and the common scalar σ̄.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub omega0: f64,
    pub sigma_bar: f64,
    dgus: BTreeMap<DguId, DguParams>,
    lines: BTreeMap<(DguId, DguId), LineParams>,
}

impl GridSpec {
    /// Builds a grid and checks every invariant (positive parameters, known endpoints,
    /// no self-loops, no parallel lines, σ̄ > 0).
    pub fn new(
        omega0: f64,
        sigma_bar: f64,
        dgus: impl IntoIterator<Item = DguParams>,
        lines: impl IntoIterator<Item = LineParams>,
    ) -> Result<Self> {
        let grid = Self::new_unchecked(omega0, sigma_bar, dgus, lines)?;
        grid.validate()?;
        Ok(grid)
    }

    /// Like [`GridSpec::new`] but only rejects structural duplicates; parameter
    /// values are left for [`GridSpec::validate`]. Used when reading files so that
    /// bad values surface at synthesis time with the offending DGU named.
    pub fn new_unchecked(
        omega0: f64,
        sigma_bar: f64,
        dgus: impl IntoIterator<Item = DguParams>,
        lines: impl IntoIterator<Item = LineParams>,
    ) -> Result<Self> {
        let mut dmap = BTreeMap::new();
        for d in dgus {
            if dmap.insert(d.id, d).is_some() {
                return Err(Error::Topology(format!("duplicate DGU id {}", d.id)));
            }
        }
        let mut lmap = BTreeMap::new();
        for l in lines {
            let l = LineParams::new(l.a, l.b, l.r, l.l);
            if lmap.insert(l.key(), l).is_some() {
                return Err(Error::Topology(format!("more than one line between {} and {}", l.a, l.b)));
            }
        }
        Ok(GridSpec {
            omega0,
            sigma_bar,
            dgus: dmap,
            lines: lmap,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_bar.is_finite() && self.sigma_bar > 0.0) {
            return Err(Error::param("grid", format!("sigma_bar must be positive, got {}", self.sigma_bar)));
        }
        if !(self.omega0.is_finite() && self.omega0 >= 0.0) {
            return Err(Error::param("grid", format!("omega0 must be non-negative, got {}", self.omega0)));
        }
        for d in self.dgus.values() {
            d.validate()?;
        }
        for l in self.lines.values() {
            l.validate()?;
            for end in [l.a, l.b] {
                if !self.dgus.contains_key(&end) {
                    return Err(Error::Topology(format!(
                        "line {}-{} references unknown DGU {end}",
                        l.a, l.b
                    )));
                }
            }
            l.admittance_parts(self.omega0)?;
        }
        Ok(())
    }

    pub fn dgu(&self, id: DguId) -> Option<&DguParams> {
        self.dgus.get(&id)
    }

    pub fn dgus(&self) -> impl Iterator<Item = &DguParams> {
        self.dgus.values()
    }

    pub fn dgu_ids(&self) -> Vec<DguId> {
        self.dgus.keys().copied().collect()
    }

    pub fn num_dgus(&self) -> usize {
        self.dgus.len()
    }

    pub fn lines(&self) -> impl Iterator<Item = &LineParams> {
        self.lines.values()
    }

    pub fn num_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn line(&self, a: DguId, b: DguId) -> Option<&LineParams> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.lines.get(&key)
    }

    /// Lines incident to `id` paired with the neighbor at the far end.
    pub fn incident(&self, id: DguId) -> impl Iterator<Item = (DguId, &LineParams)> {
        self.lines.values().filter_map(move |l| l.other(id).map(|j| (j, l)))
    }

    pub fn neighbors(&self, id: DguId) -> Vec<DguId> {
        self.incident(id).map(|(j, _)| j).collect()
    }

    /// Connected components of the electric graph, each sorted, ordered by smallest id.
    pub fn connected_components(&self) -> Vec<Vec<DguId>> {
        let mut adj: BTreeMap<DguId, Vec<DguId>> = self.dgus.keys().map(|&k| (k, Vec::new())).collect();
        for l in self.lines.values() {
            adj.get_mut(&l.a).map(|v| v.push(l.b));
            adj.get_mut(&l.b).map(|v| v.push(l.a));
        }
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for &start in adj.keys() {
            if !seen.insert(start) {
                continue;
            }
            let mut comp = vec![start];
            let mut queue = VecDeque::from([start]);
            while let Some(v) = queue.pop_front() {
                for &w in &adj[&v] {
                    if seen.insert(w) {
                        comp.push(w);
                        queue.push_back(w);
                    }
                }
            }
            comp.sort();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.connected_components().len() <= 1
    }

    /// Subgrid induced by a set of DGUs (lines with both ends inside are kept).
    pub fn subgrid(&self, ids: &[DguId]) -> GridSpec {
        let keep: BTreeSet<DguId> = ids.iter().copied().collect();
        GridSpec {
            omega0: self.omega0,
            sigma_bar: self.sigma_bar,
            dgus: self
                .dgus
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (*k, *v))
                .collect(),
            lines: self
                .lines
                .iter()
                .filter(|(_, l)| keep.contains(&l.a) && keep.contains(&l.b))
                .map(|(k, v)| (*k, *v))
                .collect(),
        }
    }

    /// Index of each DGU's block in global vectors.
    pub fn block_index(&self) -> BTreeMap<DguId, usize> {
        self.dgus.keys().enumerate().map(|(i, &k)| (k, i)).collect()
    }
}

/// Plug-and-play topology mutations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum TopologyChange {
    PlugIn { dgu: DguParams, lines: Vec<LineParams> },
    PlugOut { dgu: DguId },
    LineTrip { a: DguId, b: DguId },
    LineAdd { line: LineParams },
}

/// Applies a topology change and returns the new grid; the input is untouched.
pub fn mutate_topology(grid: &GridSpec, change: &TopologyChange) -> Result<GridSpec> {
    let mut next = grid.clone();
    match change {
        TopologyChange::PlugIn { dgu, lines } => {
            dgu.validate()?;
            if next.dgus.contains_key(&dgu.id) {
                return Err(Error::Topology(format!("DGU {} is already plugged in", dgu.id)));
            }
            next.dgus.insert(dgu.id, *dgu);
            for l in lines {
                let l = LineParams::new(l.a, l.b, l.r, l.l);
                let Some(other) = l.other(dgu.id) else {
                    return Err(Error::Topology(format!(
                        "plug-in line {}-{} does not touch DGU {}",
                        l.a, l.b, dgu.id
                    )));
                };
                if !grid.dgus.contains_key(&other) {
                    return Err(Error::Topology(format!("plug-in of DGU {} references unknown neighbor {other}", dgu.id)));
                }
                if next.lines.insert(l.key(), l).is_some() {
                    return Err(Error::Topology(format!("duplicate line {}-{}", l.a, l.b)));
                }
            }
        }
        TopologyChange::PlugOut { dgu } => {
            if next.dgus.remove(dgu).is_none() {
                return Err(Error::Topology(format!("cannot unplug unknown DGU {dgu}")));
            }
            next.lines.retain(|_, l| l.a != *dgu && l.b != *dgu);
        }
        TopologyChange::LineTrip { a, b } => {
            let key = if a <= b { (*a, *b) } else { (*b, *a) };
            if next.lines.remove(&key).is_none() {
                return Err(Error::Topology(format!("cannot trip nonexistent line {a}-{b}")));
            }
        }
        TopologyChange::LineAdd { line } => {
            let l = LineParams::new(line.a, line.b, line.r, line.l);
            for end in [l.a, l.b] {
                if !next.dgus.contains_key(&end) {
                    return Err(Error::Topology(format!("line {}-{} references unknown DGU {end}", l.a, l.b)));
                }
            }
            if next.lines.insert(l.key(), l).is_some() {
                return Err(Error::Topology(format!("duplicate line {}-{}", l.a, l.b)));
            }
        }
    }
    next.validate()?;
    Ok(next)
}

/// Matrices of the non-augmented DGU model.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalMatrices {
    pub a_ii: Mat4,
    pub b: SMatrix<f64, 4, 2>,
    pub m: SMatrix<f64, 4, 2>,
    pub c: Mat4,
    pub h: SMatrix<f64, 2, 4>,
}

pub fn build_local_matrices(params: &DguParams, omega0: f64) -> Result<LocalMatrices> {
    params.validate()?;
    let DguParams { r_t, l_t, c_t, .. } = *params;
    let w = omega0;
    #[rustfmt::skip]
    let a_ii = Mat4::new(
        0.0,         w,           1.0 / c_t,   0.0,
        -w,          0.0,         0.0,         1.0 / c_t,
        -1.0 / l_t,  0.0,         -r_t / l_t,  w,
        0.0,         -1.0 / l_t,  -w,          -r_t / l_t,
    );
    let mut b = SMatrix::<f64, 4, 2>::zeros();
    b[(2, 0)] = 1.0 / l_t;
    b[(3, 1)] = 1.0 / l_t;
    let mut m = SMatrix::<f64, 4, 2>::zeros();
    m[(0, 0)] = -1.0 / c_t;
    m[(1, 1)] = -1.0 / c_t;
    let mut h = SMatrix::<f64, 2, 4>::zeros();
    h[(0, 0)] = 1.0;
    h[(1, 1)] = 1.0;
    Ok(LocalMatrices {
        a_ii,
        b,
        m,
        c: Mat4::identity(),
        h,
    })
}

/// Coupling block `A_ij` seen from DGU `i` (capacitance `c_ti`).
pub fn build_coupling_block(line: &LineParams, c_ti: f64, omega0: f64) -> Result<Mat4> {
    let (rt, xt) = line.admittance_parts(omega0)?;
    let mut a = Mat4::zeros();
    a[(0, 0)] = rt / c_ti;
    a[(0, 1)] = xt / c_ti;
    a[(1, 0)] = -xt / c_ti;
    a[(1, 1)] = rt / c_ti;
    Ok(a)
}

/// Augmented DGU model with voltage-error integrators.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDgu {
    pub a_hat: Mat6,
    pub b_hat: SMatrix<f64, 6, 2>,
    pub m_hat: SMatrix<f64, 6, 4>,
    pub c_hat: Mat6,
    pub h_hat: SMatrix<f64, 2, 6>,
}

pub fn augment(local: &LocalMatrices) -> AugmentedDgu {
    let mut a_hat = Mat6::zeros();
    a_hat.fixed_view_mut::<4, 4>(0, 0).copy_from(&local.a_ii);
    let hc = -(local.h * local.c);
    a_hat.fixed_view_mut::<2, 4>(4, 0).copy_from(&hc);

    let mut b_hat = SMatrix::<f64, 6, 2>::zeros();
    b_hat.fixed_view_mut::<4, 2>(0, 0).copy_from(&local.b);

    let mut m_hat = SMatrix::<f64, 6, 4>::zeros();
    m_hat.fixed_view_mut::<4, 2>(0, 0).copy_from(&local.m);
    m_hat.fixed_view_mut::<2, 2>(4, 2).copy_from(&Mat2::identity());

    let mut c_hat = Mat6::zeros();
    c_hat.fixed_view_mut::<4, 4>(0, 0).copy_from(&local.c);
    c_hat.fixed_view_mut::<2, 2>(4, 4).copy_from(&Mat2::identity());

    let mut h_hat = SMatrix::<f64, 2, 6>::zeros();
    h_hat.fixed_view_mut::<2, 4>(0, 0).copy_from(&local.h);

    AugmentedDgu {
        a_hat,
        b_hat,
        m_hat,
        c_hat,
        h_hat,
    }
}

/// `Â_ij = diag(A_ij, 0₂)`.
pub fn augment_coupling(a_ij: &Mat4) -> Mat6 {
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<4, 4>(0, 0).copy_from(a_ij);
    out
}

pub fn augmented_dgu(params: &DguParams, omega0: f64) -> Result<AugmentedDgu> {
    Ok(augment(&build_local_matrices(params, omega0)?))
}

/// Global augmented model `Â = Â_D + Â_Ξ + Â_C` and its input matrices.
#[derive(Debug, Clone)]
pub struct GlobalModel {
    pub ordering: Vec<DguId>,
    pub a_d: DMatrix<f64>,
    pub a_xi: DMatrix<f64>,
    pub a_c: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub m_hat: DMatrix<f64>,
    pub k: Option<DMatrix<f64>>,
}

impl GlobalModel {
    pub fn a_hat(&self) -> DMatrix<f64> {
        &self.a_d + &self.a_xi + &self.a_c
    }

    /// `Â + B̂K`, if gains were supplied.
    pub fn closed_loop(&self) -> Option<DMatrix<f64>> {
        self.k.as_ref().map(|k| self.a_hat() + &self.b_hat * k)
    }

    pub fn dim(&self) -> usize {
        self.ordering.len() * AUG
    }
}

/// Builds a gain from row-major nested vectors, checking the 2×6 shape.
pub fn gain_from_rows(rows: &[Vec<f64>]) -> Result<Gain> {
    let found = format!(
        "{}x{}",
        rows.len(),
        rows.first().map(|r| r.len()).unwrap_or(0)
    );
    if rows.len() != 2 || rows.iter().any(|r| r.len() != 6) {
        return Err(Error::Shape {
            what: "gain K".into(),
            expected: "2x6".into(),
            found,
        });
    }
    Ok(Gain::from_fn(|i, j| rows[i][j]))
}

pub fn assemble_global(grid: &GridSpec, gains: Option<&BTreeMap<DguId, Gain>>) -> Result<GlobalModel> {
    grid.validate()?;
    let ordering = grid.dgu_ids();
    let index = grid.block_index();
    let n = ordering.len();
    let dim = n * AUG;
    let mut a_d = DMatrix::zeros(dim, dim);
    let mut a_xi = DMatrix::zeros(dim, dim);
    let mut a_c = DMatrix::zeros(dim, dim);
    let mut b_hat = DMatrix::zeros(dim, 2 * n);
    let mut m_hat = DMatrix::zeros(dim, 4 * n);

    for (bi, id) in ordering.iter().enumerate() {
        let p = grid.dgu(*id).expect("ordering comes from the grid");
        let aug = augmented_dgu(p, grid.omega0)?;
        let r0 = bi * AUG;
        a_d.view_mut((r0, r0), (AUG, AUG)).copy_from(&aug.a_hat);
        b_hat.view_mut((r0, 2 * bi), (AUG, 2)).copy_from(&aug.b_hat);
        m_hat.view_mut((r0, 4 * bi), (AUG, 4)).copy_from(&aug.m_hat);
        for (j, line) in grid.incident(*id) {
            let a_ij = augment_coupling(&build_coupling_block(line, p.c_t, grid.omega0)?);
            let c0 = index[&j] * AUG;
            let mut diag = a_xi.view_mut((r0, r0), (AUG, AUG));
            diag -= &a_ij;
            a_c.view_mut((r0, c0), (AUG, AUG)).copy_from(&a_ij);
        }
    }

    let k = match gains {
        None => None,
        Some(g) => {
            let mut k = DMatrix::zeros(2 * n, dim);
            for (bi, id) in ordering.iter().enumerate() {
                let gi = g.get(id).ok_or_else(|| Error::Shape {
                    what: format!("gain set (DGU {id})"),
                    expected: "one 2x6 gain per DGU".into(),
                    found: "missing".into(),
                })?;
                k.view_mut((2 * bi, bi * AUG), (2, AUG)).copy_from(gi);
            }
            Some(k)
        }
    };

    Ok(GlobalModel {
        ordering,
        a_d,
        a_xi,
        a_c,
        b_hat,
        m_hat,
        k,
    })
}
