//! Rate tables, background specifications and model validation.

use crate::lattice::{Cell, Edge, Site, MAX_DIM};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("rate table: {0}")]
    Rates(String),
    #[error("background: {0}")]
    Background(String),
    #[error("generator is reducible")]
    Reducible,
    #[error("linear solve failed: {0}")]
    Singular(String),
}

/// Infection rates `lambda(i, j, k)` indexed by (source level, edge level,
/// target level) and recovery rates `r(i)`, for levels `0..=n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub n: usize,
    pub lambda: Vec<f64>,
    pub r: Vec<f64>,
}

impl RateTable {
    pub fn from_fn(n: usize, lambda: impl Fn(usize, usize, usize) -> f64, r: impl Fn(usize) -> f64) -> RateTable {
        let m = n + 1;
        let mut l = Vec::with_capacity(m * m * m);
        for i in 0..m {
            for j in 0..m {
                for k in 0..m {
                    l.push(lambda(i, j, k));
                }
            }
        }
        RateTable { n, lambda: l, r: (0..m).map(r).collect() }
    }

    /// Basic contact process: no background dependence.
    pub fn constant(lambda: f64, r: f64) -> RateTable {
        RateTable::from_fn(0, |_, _, _| lambda, |_| r)
    }

    /// Dynamical-graph rates: infection only across open edges.
    pub fn edge_gated(lambda: f64, r: f64) -> RateTable {
        RateTable::from_fn(1, |_, j, _| lambda * j as f64, |_| r)
    }

    /// Switching rates `lambda(i, _, k) = l[i][k]`, `r(i) = r[i]`.
    pub fn switching(l: [[f64; 2]; 2], r: [f64; 2]) -> RateTable {
        RateTable::from_fn(1, |i, _, k| l[i][k], |i| r[i])
    }

    pub fn levels(&self) -> usize {
        self.n + 1
    }

    pub fn triples(&self) -> usize {
        self.levels().pow(3)
    }

    #[inline]
    pub fn triple_index(&self, i: usize, j: usize, k: usize) -> usize {
        let m = self.n + 1;
        (i * m + j) * m + k
    }

    pub fn triple(&self, idx: usize) -> (usize, usize, usize) {
        let m = self.n + 1;
        (idx / (m * m), (idx / m) % m, idx % m)
    }

    #[inline]
    pub fn lambda(&self, i: usize, j: usize, k: usize) -> f64 {
        self.lambda[self.triple_index(i, j, k)]
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda.iter().cloned().fold(0.0, f64::max)
    }

    pub fn r_max(&self) -> f64 {
        self.r.iter().cloned().fold(0.0, f64::max)
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let m = self.n + 1;
        if self.lambda.len() != m * m * m || self.r.len() != m {
            return Err(ModelError::Rates(format!(
                "expected {} infection and {} recovery entries, got {} and {}",
                m * m * m,
                m,
                self.lambda.len(),
                self.r.len()
            )));
        }
        for (name, v) in self.lambda.iter().map(|v| ("lambda", v)).chain(self.r.iter().map(|v| ("r", v))) {
            if !v.is_finite() || *v < 0.0 {
                return Err(ModelError::Rates(format!("{name} entry {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Flip-rate tables for a two-state spin background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "table", rename_all = "snake_case")]
pub enum SpinRates {
    /// Rates indexed by the number of neighbourhood cells in state 1.
    NeighborCount { site_up: Vec<f64>, site_down: Vec<f64>, edge_up: Vec<f64>, edge_down: Vec<f64> },
    /// Rates indexed by the bitmask of the neighbourhood in canonical order
    /// (see [`spin_neighborhood`]).
    Pattern { site_up: Vec<f64>, site_down: Vec<f64>, edge_up: Vec<f64>, edge_down: Vec<f64> },
}

impl SpinRates {
    pub fn constant(alpha_v: f64, beta_v: f64, alpha_e: f64, beta_e: f64, dim: usize, range: u32) -> SpinRates {
        let ns = spin_neighborhood(dim, range, false).len() + 1;
        let ne = spin_neighborhood(dim, range, true).len() + 1;
        SpinRates::NeighborCount {
            site_up: vec![alpha_v; ns],
            site_down: vec![beta_v; ns],
            edge_up: vec![alpha_e; ne],
            edge_down: vec![beta_e; ne],
        }
    }

    fn tables(&self) -> [&Vec<f64>; 4] {
        match self {
            SpinRates::NeighborCount { site_up, site_down, edge_up, edge_down }
            | SpinRates::Pattern { site_up, site_down, edge_up, edge_down } => [site_up, site_down, edge_up, edge_down],
        }
    }

    pub fn up_table(&self, edge: bool) -> &[f64] {
        self.tables()[if edge { 2 } else { 0 }]
    }

    pub fn down_table(&self, edge: bool) -> &[f64] {
        self.tables()[if edge { 3 } else { 1 }]
    }

    pub fn is_pattern(&self) -> bool {
        matches!(self, SpinRates::Pattern { .. })
    }

    /// Key into the tables for a neighbourhood reading.
    #[inline]
    pub fn key(&self, mask: u32) -> usize {
        match self {
            SpinRates::NeighborCount { .. } => mask.count_ones() as usize,
            SpinRates::Pattern { .. } => mask as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundSpec {
    /// Independent chains per cell with generators for sites and edges.
    IndependentUpdates { q_site: Vec<Vec<f64>>, q_edge: Vec<Vec<f64>> },
    /// Two-state flips with constant rates.
    DynamicalPercolation { alpha_v: f64, beta_v: f64, alpha_e: f64, beta_e: f64 },
    /// Two-state finite-range spin system on sites and edges.
    SpinSystem { range: u32, rates: SpinRates },
}

impl BackgroundSpec {
    /// Frozen background with a single level.
    pub fn trivial() -> BackgroundSpec {
        BackgroundSpec::IndependentUpdates { q_site: vec![vec![0.0]], q_edge: vec![vec![0.0]] }
    }

    pub fn cpdp(alpha_v: f64, beta_v: f64, alpha_e: f64, beta_e: f64) -> BackgroundSpec {
        BackgroundSpec::DynamicalPercolation { alpha_v, beta_v, alpha_e, beta_e }
    }

    /// Interaction range of the background (0 for single-cell dynamics).
    pub fn range(&self) -> u32 {
        match self {
            BackgroundSpec::SpinSystem { range, .. } => *range,
            _ => 0,
        }
    }

    /// Generator of the single-cell chain for sites (`edge=false`) or edges,
    /// when the background is a product of independent chains.
    pub fn cell_generator(&self, edge: bool) -> Option<Vec<Vec<f64>>> {
        match self {
            BackgroundSpec::IndependentUpdates { q_site, q_edge } => Some(if edge { q_edge.clone() } else { q_site.clone() }),
            BackgroundSpec::DynamicalPercolation { alpha_v, beta_v, alpha_e, beta_e } => {
                let (a, b) = if edge { (*alpha_e, *beta_e) } else { (*alpha_v, *beta_v) };
                Some(vec![vec![-a, a], vec![b, -b]])
            }
            BackgroundSpec::SpinSystem { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub rates: RateTable,
    pub background: BackgroundSpec,
}

impl ModelSpec {
    pub fn new(rates: RateTable, background: BackgroundSpec) -> ModelSpec {
        ModelSpec { rates, background }
    }

    /// Basic contact process with a frozen single-level background.
    pub fn basic(lambda: f64, r: f64) -> ModelSpec {
        ModelSpec::new(RateTable::constant(lambda, r), BackgroundSpec::trivial())
    }

    /// Contact process on a dynamical graph: infections pass open edges at rate `lambda`.
    pub fn dynamical_graph(lambda: f64, r: f64, alpha: f64, beta: f64) -> ModelSpec {
        ModelSpec::new(RateTable::edge_gated(lambda, r), BackgroundSpec::cpdp(alpha, beta, alpha, beta))
    }

    /// Same model with mirrored infection rates.
    pub fn mirrored(&self) -> ModelSpec {
        ModelSpec::new(crate::duality::mirror_rates(&self.rates), self.background.clone())
    }
}

/// Canonical neighbourhood of a cell at the origin (the site `0`, or the edge
/// `{0, e_1}` when `edge`): every other cell `b` whose points all lie within
/// l1 distance `range` of the cell. Returned as cells relative to the origin,
/// sorted.
pub fn spin_neighborhood(dim: usize, range: u32, edge: bool) -> Vec<Cell> {
    let a: Vec<Site> = if edge { vec![Site::ORIGIN, Site::axis(0, 1)] } else { vec![Site::ORIGIN] };
    let dist = |v: Site| a.iter().map(|u| crate::lattice::l1_dist(*u, v)).min().unwrap();
    let r = range as i32 + 1;
    let mut out = Vec::new();
    crate::lattice::for_each_in_box(dim, &[-r; MAX_DIM], &[r + 1; MAX_DIM], |x| {
        if dist(x) <= range && !(a.len() == 1 && x == a[0]) {
            out.push(Cell::Site(x));
        }
        for axis in 0..dim {
            let e = Edge { lo: x, axis: axis as u8 };
            let this = edge && x == Site::ORIGIN && axis == 0;
            if !this && dist(e.lo) <= range && dist(e.hi()) <= range {
                out.push(Cell::Edge(e));
            }
        }
    });
    out.sort();
    out.dedup();
    out
}

/// Map a canonical neighbourhood offset to the frame of an edge along `axis`
/// (swap coordinate 0 with `axis`).
pub fn rotate_cell(c: Cell, axis: usize) -> Cell {
    let swap = |mut s: Site| {
        s.0.swap(0, axis);
        s
    };
    match c {
        Cell::Site(s) => Cell::Site(swap(s)),
        Cell::Edge(e) => {
            let ax = e.axis as usize;
            let new_axis = if ax == 0 { axis } else if ax == axis { 0 } else { ax };
            Cell::Edge(Edge { lo: swap(e.lo), axis: new_axis as u8 })
        }
    }
}

/// Orders of triples ascending in lambda and of levels descending in r, with
/// ranks starting at 1. Ties are broken lexicographically.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelOrdering {
    /// `f_rank[triple_index]` is F of the triple.
    pub f_rank: Vec<u32>,
    /// Triple indices in F order (`a_1, a_2, ...`).
    pub a: Vec<usize>,
    /// `g_rank[level]` is G of the level.
    pub g_rank: Vec<u32>,
    /// Levels in G order (`b_1, b_2, ...`).
    pub b: Vec<usize>,
}

pub fn level_ordering(rates: &RateTable) -> LevelOrdering {
    let mut a: Vec<usize> = (0..rates.triples()).collect();
    a.sort_by(|&p, &q| rates.lambda[p].total_cmp(&rates.lambda[q]).then(p.cmp(&q)));
    let mut f_rank = vec![0u32; a.len()];
    for (k, &t) in a.iter().enumerate() {
        f_rank[t] = k as u32 + 1;
    }
    let mut b: Vec<usize> = (0..rates.levels()).collect();
    b.sort_by(|&p, &q| rates.r[q].total_cmp(&rates.r[p]).then(p.cmp(&q)));
    let mut g_rank = vec![0u32; b.len()];
    for (k, &l) in b.iter().enumerate() {
        g_rank[l] = k as u32 + 1;
    }
    LevelOrdering { f_rank, a, g_rank, b }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostics {
    pub monotone: bool,
    pub worst_case_necessary: bool,
    pub background_monotone: bool,
    pub reversible: bool,
    pub messages: Vec<String>,
}

fn check_generator(q: &[Vec<f64>], m: usize, what: &str) -> Result<(), ModelError> {
    if q.len() != m || q.iter().any(|row| row.len() != m) {
        return Err(ModelError::Background(format!("{what} generator must be {m}x{m}")));
    }
    for (i, row) in q.iter().enumerate() {
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::Background(format!("{what} generator has a non-finite entry")));
            }
            if i != j && v < 0.0 {
                return Err(ModelError::Background(format!("{what} generator has a negative off-diagonal")));
            }
            sum += v;
        }
        if sum.abs() > 1e-9 * (1.0 + row.iter().map(|v| v.abs()).sum::<f64>()) {
            return Err(ModelError::Background(format!("{what} generator row {i} does not sum to 0")));
        }
    }
    if !irreducible(q) {
        return Err(ModelError::Background(format!("{what} generator is not irreducible")));
    }
    Ok(())
}

fn irreducible(q: &[Vec<f64>]) -> bool {
    let m = q.len();
    let reach = |fwd: bool| {
        let mut seen = vec![false; m];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..m {
                let rate = if fwd { q[i][j] } else { q[j][i] };
                if i != j && rate > 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    m > 0 && reach(true) && reach(false)
}

/// Uniformization constant used for the quantile representation: the sum of
/// the two largest exit rates. With this constant stochastic monotonicity of
/// `I + Q/c` is equivalent to monotonicity of the generator.
pub fn uniformization_constant(q: &[Vec<f64>]) -> f64 {
    let mut exits: Vec<f64> = q.iter().enumerate().map(|(i, row)| -row[i]).collect();
    exits.sort_by(|a, b| b.total_cmp(a));
    exits.iter().take(2).sum()
}

/// `I + Q/c` with `c` from [`uniformization_constant`].
pub fn uniformized_kernel(q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = uniformization_constant(q);
    let m = q.len();
    (0..m)
        .map(|i| (0..m).map(|j| if c == 0.0 { (i == j) as u8 as f64 } else { (i == j) as u8 as f64 + q[i][j] / c }).collect())
        .collect()
}

/// Stochastic monotonicity of a kernel on a totally ordered space: upper tails
/// are nondecreasing in the starting state.
pub fn stochastically_monotone(p: &[Vec<f64>]) -> bool {
    let m = p.len();
    for i in 0..m.saturating_sub(1) {
        for k in 0..m {
            let tail = |s: usize| p[s][k..].iter().sum::<f64>();
            if tail(i) > tail(i + 1) + 1e-12 {
                return false;
            }
        }
    }
    true
}

fn nondecreasing_in_mask(t: &[f64], bits: usize, increasing: bool) -> bool {
    for mask in 0..t.len() {
        for b in 0..bits {
            if mask & (1 << b) == 0 {
                let hi = mask | (1 << b);
                let ok = if increasing { t[hi] >= t[mask] } else { t[hi] <= t[mask] };
                if !ok {
                    return false;
                }
            }
        }
    }
    true
}

fn check_spin(dim: usize, range: u32, rates: &SpinRates) -> Result<bool, ModelError> {
    let mut mono = true;
    for edge in [false, true] {
        let size = spin_neighborhood(dim, range, edge).len();
        let expect = if rates.is_pattern() {
            if size > 16 {
                return Err(ModelError::Background(format!("pattern tables need at most 16 neighbourhood cells, got {size}")));
            }
            1usize << size
        } else {
            size + 1
        };
        for (name, t) in [("up", rates.up_table(edge)), ("down", rates.down_table(edge))] {
            if t.len() != expect {
                return Err(ModelError::Background(format!(
                    "spin {} {name} table needs {expect} entries, got {}",
                    if edge { "edge" } else { "site" },
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(ModelError::Background("spin rates must be finite and nonnegative".into()));
            }
            let inc = name == "up";
            mono &= if rates.is_pattern() {
                nondecreasing_in_mask(t, size, inc)
            } else {
                t.windows(2).all(|w| if inc { w[1] >= w[0] } else { w[1] <= w[0] })
            };
        }
    }
    Ok(mono)
}

/// Well-formedness and monotonicity diagnostics.
pub fn validate_model(model: &ModelSpec, dim: usize) -> Result<Diagnostics, ModelError> {
    let rates = &model.rates;
    rates.check()?;
    let m = rates.levels();
    let mut messages = Vec::new();
    let (bg_mono, reversible) = match &model.background {
        BackgroundSpec::IndependentUpdates { q_site, q_edge } => {
            check_generator(q_site, m, "site")?;
            check_generator(q_edge, m, "edge")?;
            let mono = stochastically_monotone(&uniformized_kernel(q_site)) && stochastically_monotone(&uniformized_kernel(q_edge));
            let rev = [q_site, q_edge].iter().all(|q| stationary_dist(q).map(|pi| check_reversible(q, &pi)).unwrap_or(false));
            (mono, rev)
        }
        BackgroundSpec::DynamicalPercolation { alpha_v, beta_v, alpha_e, beta_e } => {
            if m != 2 {
                return Err(ModelError::Background("dynamical percolation needs N = 1".into()));
            }
            for v in [alpha_v, beta_v, alpha_e, beta_e] {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(ModelError::Background("dynamical percolation rates must be positive".into()));
                }
            }
            (true, true)
        }
        BackgroundSpec::SpinSystem { range, rates: sr } => {
            if m != 2 {
                return Err(ModelError::Background("spin systems need N = 1".into()));
            }
            let mono = check_spin(dim, *range, sr)?;
            // reversibility of a general spin table is not decided here
            (mono, false)
        }
    };
    let n = rates.n;
    let mut lam_mono = true;
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let v = rates.lambda(i, j, k);
                if (i < n && rates.lambda(i + 1, j, k) < v)
                    || (j < n && rates.lambda(i, j + 1, k) < v)
                    || (k < n && rates.lambda(i, j, k + 1) < v)
                {
                    lam_mono = false;
                }
            }
        }
    }
    let r_mono = rates.r.windows(2).all(|w| w[1] <= w[0]);
    if !lam_mono {
        messages.push("infection rates are not nondecreasing in the background levels".into());
    }
    if !r_mono {
        messages.push("recovery rates are not nonincreasing in the background level".into());
    }
    if !bg_mono {
        messages.push("background dynamics are not monotonically representable".into());
    }
    let lam_min = rates.lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    let worst = rates.lambda(0, 0, 0) == lam_min && rates.r[0] == rates.r_max();
    if !worst {
        messages.push("the all-zero background is not the worst case for the rates".into());
    }
    if rates.lambda_max() == 0.0 {
        messages.push("all infection rates vanish".into());
    }
    Ok(Diagnostics { monotone: lam_mono && r_mono && bg_mono, worst_case_necessary: worst, background_monotone: bg_mono, reversible, messages })
}

/// Invariant law of an irreducible generator, by a direct linear solve.
pub fn stationary_dist(q: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    let m = q.len();
    if m == 0 || q.iter().any(|r| r.len() != m) {
        return Err(ModelError::Singular("generator must be square and nonempty".into()));
    }
    if !irreducible(q) {
        return Err(ModelError::Reducible);
    }
    // pi Q = 0 with the last equation replaced by normalisation
    let mut a = DMatrix::<f64>::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            a[(j, i)] = q[i][j];
        }
    }
    for i in 0..m {
        a[(m - 1, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m);
    rhs[m - 1] = 1.0;
    let pi = a.clone().lu().solve(&rhs).ok_or_else(|| ModelError::Singular("singular system".into()))?;
    let pi: Vec<f64> = pi.iter().map(|v| v.max(0.0)).collect();
    let s: f64 = pi.iter().sum();
    let pi: Vec<f64> = pi.into_iter().map(|v| v / s).collect();
    let scale = q.iter().flatten().map(|v| v.abs()).fold(1.0, f64::max);
    for j in 0..m {
        let res: f64 = (0..m).map(|i| pi[i] * q[i][j]).sum();
        if res.abs() > 1e-12 * scale {
            return Err(ModelError::Singular(format!("residual {res:e} too large")));
        }
    }
    Ok(pi)
}

/// Detailed balance `pi_i Q_ij = pi_j Q_ji` within 1e-10.
pub fn check_reversible(q: &[Vec<f64>], pi: &[f64]) -> bool {
    let m = q.len();
    (0..m).all(|i| (0..m).all(|j| (pi[i] * q[i][j] - pi[j] * q[j][i]).abs() <= 1e-10))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SpinBounds {
    pub alpha_v_lo: f64,
    pub beta_v_hi: f64,
    pub alpha_e_lo: f64,
    pub beta_e_hi: f64,
}

/// Minimal up-flip and maximal down-flip rate per cell kind.
pub fn spin_bounds(rates: &SpinRates) -> SpinBounds {
    let min = |t: &[f64]| t.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = |t: &[f64]| t.iter().cloned().fold(0.0, f64::max);
    SpinBounds {
        alpha_v_lo: min(rates.up_table(false)),
        beta_v_hi: max(rates.down_table(false)),
        alpha_e_lo: min(rates.up_table(true)),
        beta_e_hi: max(rates.down_table(true)),
    }
}
