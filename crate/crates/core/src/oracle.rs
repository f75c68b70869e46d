//! Exact finite-state reference for tiny closed windows: state enumeration,
//! generator assembly straight from the transition rates, transient laws by
//! uniformization, and z-score comparison against simulated frequencies.

use crate::engine::{CopyState, CoupledRun, RecordOpts};
use crate::graphical::{EventStream, System};
use crate::lattice::{Cell, EdgePolicy, Window};
use crate::model::{self, BackgroundSpec, ModelSpec};
use crate::rng::derive_trial_seed;
use rayon::prelude::*;
use thiserror::Error;

pub const MAX_STATES: usize = 4096;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("state space of {0} states exceeds the bound {MAX_STATES}")]
    TooManyStates(usize),
    #[error("distributions have {0} and {1} entries")]
    Mismatch(usize, usize),
    #[error("no trials")]
    NoTrials,
    #[error(transparent)]
    Model(#[from] model::ModelError),
}

/// Generator of `(eta, xi)` on a closed window. State index is
/// `eta_bits + 2^|V| * sum_c xi(c) (N+1)^c`.
pub struct ExactChain {
    pub window: Window,
    pub levels: usize,
    pub n_states: usize,
    /// Off-diagonal rates per row.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub exit: Vec<f64>,
}

impl ExactChain {
    pub fn n_sites(&self) -> usize {
        self.window.n_sites()
    }

    pub fn encode(&self, eta: &[u8], xi: &[u8]) -> usize {
        let mut idx = 0usize;
        for c in (0..self.window.n_cells()).rev() {
            idx = idx * self.levels + xi[c] as usize;
        }
        let mut bits = 0usize;
        for (s, v) in eta.iter().enumerate() {
            bits |= (*v as usize) << s;
        }
        bits + (idx << self.n_sites())
    }

    pub fn decode(&self, state: usize) -> (Vec<u8>, Vec<u8>) {
        let nv = self.n_sites();
        let eta = (0..nv).map(|s| ((state >> s) & 1) as u8).collect();
        let mut rest = state >> nv;
        let xi = (0..self.window.n_cells())
            .map(|_| {
                let v = (rest % self.levels) as u8;
                rest /= self.levels;
                v
            })
            .collect();
        (eta, xi)
    }

    /// Dense generator (for small checks).
    pub fn dense(&self) -> Vec<Vec<f64>> {
        let mut q = vec![vec![0.0; self.n_states]; self.n_states];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, r) in row {
                q[i][j] += r;
            }
            q[i][i] = -self.exit[i];
        }
        q
    }
}

/// Cells of the spin neighbourhood of `cell` in `w` (None outside `w`).
fn spin_cells(w: &Window, range: u32, cell: usize) -> Vec<Option<usize>> {
    let dim = w.dim();
    match w.cell(cell) {
        Cell::Site(x) => model::spin_neighborhood(dim, range, false)
            .into_iter()
            .map(|off| match off {
                Cell::Site(s) => w.cell_index(Cell::Site(s.add(x))),
                Cell::Edge(e) => w.cell_index(Cell::Edge(crate::lattice::Edge { lo: e.lo.add(x), axis: e.axis })),
            })
            .collect(),
        Cell::Edge(e0) => model::spin_neighborhood(dim, range, true)
            .into_iter()
            .map(|off| match model::rotate_cell(off, e0.axis as usize) {
                Cell::Site(s) => w.cell_index(Cell::Site(s.add(e0.lo))),
                Cell::Edge(e) => w.cell_index(Cell::Edge(crate::lattice::Edge { lo: e.lo.add(e0.lo), axis: e.axis })),
            })
            .collect(),
    }
}

pub fn enumerate_and_assemble(model: &ModelSpec, window: &Window) -> Result<ExactChain, OracleError> {
    model::validate_model(model, window.dim())?;
    let levels = model.rates.levels();
    let nv = window.n_sites();
    let nc = window.n_cells();
    let n_states = (1usize << nv).saturating_mul(levels.saturating_pow(nc as u32));
    if nv > 20 || n_states > MAX_STATES {
        return Err(OracleError::TooManyStates(n_states));
    }
    let mut chain = ExactChain { window: window.clone(), levels, n_states, rows: vec![Vec::new(); n_states], exit: vec![0.0; n_states] };
    // neighbour pairs with their edge cell
    let mut pairs = Vec::new();
    for x in 0..nv {
        for y in 0..nv {
            if let Some(e) = crate::lattice::Edge::between(window.site(x), window.site(y)) {
                if let Some(ec) = window.cell_index(Cell::Edge(e)) {
                    pairs.push((x, y, ec));
                }
            }
        }
    }
    let rt = &model.rates;
    let spin_nb: Vec<Vec<Option<usize>>> = match &model.background {
        BackgroundSpec::SpinSystem { range, .. } => (0..nc).map(|c| spin_cells(window, *range, c)).collect(),
        _ => Vec::new(),
    };
    let gens: Option<[Vec<Vec<f64>>; 2]> = model.background.cell_generator(false).map(|s| [s, model.background.cell_generator(true).unwrap()]);
    for st in 0..n_states {
        let (eta, xi) = chain.decode(st);
        let mut out: Vec<(usize, f64)> = Vec::new();
        let push = |e: &[u8], x: &[u8], r: f64, out: &mut Vec<(usize, f64)>| {
            if r > 0.0 {
                out.push((chain.encode(e, x), r));
            }
        };
        for &(x, y, ec) in &pairs {
            if eta[x] == 1 && eta[y] == 0 {
                let mut e2 = eta.clone();
                e2[y] = 1;
                push(&e2, &xi, rt.lambda(xi[x] as usize, xi[ec] as usize, xi[y] as usize), &mut out);
            }
        }
        for x in 0..nv {
            if eta[x] == 1 {
                let mut e2 = eta.clone();
                e2[x] = 0;
                push(&e2, &xi, rt.r[xi[x] as usize], &mut out);
            }
        }
        for c in 0..nc {
            let edge = c >= nv;
            let cur = xi[c] as usize;
            match &model.background {
                BackgroundSpec::SpinSystem { rates, .. } => {
                    let mut mask = 0u32;
                    for (b, nb) in spin_nb[c].iter().enumerate() {
                        if let Some(i) = nb {
                            if xi[*i] != 0 {
                                mask |= 1 << b;
                            }
                        }
                    }
                    let key = rates.key(mask);
                    let r = if cur == 0 { rates.up_table(edge)[key] } else { rates.down_table(edge)[key] };
                    let mut x2 = xi.clone();
                    x2[c] = 1 - cur as u8;
                    push(&eta, &x2, r, &mut out);
                }
                _ => {
                    let q = &gens.as_ref().unwrap()[edge as usize];
                    for j in 0..levels {
                        if j != cur {
                            let mut x2 = xi.clone();
                            x2[c] = j as u8;
                            push(&eta, &x2, q[cur][j], &mut out);
                        }
                    }
                }
            }
        }
        chain.exit[st] = out.iter().map(|(_, r)| r).sum();
        chain.rows[st] = out;
    }
    Ok(chain)
}

/// Law at time `t` from a point mass at `init`, by uniformization with
/// truncation error below 1e-10.
pub fn transient_dist(chain: &ExactChain, init: usize, t: f64) -> Vec<f64> {
    let n = chain.n_states;
    let mut v = vec![0.0; n];
    v[init] = 1.0;
    let lam = chain.exit.iter().cloned().fold(0.0, f64::max);
    if t == 0.0 || lam == 0.0 {
        return v;
    }
    let lt = lam * t;
    let mut out = vec![0.0; n];
    let mut log_w = -lt;
    let mut acc = 0.0;
    let mut k = 0usize;
    loop {
        let w = log_w.exp();
        for (o, x) in out.iter_mut().zip(&v) {
            *o += w * x;
        }
        acc += w;
        if (1.0 - acc) < 1e-10 && k as f64 > lt {
            break;
        }
        // v <- v P with P = I + Q / lam
        let mut next: Vec<f64> = v.iter().zip(&chain.exit).map(|(x, e)| x * (1.0 - e / lam)).collect();
        for (i, row) in chain.rows.iter().enumerate() {
            if v[i] != 0.0 {
                for &(j, r) in row {
                    next[j] += v[i] * r / lam;
                }
            }
        }
        v = next;
        k += 1;
        log_w += lt.ln() - (k as f64).ln();
        if k > 100_000 + (20.0 * lt) as usize {
            break;
        }
    }
    out
}

/// Push a law through a labelling of states.
pub fn marginal(chain: &ExactChain, dist: &[f64], n_keys: usize, key: impl Fn(&[u8], &[u8]) -> usize) -> Vec<f64> {
    let mut m = vec![0.0; n_keys];
    for (s, p) in dist.iter().enumerate() {
        if *p != 0.0 {
            let (e, x) = chain.decode(s);
            m[key(&e, &x)] += p;
        }
    }
    m
}

/// Per-state z-scores of empirical frequencies against exact probabilities.
/// A state with exact probability 0 and a positive count gets an infinite score.
pub fn z_scores(p_exact: &[f64], counts: &[u64], n_trials: u64) -> Result<Vec<f64>, OracleError> {
    if p_exact.len() != counts.len() {
        return Err(OracleError::Mismatch(p_exact.len(), counts.len()));
    }
    if n_trials == 0 {
        return Err(OracleError::NoTrials);
    }
    let n = n_trials as f64;
    Ok(p_exact
        .iter()
        .zip(counts)
        .map(|(&p, &c)| {
            let f = c as f64 / n;
            if p <= 1e-15 || p >= 1.0 - 1e-15 {
                let expected = if p >= 0.5 { n } else { 0.0 };
                if (c as f64 - expected).abs() < 0.5 { 0.0 } else { f64::INFINITY }
            } else {
                (f - p) / (p * (1.0 - p) / n).sqrt()
            }
        })
        .collect())
}

/// Largest absolute z-score.
pub fn compare_mc(p_exact: &[f64], counts: &[u64], n_trials: u64) -> Result<f64, OracleError> {
    Ok(z_scores(p_exact, counts, n_trials)?.into_iter().map(f64::abs).fold(0.0, f64::max))
}

/// Which coordinates of the state a comparison looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Marginal {
    /// The full state.
    Full,
    /// Infection configuration only.
    Eta,
    /// Infection plus site backgrounds.
    EtaSites,
    /// Infection plus edge backgrounds.
    EtaEdges,
}

impl Marginal {
    pub fn size(self, n_sites: usize, n_cells: usize, levels: usize) -> usize {
        let lp = |k: usize| levels.pow(k as u32);
        (1 << n_sites)
            * match self {
                Marginal::Full => lp(n_cells),
                Marginal::Eta => 1,
                Marginal::EtaSites => lp(n_sites),
                Marginal::EtaEdges => lp(n_cells - n_sites),
            }
    }

    pub fn key(self, eta: &[u8], xi: &[u8], levels: usize) -> usize {
        let ns = eta.len();
        let mut k = 0usize;
        let cells: &[u8] = match self {
            Marginal::Full => xi,
            Marginal::Eta => &[],
            Marginal::EtaSites => &xi[..ns],
            Marginal::EtaEdges => &xi[ns..],
        };
        for v in cells.iter().rev() {
            k = k * levels + *v as usize;
        }
        let mut bits = 0usize;
        for (s, v) in eta.iter().enumerate() {
            bits |= (*v as usize) << s;
        }
        bits + (k << ns)
    }
}

/// One oracle comparison case.
#[derive(Clone, Debug)]
pub struct OracleCase {
    pub name: String,
    pub model: ModelSpec,
    /// Box `[0, sites-1]` in d = 1 with internal edges.
    pub sites: i32,
    pub eta0: Vec<u8>,
    pub xi0: Vec<u8>,
    pub marginal: Marginal,
}

impl OracleCase {
    pub fn window(&self) -> Window {
        Window::from_box(1, &[0], &[self.sites - 1], EdgePolicy::Internal)
    }
}

/// The four reference cases: one-site dynamical percolation, two-site basic
/// process, two-site switching (non-monotone), and one edge of a dynamical graph.
pub fn standard_cases() -> Vec<OracleCase> {
    use crate::model::RateTable;
    vec![
        OracleCase {
            name: "one_site_cpdp".into(),
            model: ModelSpec::new(RateTable::from_fn(1, |_, _, _| 1.0, |i| [1.5, 0.5][i]), BackgroundSpec::cpdp(1.0, 0.7, 1.0, 1.0)),
            sites: 1,
            eta0: vec![1],
            xi0: vec![0],
            marginal: Marginal::Full,
        },
        OracleCase {
            name: "two_site_basic".into(),
            model: ModelSpec::basic(1.2, 1.0),
            sites: 2,
            eta0: vec![1, 0],
            xi0: vec![0; 3],
            marginal: Marginal::Eta,
        },
        OracleCase {
            name: "two_site_switching".into(),
            model: ModelSpec::new(RateTable::switching([[0.5, 2.0], [1.0, 0.2]], [1.2, 0.6]), BackgroundSpec::cpdp(0.8, 1.1, 1.0, 1.0)),
            sites: 2,
            eta0: vec![1, 0],
            xi0: vec![0, 1, 0],
            marginal: Marginal::EtaSites,
        },
        OracleCase {
            name: "one_edge_dynamical_graph".into(),
            model: ModelSpec::new(RateTable::edge_gated(2.0, 1.0), BackgroundSpec::cpdp(1.0, 1.0, 0.5, 1.0)),
            sites: 2,
            eta0: vec![1, 0],
            xi0: vec![0, 0, 0],
            marginal: Marginal::EtaEdges,
        },
    ]
}

/// Exact marginal laws at each time.
pub fn exact_marginals(case: &OracleCase, model: &ModelSpec, times: &[f64]) -> Result<Vec<Vec<f64>>, OracleError> {
    let w = case.window();
    let chain = enumerate_and_assemble(model, &w)?;
    let init = chain.encode(&case.eta0, &case.xi0);
    let levels = chain.levels;
    let size = case.marginal.size(w.n_sites(), w.n_cells(), levels);
    Ok(times
        .iter()
        .map(|&t| marginal(&chain, &transient_dist(&chain, init, t), size, |e, x| case.marginal.key(e, x, levels)))
        .collect())
}

/// Simulated marginal counts at each time, trials run in parallel.
pub fn simulate_marginals(case: &OracleCase, times: &[f64], trials: u64, master_seed: u64) -> Result<Vec<Vec<u64>>, OracleError> {
    let w = case.window();
    let sys = System::new(w.clone(), case.model.clone())?;
    let levels = case.model.rates.levels();
    let size = case.marginal.size(w.n_sites(), w.n_cells(), levels);
    let t_max = times.iter().cloned().fold(0.0, f64::max);
    let opts = RecordOpts { infection_log: false, background_log: false, snapshot_dt: None, stop_when_extinct: false };
    let counts = (0..trials)
        .into_par_iter()
        .fold(
            || vec![vec![0u64; size]; times.len()],
            |mut acc, trial| {
                let stream = EventStream::sample(&sys.catalog, t_max, derive_trial_seed(master_seed, trial));
                let mut run = CoupledRun::new(&sys, &stream, vec![CopyState::new("x", 0.0, case.eta0.clone(), case.xi0.clone())], opts);
                for (ti, &t) in times.iter().enumerate() {
                    run.advance_to(t).expect("stream covers all times");
                    let c = &run.copies[0];
                    acc[ti][case.marginal.key(&c.eta, &c.xi, levels)] += 1;
                }
                acc
            },
        )
        .reduce(
            || vec![vec![0u64; size]; times.len()],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    for (u, v) in x.iter_mut().zip(y) {
                        *u += v;
                    }
                }
                a
            },
        );
    Ok(counts)
}

/// Result row of an oracle comparison.
#[derive(Clone, Debug)]
pub struct OracleRow {
    pub case: String,
    pub time: f64,
    pub state: usize,
    pub p_exact: f64,
    pub p_mc: f64,
    pub z: f64,
}

/// Compare simulation against the exact law; `exact_model` may differ from
/// the simulated model (used to check the power of the test).
pub fn run_case(case: &OracleCase, exact_model: &ModelSpec, times: &[f64], trials: u64, seed: u64) -> Result<(f64, Vec<OracleRow>), OracleError> {
    let exact = exact_marginals(case, exact_model, times)?;
    let sim = simulate_marginals(case, times, trials, seed)?;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (ti, &t) in times.iter().enumerate() {
        let z = z_scores(&exact[ti], &sim[ti], trials)?;
        for s in 0..z.len() {
            worst = worst.max(z[s].abs());
            rows.push(OracleRow { case: case.name.clone(), time: t, state: s, p_exact: exact[ti][s], p_mc: sim[ti][s] as f64 / trials as f64, z: z[s] });
        }
    }
    Ok((worst, rows))
}
