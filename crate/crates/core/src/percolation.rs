//! Oriented bond percolation on Z^d x N, finite space-time probes of the
//! infection, and the block construction that reads a 5-dependent macroscopic
//! field off a live graphical realization.

use crate::engine::{self, evolve, CopyState, EngineError, RecordOpts};
use crate::graphical::{EventStream, MapKind, System};
use crate::lattice::{self, all_in_box, for_each_in_box, Cell, Site, Window};
use crate::model::{BackgroundSpec, ModelError, ModelSpec};
use crate::observables::Proportion;
use crate::rng::{self, derive_trial_seed, Role};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PercolationError {
    #[error("box around macro site {hat:?} at level {level} leaves the window")]
    BoxOverflow { level: u32, hat: Site },
    #[error("stream covers [0, {horizon}], need {needed}")]
    StreamShort { needed: f64, horizon: f64 },
    #[error("invalid macro parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Open/closed values of directed edges `(x, x + u)` at levels `1..=levels`
/// for `x` in the box `[-radius, radius]^d`. Edges leaving the box are closed.
#[derive(Clone, Debug)]
pub struct OrientedField {
    pub dim: usize,
    pub radius: u32,
    pub levels: u32,
    pub p: f64,
    /// Dependence range (0 for independent fields).
    pub m_dep: u32,
    sites: Window,
    bits: Vec<u8>,
}

impl OrientedField {
    pub fn closed(dim: usize, radius: u32, levels: u32, p: f64, m_dep: u32) -> OrientedField {
        let sites = Window::new(dim, radius);
        let n = levels as usize * sites.n_sites() * 2 * dim;
        OrientedField { dim, radius, levels, p, m_dep, sites, bits: vec![0; n] }
    }

    fn slot(&self, level: u32, x: Site, dir: usize) -> Option<usize> {
        if level == 0 || level > self.levels {
            return None;
        }
        let s = self.sites.site_index(x)?;
        let to = x.add(lattice::directions(self.dim)[dir]);
        if !self.sites.contains(to) {
            return None;
        }
        Some(((level as usize - 1) * self.sites.n_sites() + s) * 2 * self.dim + dir)
    }

    /// Value of the edge from `x` in direction `dir` (index into
    /// [`lattice::directions`]) used to step from level `level - 1` to `level`.
    pub fn open(&self, level: u32, x: Site, dir: usize) -> bool {
        self.slot(level, x, dir).is_some_and(|i| self.bits[i] == 1)
    }

    pub fn set(&mut self, level: u32, x: Site, dir: usize, v: bool) {
        if let Some(i) = self.slot(level, x, dir) {
            self.bits[i] = v as u8;
        }
    }

    pub fn contains(&self, x: Site) -> bool {
        self.sites.contains(x)
    }

    pub fn box_sites(&self) -> impl Iterator<Item = Site> + '_ {
        self.sites.sites()
    }

    /// Fraction of open edges among those that stay in the box.
    pub fn open_fraction(&self) -> f64 {
        let (mut open, mut total) = (0u64, 0u64);
        for k in 1..=self.levels {
            for x in self.sites.sites() {
                for d in 0..2 * self.dim {
                    if let Some(i) = self.slot(k, x, d) {
                        total += 1;
                        open += self.bits[i] as u64;
                    }
                }
            }
        }
        open as f64 / total.max(1) as f64
    }
}

/// I.i.d. Bernoulli(p) field. Edge values are `u < p` for one uniform per
/// edge, so fields with the same seed are pathwise ordered in `p`.
pub fn sample_independent_field(dim: usize, p: f64, levels: u32, radius: u32, seed: u64) -> OrientedField {
    let mut f = OrientedField::closed(dim, radius, levels, p, 0);
    let mut r = rng::stream(seed, Role::Field);
    for i in 0..f.bits.len() {
        let u: f64 = r.random();
        f.bits[i] = (u < p) as u8;
    }
    // zero the slots of edges that leave the box
    for k in 1..=levels {
        for x in f.sites.clone().sites() {
            for d in 0..2 * dim {
                if f.slot(k, x, d).is_none() {
                    let s = f.sites.site_index(x).unwrap();
                    let i = ((k as usize - 1) * f.sites.n_sites() + s) * 2 * dim + d;
                    f.bits[i] = 0;
                }
            }
        }
    }
    f
}

/// Sites reached at each level `from_level..=to_level` from `start` placed at
/// `from_level`; entry `i` is the set at level `from_level + i`.
pub fn cluster_levels(field: &OrientedField, start: &[Site], from_level: u32, to_level: u32) -> Vec<Vec<Site>> {
    let dirs = lattice::directions(field.dim);
    let mut cur: Vec<Site> = start.iter().copied().filter(|x| field.contains(*x)).collect();
    cur.sort();
    cur.dedup();
    let mut out = vec![cur.clone()];
    for k in from_level + 1..=to_level.min(field.levels) {
        let mut next = Vec::new();
        for &y in &cur {
            for (d, u) in dirs.iter().enumerate() {
                if field.open(k, y, d) {
                    next.push(y.add(*u));
                }
            }
        }
        next.sort();
        next.dedup();
        out.push(next.clone());
        cur = next;
        if cur.is_empty() {
            // remaining levels stay empty
            for _ in k + 1..=to_level.min(field.levels) {
                out.push(Vec::new());
            }
            break;
        }
    }
    out
}

/// `P_n` from the single site `x`.
pub fn cluster(field: &OrientedField, x: Site, n: u32) -> Vec<Site> {
    cluster_levels(field, &[x], 0, n).pop().unwrap_or_default()
}

/// First empty level; `None` if alive at the last level of the field.
pub fn extinction_level(field: &OrientedField, x: Site) -> Option<u32> {
    cluster_levels(field, &[x], 0, field.levels).iter().position(|s| s.is_empty()).map(|k| k as u32)
}

/// Levels `k >= 1` at which `target` is reached from `(x, 0)`, and the first
/// of those from which the cluster of `(target, k)` is alive at the last level.
#[derive(Clone, Debug, Serialize)]
pub struct HitCounts {
    pub hits: Vec<u32>,
    pub r_hat_1: Option<u32>,
}

impl HitCounts {
    /// `R_n`, with `R_0 = 0`.
    pub fn r(&self, n: usize) -> Option<u32> {
        if n == 0 {
            Some(0)
        } else {
            self.hits.get(n - 1).copied()
        }
    }
}

pub fn hit_counts(field: &OrientedField, x: Site, target: Site) -> HitCounts {
    let levels = cluster_levels(field, &[x], 0, field.levels);
    let hits: Vec<u32> = (1..levels.len()).filter(|&k| levels[k].binary_search(&target).is_ok()).map(|k| k as u32).collect();
    let r_hat_1 = hits.iter().copied().find(|&k| {
        let fwd = cluster_levels(field, &[target], k, field.levels);
        fwd.last().is_some_and(|s| !s.is_empty()) && fwd.len() as u32 == field.levels - k + 1
    });
    HitCounts { hits, r_hat_1 }
}

/// Initial set for slab densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlabStart {
    Site,
    /// Every box site with all coordinates even.
    EvenLattice,
}

/// `|P_n ∩ B_r ∩ (Z x {0}^{d-1})|` for the cluster from `start`.
pub fn density_slab(field: &OrientedField, start: SlabStart, n: u32, r: f64) -> usize {
    let init: Vec<Site> = match start {
        SlabStart::Site => vec![Site::ORIGIN],
        SlabStart::EvenLattice => field.box_sites().filter(|x| (0..field.dim).all(|i| x.0[i] % 2 == 0)).collect(),
    };
    let pn = cluster_levels(field, &init, 0, n).pop().unwrap_or_default();
    pn.iter().filter(|x| (1..field.dim).all(|i| x.0[i] == 0) && (x.0[0].unsigned_abs() as f64) <= r).count()
}

/// Whether `y + [-n, n]^d` is fully infected in `eta`.
pub fn cube_full(w: &Window, eta: &[u8], y: Site, n: i32) -> bool {
    let d = w.dim();
    let lo = y.sub(Site::new(&vec![n; d]));
    let hi = y.add(Site::new(&vec![n; d]));
    all_in_box(d, lo, hi, |z| w.site_index(z).is_some_and(|i| eta[i] == 1))
}

/// Lexicographically smallest `y` in `[lo, hi]` whose cube is full in `eta`.
pub fn first_full_in(w: &Window, eta: &[u8], lo: Site, hi: Site, n: i32) -> Option<Site> {
    let mut found = None;
    all_in_box(w.dim(), lo, hi, |y| {
        if cube_full(w, eta, y, n) {
            found = Some(y);
            false
        } else {
            true
        }
    });
    found
}

fn clip(a: Site, b: Site, dim: usize, max: bool) -> Site {
    let mut c = a;
    for i in 0..dim {
        c.0[i] = if max { a.0[i].max(b.0[i]) } else { a.0[i].min(b.0[i]) };
    }
    c
}

/// First `(y, t)` with `t` in `[t_a, t_b]` and `y` in `[lo, hi]` such that the
/// cube of half-width `n` around `y` is full in the logged copy. Ties in time
/// go to the lexicographically smallest `y`.
pub fn first_full_cube(w: &Window, copy: &CopyState, t_a: f64, t_b: f64, lo: Site, hi: Site, n: i32) -> Option<(Site, f64)> {
    let mut eta = copy.eta_at(t_a);
    if let Some(y) = first_full_in(w, &eta, lo, hi, n) {
        return Some((y, t_a));
    }
    let d = w.dim();
    let nn = Site::new(&vec![n; d]);
    for &(t, x, v) in &copy.log {
        if t <= t_a {
            continue;
        }
        if t > t_b {
            break;
        }
        eta[x as usize] = v;
        if v == 1 {
            let z = w.site(x as usize);
            let a = clip(z.sub(nn), lo, d, true);
            let b = clip(z.add(nn), hi, d, false);
            if let Some(y) = first_full_in(w, &eta, a, b, n) {
                return Some((y, t));
            }
        }
    }
    None
}

fn box_of(dim: usize, lo: &[i32], hi: &[i32]) -> (Site, Site) {
    let _ = dim;
    (Site::new(lo), Site::new(hi))
}

/// Monte Carlo estimates of the finite space-time events.
#[derive(Clone, Debug, Serialize)]
pub struct FiniteSpaceTime {
    pub n: u32,
    pub l: u32,
    pub t: f64,
    pub e1: Proportion,
    /// E1 with the target orthant reflected through every coordinate plane.
    pub e1_reflected: Proportion,
    pub e2: Proportion,
    pub e3: Proportion,
}

impl FiniteSpaceTime {
    /// The reflected estimate must agree with the direct one.
    pub fn reflection_consistent(&self) -> bool {
        self.e1.overlaps(&self.e1_reflected)
    }
}

/// Estimates of `P(E1)`, `P(E2)`, `P(E3)` from truncated runs started from
/// the full cube `[-n, n]^d` and the all-zero background.
pub fn probe_finite_spacetime(model: &ModelSpec, dim: usize, n: u32, l: u32, t: f64, trials: u64, seed: u64) -> Result<FiniteSpaceTime, PercolationError> {
    let (ni, li) = (n as i32, l as i32);
    let s1 = System::new(Window::new(dim, l + n), model.clone())?;
    let s2 = System::new(Window::new(dim, l + 2 * n), model.clone())?;
    let s3 = System::new(Window::new(dim, 2 * l + 3 * n), model.clone())?;
    let run = |sys: &System, horizon: f64, s: u64| -> Result<CopyState, PercolationError> {
        let st = EventStream::sample(&sys.catalog, horizon, s);
        let c = CopyState::new("cube", 0.0, engine::eta_cube(sys, Site::ORIGIN, ni), engine::xi_const(sys, 0));
        let opts = RecordOpts { infection_log: true, background_log: false, snapshot_dt: None, stop_when_extinct: true };
        Ok(evolve(sys, &st, vec![c], opts, horizon)?.copies.remove(0))
    };
    let rest = |v: i32| vec![v; dim - 1];
    let counts = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<[u64; 4], PercolationError> {
            let seed = derive_trial_seed(seed, i);
            let c1 = run(&s1, t + 1.0, rng::keyed(seed, 1).random())?;
            let (lo, hi) = box_of(dim, &vec![0; dim], &vec![li - 1; dim]);
            let e1 = first_full_cube(&s1.window, &c1, t + 1.0, t + 1.0, lo, hi, ni).is_some();
            let (lo, hi) = box_of(dim, &vec![-(li - 1); dim], &vec![0; dim]);
            // the reflected estimate uses an independent run
            let c1r = run(&s1, t + 1.0, rng::keyed(seed, 4).random())?;
            let e1r = first_full_cube(&s1.window, &c1r, t + 1.0, t + 1.0, lo, hi, ni).is_some();
            let c2 = run(&s2, t + 1.0, rng::keyed(seed, 2).random())?;
            let lo2: Vec<i32> = std::iter::once(li + ni).chain(rest(0)).collect();
            let hi2: Vec<i32> = std::iter::once(li + ni).chain(rest(li - 1)).collect();
            let e2 = first_full_cube(&s2.window, &c2, 1.0, t + 1.0 - 1e-12, Site::new(&lo2), Site::new(&hi2), ni).is_some();
            let c3 = run(&s3, 2.0 * t, rng::keyed(seed, 3).random())?;
            let lo3: Vec<i32> = std::iter::once(li + ni).chain(rest(0)).collect();
            let hi3: Vec<i32> = std::iter::once(2 * li + ni).chain(rest(2 * li - 1)).collect();
            let e3 = first_full_cube(&s3.window, &c3, t, 2.0 * t - 1e-12, Site::new(&lo3), Site::new(&hi3), ni).is_some();
            Ok([e1 as u64, e1r as u64, e2 as u64, e3 as u64])
        })
        .try_reduce(|| [0; 4], |a, b| Ok([a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]))?;
    Ok(FiniteSpaceTime {
        n,
        l,
        t,
        e1: Proportion::new(counts[0], trials),
        e1_reflected: Proportion::new(counts[1], trials),
        e2: Proportion::new(counts[2], trials),
        e3: Proportion::new(counts[3], trials),
    })
}

/// Seed half-width `n`, macro box half-width `a` and macro time unit `b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroParams {
    pub n: u32,
    pub a: u32,
    pub b: f64,
}

impl MacroParams {
    pub fn check(&self) -> Result<(), PercolationError> {
        if self.n >= self.a || !(self.b > 0.0) {
            return Err(PercolationError::Params(format!("need n < a and b > 0, got n={} a={} b={}", self.n, self.a, self.b)));
        }
        Ok(())
    }
}

/// Macroscopic geometry anchored at microscopic origin `x0` and time `t0`.
#[derive(Clone, Copy, Debug)]
pub struct MacroGeom {
    pub x0: Site,
    pub t0: f64,
    pub params: MacroParams,
}

impl MacroGeom {
    fn scale(&self, hat: Site, k: i32) -> Site {
        self.x0.add(hat.scale(k))
    }

    /// Centre `x0 + 2a x̂` of the macro box `B_{x̂,a}`.
    pub fn centre(&self, hat: Site) -> Site {
        self.scale(hat, 2 * self.params.a as i32)
    }

    /// Corners of `B_{x̂,a}`.
    pub fn block(&self, dim: usize, hat: Site) -> (Site, Site) {
        let a = Site::new(&vec![self.params.a as i32; dim]);
        let c = self.centre(hat);
        (c.sub(a), c.add(a))
    }

    /// Spatial corners of `H(x̂, j)`.
    pub fn h_box(&self, dim: usize, hat: Site) -> (Site, Site) {
        let a5 = Site::new(&vec![5 * self.params.a as i32; dim]);
        let c = self.centre(hat);
        (c.sub(a5), c.add(a5))
    }

    /// Time interval of `S(x̂, j)`.
    pub fn slot_time(&self, j: u32) -> (f64, f64) {
        let b = self.params.b;
        (self.t0 + j as f64 * b, self.t0 + (j + 1) as f64 * b)
    }

    /// Whether `(y, t)` lies in `S(x̂, j)`.
    pub fn in_slot(&self, dim: usize, hat: Site, j: u32, y: Site, t: f64) -> bool {
        let (lo, hi) = self.block(dim, hat);
        let (ta, tb) = self.slot_time(j);
        (0..dim).all(|i| y.0[i] >= lo.0[i] && y.0[i] <= hi.0[i]) && t >= ta - 1e-9 && t <= tb + 1e-9
    }
}

fn inside(dim: usize, x: Site, lo: Site, hi: Site) -> bool {
    (0..dim).all(|i| x.0[i] >= lo.0[i] && x.0[i] <= hi.0[i])
}

/// Anchor site (coordinates) of every map in the catalog: the source of an
/// arrow, the site of a recovery, or the lower endpoint of a cell.
pub fn map_anchors(sys: &System) -> Vec<Site> {
    sys.catalog
        .maps
        .iter()
        .map(|m| match *m {
            MapKind::Inf { arrow, .. } => sys.window.site(sys.arrows[arrow as usize].from as usize),
            MapKind::Rec { site, .. } => sys.window.site(site as usize),
            MapKind::Bg { cell, .. } | MapKind::SpinUp { cell, .. } | MapKind::SpinDown { cell, .. } => match sys.window.cell(cell as usize) {
                Cell::Site(s) => s,
                Cell::Edge(e) => e.lo,
            },
        })
        .collect()
}

struct BlockCopy {
    hat: Site,
    start: f64,
    lo: Site,
    hi: Site,
    eta: Vec<u8>,
    xi: Vec<u8>,
    alive: bool,
    found: Vec<Option<(Site, f64)>>,
}

/// For each tracked `(x̂, x, s)` with `(x, s)` in `S(x̂, j)`, the outcome of
/// `E^u` for every `u` in direction order: the first fully infected target
/// cube `(y, t)` in `S(x̂ + u, j + 5)` reached by the infection started from
/// the cube at `(x, s)` with the all-zero background and confined to
/// `H(x̂, j)`.
pub fn block_events(sys: &System, stream: &EventStream, anchors: &[Site], geom: &MacroGeom, j: u32, tracked: &[(Site, Site, f64)]) -> Result<Vec<Vec<Option<(Site, f64)>>>, PercolationError> {
    let dim = sys.dim();
    let w = &sys.window;
    let n = geom.params.n as i32;
    let dirs = lattice::directions(dim);
    let (target_lo, target_hi) = geom.slot_time(j + 5);
    if stream.horizon() < target_hi {
        return Err(PercolationError::StreamShort { needed: target_hi, horizon: stream.horizon() });
    }
    let mut copies = Vec::with_capacity(tracked.len());
    let mut by_hat = BTreeMap::new();
    for &(hat, x, s) in tracked {
        let (lo, hi) = geom.h_box(dim, hat);
        if !w.contains(lo) || !w.contains(hi) {
            return Err(PercolationError::BoxOverflow { level: j / 5 + 1, hat });
        }
        by_hat.insert(hat, copies.len());
        copies.push(BlockCopy {
            hat,
            start: s,
            lo,
            hi,
            eta: engine::eta_cube(sys, x, n),
            xi: engine::xi_const(sys, 0),
            alive: true,
            found: vec![None; dirs.len()],
        });
    }
    if copies.is_empty() {
        return Ok(Vec::new());
    }
    let local = !matches!(sys.model.background, BackgroundSpec::SpinSystem { .. });
    let span = 5 * geom.params.a as i32;
    let step = 2 * geom.params.a as i32;
    let targets: Vec<Vec<(Site, Site)>> = copies.iter().map(|c| dirs.iter().map(|u| geom.block(dim, c.hat.add(*u))).collect()).collect();
    let nn = Site::new(&vec![n; dim]);

    let t_first = copies.iter().map(|c| c.start).fold(f64::INFINITY, f64::min);
    let mut i = stream.first_after(t_first);
    let mut scanned = false;
    let mut open = copies.len();
    let mut cands: Vec<usize> = Vec::new();
    while open > 0 {
        let t = if i < stream.times.len() { stream.times[i] } else { f64::INFINITY };
        if !scanned && t > target_lo {
            scanned = true;
            for (ci, c) in copies.iter_mut().enumerate() {
                if !c.alive {
                    continue;
                }
                for (u, &(lo, hi)) in targets[ci].iter().enumerate() {
                    if let Some(y) = first_full_in(w, &c.eta, lo, hi, n) {
                        c.found[u] = Some((y, target_lo));
                    }
                }
                if c.found.iter().all(|f| f.is_some()) {
                    c.alive = false;
                    open -= 1;
                }
            }
        }
        if t > target_hi || open == 0 {
            break;
        }
        let m = &sys.catalog.maps[stream.maps[i] as usize];
        let a = anchors[stream.maps[i] as usize];
        cands.clear();
        if local {
            let mut lo = [0i32; 3];
            let mut hi = [0i32; 3];
            for k in 0..dim {
                let rel = a.0[k] - geom.x0.0[k];
                lo[k] = (rel - span).div_euclid(step) + ((rel - span).rem_euclid(step) != 0) as i32;
                hi[k] = (rel + span).div_euclid(step);
            }
            for_each_in_box(dim, &lo, &hi, |h| {
                if let Some(&ci) = by_hat.get(&h) {
                    cands.push(ci);
                }
            });
        } else {
            cands.extend(0..copies.len());
        }
        for &ci in &cands {
            let c = &mut copies[ci];
            if !c.alive || t <= c.start || (local && !inside(dim, a, c.lo, c.hi)) {
                continue;
            }
            if let MapKind::Inf { arrow, .. } = m {
                if !inside(dim, w.site(sys.arrows[*arrow as usize].to as usize), c.lo, c.hi) {
                    continue;
                }
            }
            match sys.apply(m, &mut c.eta, &mut c.xi) {
                crate::graphical::Change::Eta { site, val: 1 } if scanned => {
                    let z = w.site(site as usize);
                    for (u, &(lo, hi)) in targets[ci].iter().enumerate() {
                        if c.found[u].is_some() {
                            continue;
                        }
                        let a = clip(z.sub(nn), lo, dim, true);
                        let b = clip(z.add(nn), hi, dim, false);
                        if let Some(y) = first_full_in(w, &c.eta, a, b, n) {
                            c.found[u] = Some((y, t));
                        }
                    }
                    if c.found.iter().all(|f| f.is_some()) {
                        c.alive = false;
                        open -= 1;
                    }
                }
                crate::graphical::Change::Eta { val: 0, .. }
                    if c.eta.iter().all(|v| *v == 0) => {
                        c.alive = false;
                        open -= 1;
                    }
                _ => {}
            }
        }
        i += 1;
    }
    Ok(copies.into_iter().map(|c| c.found).collect())
}

/// Monte Carlo estimate of `P(E^u(n, a, b, x, s))` for `(x, s)` in `S(0, 0)`.
#[allow(clippy::too_many_arguments)]
pub fn probe_block_event(model: &ModelSpec, dim: usize, params: MacroParams, dir: usize, x: Site, s: f64, trials: u64, seed: u64) -> Result<Proportion, PercolationError> {
    params.check()?;
    let sys = System::new(Window::new(dim, 5 * params.a), model.clone())?;
    let anchors = map_anchors(&sys);
    let geom = MacroGeom { x0: Site::ORIGIN, t0: 0.0, params };
    let hits = (0..trials)
        .into_par_iter()
        .map(|i| -> Result<u64, PercolationError> {
            let st = EventStream::sample(&sys.catalog, 6.0 * params.b, derive_trial_seed(seed, i));
            let r = block_events(&sys, &st, &anchors, &geom, 0, &[(Site::ORIGIN, x, s)])?;
            Ok(r[0][dir].is_some() as u64)
        })
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    Ok(Proportion::new(hits, trials))
}

/// Outcome of one block construction.
#[derive(Clone, Debug)]
pub struct BlockCoupling {
    pub geom: MacroGeom,
    pub field: OrientedField,
    /// `seeds[k]`: macro site to seed centre `Y_{x̂,k}`; absent sites are daggers.
    pub seeds: Vec<BTreeMap<Site, (Site, f64)>>,
    pub audit: BlockAudit,
}

impl BlockCoupling {
    /// First level with no seed (the extinction level of the tracked cluster),
    /// `None` if seeds remain at the last level.
    pub fn extinction_level(&self) -> Option<u32> {
        self.seeds.iter().position(|s| s.is_empty()).map(|k| k as u32)
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct BlockAudit {
    /// Levels `k >= 1` built from a non-empty set of seeds.
    pub levels_tracked: u32,
    pub tracked_edges: u64,
    pub open_tracked: u64,
    /// Cluster sites without a seed, seeds outside their slot, or seed cubes
    /// not fully infected in the reference run.
    pub violations: u64,
    pub checked_seeds: u64,
}

impl BlockAudit {
    pub fn open_fraction(&self) -> f64 {
        self.open_tracked as f64 / self.tracked_edges.max(1) as f64
    }

    pub fn merge(&mut self, o: &BlockAudit) {
        self.levels_tracked += o.levels_tracked;
        self.tracked_edges += o.tracked_edges;
        self.open_tracked += o.open_tracked;
        self.violations += o.violations;
        self.checked_seeds += o.checked_seeds;
    }
}

/// Build the macroscopic field for `levels` levels from the full cube at
/// `(geom.x0, geom.t0)`. Edges out of seeded sites are the block events; all
/// other edges are Bernoulli(p) from the filler stream. When a `reference`
/// copy with an infection log is given, every seed cube is checked to be
/// fully infected in it at the seed time.
pub fn build_block_coupling(sys: &System, stream: &EventStream, geom: MacroGeom, levels: u32, p: f64, filler_seed: u64, reference: Option<&CopyState>) -> Result<BlockCoupling, PercolationError> {
    geom.params.check()?;
    let dim = sys.dim();
    let dirs = lattice::directions(dim);
    let anchors = map_anchors(sys);
    let mut field = OrientedField::closed(dim, levels, levels, p, 5);
    let mut filler = rng::stream(filler_seed, Role::Filler);
    let mut seeds = vec![BTreeMap::from([(Site::ORIGIN, (geom.x0, geom.t0))])];
    let mut audit = BlockAudit::default();
    let box_sites: Vec<Site> = field.box_sites().collect();
    for k in 1..=levels {
        let prev = &seeds[k as usize - 1];
        let tracked: Vec<(Site, Site, f64)> = prev.iter().map(|(h, (x, s))| (*h, *x, *s)).collect();
        let found = block_events(sys, stream, &anchors, &geom, 5 * (k - 1), &tracked)?;
        if !tracked.is_empty() {
            audit.levels_tracked += 1;
        }
        let outcome: BTreeMap<Site, &Vec<Option<(Site, f64)>>> = tracked.iter().map(|t| t.0).zip(found.iter()).collect();
        for &x in &box_sites {
            for d in 0..dirs.len() {
                let v = match outcome.get(&x) {
                    Some(f) => {
                        audit.tracked_edges += 1;
                        audit.open_tracked += f[d].is_some() as u64;
                        f[d].is_some()
                    }
                    None => filler.random_bool(p),
                };
                field.set(k, x, d, v);
            }
        }
        let mut next = BTreeMap::new();
        for &x in &box_sites {
            for (d, u) in dirs.iter().enumerate() {
                if let Some(Some(y)) = outcome.get(&x.sub(*u)).map(|f| f[d]) {
                    next.entry(x).or_insert(y);
                }
            }
        }
        seeds.push(next);
    }
    // audit: the open cluster of the field is exactly the seeded set, seeds
    // sit in their slots, and seed cubes are infected in the reference run
    let clusters = cluster_levels(&field, &[Site::ORIGIN], 0, levels);
    for k in 0..=levels as usize {
        let seeded: Vec<Site> = seeds[k].keys().copied().collect();
        let cl = clusters.get(k).cloned().unwrap_or_default();
        audit.violations += cl.iter().filter(|x| seeds[k].get(x).is_none()).count() as u64;
        audit.violations += seeded.iter().filter(|x| cl.binary_search(x).is_err()).count() as u64;
        for (hat, &(y, t)) in &seeds[k] {
            audit.checked_seeds += 1;
            if k > 0 && !geom.in_slot(dim, *hat, 5 * k as u32, y, t) {
                audit.violations += 1;
            }
            if let Some(r) = reference {
                if !cube_full(&sys.window, &r.eta_at(t), y, geom.params.n as i32) {
                    audit.violations += 1;
                }
            }
        }
    }
    Ok(BlockCoupling { geom, field, seeds, audit })
}

/// Window radius needed to track `levels` levels from a seed at `x0`.
pub fn coupling_radius(params: &MacroParams, levels: u32, x0: Site, dim: usize) -> u32 {
    let reach = 2 * params.a * levels + 5 * params.a;
    reach + x0.coords(dim).iter().map(|c| c.unsigned_abs()).max().unwrap_or(0)
}
