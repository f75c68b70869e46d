//! Event-driven evolution of coupled copies of `(eta, xi)` on one shared
//! event stream, plus the recovery-free maximal process used as a
//! truncation certificate.

use crate::graphical::{Change, EventStream, MapKind, System};
use crate::lattice::Site;
use crate::model::BackgroundSpec;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("stream exhausted: requested time {requested} beyond horizon {horizon}")]
    StreamExhausted { requested: f64, horizon: f64 },
    #[error("restart time {0} lies before the start of the run")]
    RestartBeforeStart(f64),
    #[error("site {0:?} outside the window")]
    OutsideWindow(Site),
}

/// What to record while evolving.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecordOpts {
    /// Exact log of infection changes `(time, site, value)`.
    pub infection_log: bool,
    /// Exact log of background changes `(time, cell, value)`.
    pub background_log: bool,
    /// Snapshot grid spacing for sparse infected-set dumps.
    pub snapshot_dt: Option<f64>,
    /// Stop consuming events once every started copy is extinct. The
    /// background is then left at the extinction time.
    pub stop_when_extinct: bool,
}

impl Default for RecordOpts {
    fn default() -> Self {
        RecordOpts { infection_log: true, background_log: false, snapshot_dt: None, stop_when_extinct: false }
    }
}

impl RecordOpts {
    pub fn quiet() -> Self {
        RecordOpts { infection_log: false, background_log: false, snapshot_dt: None, stop_when_extinct: true }
    }
}

/// One labelled copy of the process.
#[derive(Clone, Debug)]
pub struct CopyState {
    pub label: String,
    /// Time at which the copy starts; it only sees events strictly after it.
    pub start: f64,
    pub eta0: Vec<u8>,
    pub xi0: Vec<u8>,
    pub eta: Vec<u8>,
    pub xi: Vec<u8>,
    pub n_infected: usize,
    pub extinct_at: Option<f64>,
    pub log: Vec<(f64, u32, u8)>,
    pub bg_log: Vec<(f64, u32, u8)>,
    pub snapshots: Vec<(f64, Vec<u32>)>,
    /// Optional site mask: infections into sites outside the mask are ignored.
    pub mask: Option<Vec<bool>>,
}

impl CopyState {
    pub fn new(label: impl Into<String>, start: f64, eta: Vec<u8>, xi: Vec<u8>) -> CopyState {
        let n = eta.iter().filter(|v| **v != 0).count();
        CopyState {
            label: label.into(),
            start,
            eta0: eta.clone(),
            xi0: xi.clone(),
            eta,
            xi,
            n_infected: n,
            extinct_at: if n == 0 { Some(start) } else { None },
            log: Vec::new(),
            bg_log: Vec::new(),
            snapshots: Vec::new(),
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> CopyState {
        for (e, m) in self.eta.iter_mut().zip(&mask) {
            if !m {
                *e = 0;
            }
        }
        self.eta0 = self.eta.clone();
        self.n_infected = self.eta.iter().filter(|v| **v != 0).count();
        self.extinct_at = if self.n_infected == 0 { Some(self.start) } else { None };
        self.mask = Some(mask);
        self
    }

    pub fn infected(&self) -> Vec<u32> {
        ones(&self.eta)
    }

    /// Infection configuration at time `t` rebuilt from the infection log.
    pub fn eta_at(&self, t: f64) -> Vec<u8> {
        let mut e = self.eta0.clone();
        for &(s, x, v) in &self.log {
            if s > t {
                break;
            }
            e[x as usize] = v;
        }
        e
    }

    /// Background configuration at time `t` rebuilt from the background log.
    pub fn xi_at(&self, t: f64) -> Vec<u8> {
        let mut e = self.xi0.clone();
        for &(s, c, v) in &self.bg_log {
            if s > t {
                break;
            }
            e[c as usize] = v;
        }
        e
    }
}

pub fn ones(v: &[u8]) -> Vec<u32> {
    v.iter().enumerate().filter(|(_, x)| **x != 0).map(|(i, _)| i as u32).collect()
}

/// Several copies driven by one event stream.
pub struct CoupledRun<'a> {
    pub sys: &'a System,
    pub stream: &'a EventStream,
    pub copies: Vec<CopyState>,
    pub time: f64,
    cursor: usize,
    opts: RecordOpts,
    next_snap: f64,
}

impl<'a> CoupledRun<'a> {
    pub fn new(sys: &'a System, stream: &'a EventStream, copies: Vec<CopyState>, opts: RecordOpts) -> CoupledRun<'a> {
        CoupledRun::starting_at(sys, stream, 0.0, copies, opts)
    }

    /// A run whose clock starts at `t0` (events at or before `t0` are skipped).
    pub fn starting_at(sys: &'a System, stream: &'a EventStream, t0: f64, mut copies: Vec<CopyState>, opts: RecordOpts) -> CoupledRun<'a> {
        for c in &mut copies {
            if c.start < t0 {
                c.start = t0;
                if c.n_infected == 0 {
                    c.extinct_at = Some(t0);
                }
            }
        }
        let mut run = CoupledRun { sys, stream, copies, time: t0, cursor: stream.first_after(t0), opts, next_snap: t0 };
        run.take_snapshots(t0);
        run
    }

    fn take_snapshots(&mut self, upto: f64) {
        let Some(dt) = self.opts.snapshot_dt else { return };
        while self.next_snap <= upto + 1e-12 {
            let g = self.next_snap;
            for c in &mut self.copies {
                if c.start <= g {
                    c.snapshots.push((g, ones(&c.eta)));
                }
            }
            self.next_snap = g + dt;
        }
    }

    /// Process every event with time in `(self.time, t]`.
    pub fn advance_to(&mut self, t: f64) -> Result<(), EngineError> {
        if t > self.stream.horizon() + 1e-12 {
            return Err(EngineError::StreamExhausted { requested: t, horizon: self.stream.horizon() });
        }
        let sys = self.sys;
        let times = &self.stream.times;
        let maps = &self.stream.maps;
        let opts = self.opts;
        while self.cursor < times.len() && times[self.cursor] <= t {
            let s = times[self.cursor];
            if opts.snapshot_dt.is_some() && self.next_snap < s {
                self.take_snapshots(s - 1e-15);
            }
            if opts.stop_when_extinct && self.copies.iter().all(|c| c.extinct_at.is_some() && c.start < s) {
                self.cursor = times.len();
                break;
            }
            let m = &sys.catalog.maps[maps[self.cursor] as usize];
            for c in self.copies.iter_mut() {
                if s <= c.start {
                    continue;
                }
                step_copy(sys, m, s, c, &opts);
            }
            self.cursor += 1;
        }
        self.time = self.time.max(t);
        self.take_snapshots(t);
        Ok(())
    }

    /// Add a copy that starts at `t0` with the given configuration. If `t0` is
    /// before the current time the copy is caught up by replaying the stream.
    pub fn restart_copy(&mut self, label: impl Into<String>, t0: f64, eta: Vec<u8>, xi: Vec<u8>) -> Result<usize, EngineError> {
        let start_of_run = self.copies.iter().map(|c| c.start).fold(self.time, f64::min);
        if t0 < start_of_run {
            return Err(EngineError::RestartBeforeStart(t0));
        }
        if t0 > self.stream.horizon() {
            return Err(EngineError::StreamExhausted { requested: t0, horizon: self.stream.horizon() });
        }
        let mut c = CopyState::new(label, t0, eta, xi);
        if t0 < self.time {
            let from = self.stream.first_after(t0);
            let upto = self.cursor;
            for i in from..upto {
                let s = self.stream.times[i];
                let m = &self.sys.catalog.maps[self.stream.maps[i] as usize];
                step_copy(self.sys, m, s, &mut c, &self.opts);
            }
        }
        self.copies.push(c);
        Ok(self.copies.len() - 1)
    }

    pub fn finish(self) -> Trajectory {
        Trajectory { horizon: self.time, copies: self.copies }
    }
}

#[inline]
fn step_copy(sys: &System, m: &MapKind, s: f64, c: &mut CopyState, opts: &RecordOpts) {
    if let (Some(mask), MapKind::Inf { arrow, .. }) = (&c.mask, m) {
        if !mask[sys.arrows[*arrow as usize].to as usize] {
            return;
        }
    }
    match sys.apply(m, &mut c.eta, &mut c.xi) {
        Change::None => {}
        Change::Eta { site, val } => {
            if val == 1 {
                c.n_infected += 1;
            } else {
                c.n_infected -= 1;
                if c.n_infected == 0 {
                    c.extinct_at = Some(s);
                }
            }
            if opts.infection_log {
                c.log.push((s, site, val));
            }
        }
        Change::Xi { cell, val } => {
            if opts.background_log {
                c.bg_log.push((s, cell, val));
            }
        }
    }
}

/// Completed run: the copies with their logs.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub horizon: f64,
    pub copies: Vec<CopyState>,
}

/// Evolve the given copies from time 0 to `t`.
pub fn evolve(sys: &System, stream: &EventStream, copies: Vec<CopyState>, opts: RecordOpts, t: f64) -> Result<Trajectory, EngineError> {
    let mut run = CoupledRun::new(sys, stream, copies, opts);
    run.advance_to(t)?;
    Ok(run.finish())
}

/// Run `copies` on one stream and count grid times `0, dt, 2dt, ..., t` at
/// which `ok` fails on the current states.
pub fn audit_on_grid(sys: &System, stream: &EventStream, copies: Vec<CopyState>, t: f64, dt: f64, ok: impl Fn(&[CopyState]) -> bool) -> Result<usize, EngineError> {
    let opts = RecordOpts { infection_log: false, background_log: false, snapshot_dt: None, stop_when_extinct: false };
    let mut run = CoupledRun::new(sys, stream, copies, opts);
    let mut bad = 0;
    let steps = (t / dt).round() as usize;
    for k in 0..=steps {
        run.advance_to((k as f64 * dt).min(t))?;
        if !ok(&run.copies) {
            bad += 1;
        }
    }
    Ok(bad)
}

fn leq(a: &[u8], b: &[u8]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Additivity: copies from `eta1`, `eta2` and their union under one `xi0`.
pub fn additivity_violations(sys: &System, stream: &EventStream, eta1: &[u8], eta2: &[u8], xi0: &[u8], t: f64, dt: f64) -> Result<usize, EngineError> {
    let union: Vec<u8> = eta1.iter().zip(eta2).map(|(a, b)| a | b).collect();
    let copies = vec![
        CopyState::new("a", 0.0, eta1.to_vec(), xi0.to_vec()),
        CopyState::new("b", 0.0, eta2.to_vec(), xi0.to_vec()),
        CopyState::new("ab", 0.0, union, xi0.to_vec()),
    ];
    audit_on_grid(sys, stream, copies, t, dt, |c| c[2].eta.iter().zip(&c[0].eta).zip(&c[1].eta).all(|((u, a), b)| *u == (a | b)))
}

/// Monotone sandwich: `(eta_lo, xi_lo) <= (eta_hi, xi_hi)` must persist.
/// Meaningful only for monotone models.
pub fn sandwich_violations(sys: &System, stream: &EventStream, lo: (&[u8], &[u8]), hi: (&[u8], &[u8]), t: f64, dt: f64) -> Result<usize, EngineError> {
    let copies = vec![CopyState::new("lo", 0.0, lo.0.to_vec(), lo.1.to_vec()), CopyState::new("hi", 0.0, hi.0.to_vec(), hi.1.to_vec())];
    audit_on_grid(sys, stream, copies, t, dt, |c| leq(&c[0].eta, &c[1].eta) && leq(&c[0].xi, &c[1].xi))
}

/// Worst-case monotonicity: the infection under `xi` contains the infection
/// under the all-zero background.
pub fn worst_case_violations(sys: &System, stream: &EventStream, eta: &[u8], xi: &[u8], t: f64, dt: f64) -> Result<usize, EngineError> {
    let copies = vec![CopyState::new("zero", 0.0, eta.to_vec(), xi_const(sys, 0)), CopyState::new("xi", 0.0, eta.to_vec(), xi.to_vec())];
    audit_on_grid(sys, stream, copies, t, dt, |c| leq(&c[0].eta, &c[1].eta))
}

/// Recovery-free, background-free growth: every Inf event is used.
#[derive(Clone, Debug)]
pub struct MaximalTrajectory {
    /// First time each site enters the maximal set (`f64::INFINITY` if never before `t_end`).
    pub first_hit: Vec<f64>,
    pub t_end: f64,
}

impl MaximalTrajectory {
    pub fn at(&self, t: f64) -> Vec<u32> {
        self.first_hit.iter().enumerate().filter(|(_, h)| **h <= t).map(|(i, _)| i as u32).collect()
    }
}

pub fn maximal_process(sys: &System, stream: &EventStream, eta0: &[u8], t: f64) -> MaximalTrajectory {
    maximal_process_from(sys, stream, 0.0, eta0, t)
}

/// Maximal process started at time `t0`.
pub fn maximal_process_from(sys: &System, stream: &EventStream, t0: f64, eta0: &[u8], t: f64) -> MaximalTrajectory {
    let mut hit: Vec<f64> = eta0.iter().map(|v| if *v != 0 { t0 } else { f64::INFINITY }).collect();
    let from = stream.first_after(t0);
    for i in from..stream.len() {
        let s = stream.times[i];
        if s > t {
            break;
        }
        if let MapKind::Inf { arrow, .. } = sys.catalog.maps[stream.maps[i] as usize] {
            let a = sys.arrows[arrow as usize];
            if hit[a.from as usize] <= s && hit[a.to as usize] == f64::INFINITY {
                hit[a.to as usize] = s;
            }
        }
    }
    MaximalTrajectory { first_hit: hit, t_end: t }
}

/// Whether the maximal process stays out of the collar of width
/// `range + 1` at the window boundary up to its end time, with the first
/// violation time otherwise.
pub fn truncation_ok(sys: &System, max: &MaximalTrajectory) -> (bool, Option<f64>) {
    let range = sys.model.background.range() as i32;
    let w = &sys.window;
    let first = (0..w.n_sites())
        .filter(|&s| w.depth(w.site(s)) <= range)
        .map(|s| max.first_hit[s])
        .fold(f64::INFINITY, f64::min);
    if first <= max.t_end {
        (false, Some(first))
    } else {
        (true, None)
    }
}

/// Dense infection vector with the given sites infected.
pub fn eta_from_sites(sys: &System, sites: &[Site]) -> Result<Vec<u8>, EngineError> {
    let mut e = vec![0u8; sys.n_sites()];
    for s in sites {
        e[sys.window.site_index(*s).ok_or(EngineError::OutsideWindow(*s))?] = 1;
    }
    Ok(e)
}

pub fn eta_all(sys: &System) -> Vec<u8> {
    vec![1u8; sys.n_sites()]
}

pub fn xi_const(sys: &System, level: u8) -> Vec<u8> {
    vec![level; sys.n_cells()]
}

/// Cube `x + [-n, n]^d` clipped to the window, as dense infection vector.
pub fn eta_cube(sys: &System, center: Site, n: i32) -> Vec<u8> {
    let mut e = vec![0u8; sys.n_sites()];
    crate::lattice::for_each_in_box(sys.dim(), &center.add(Site([-n; 3])).0, &center.add(Site([n; 3])).0, |x| {
        if let Some(i) = sys.window.site_index(x) {
            e[i] = 1;
        }
    });
    e
}

/// Initial background choice for experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundInit {
    Zero,
    /// Every cell at the top level `N`.
    Top,
    /// Exact stationary sample (product backgrounds only).
    Stationary,
}

/// Background for `init`; `None` when a stationary sample is not available.
pub fn xi_init<R: Rng>(sys: &System, init: BackgroundInit, rng: &mut R) -> Option<Vec<u8>> {
    match init {
        BackgroundInit::Zero => Some(xi_const(sys, 0)),
        BackgroundInit::Top => Some(xi_const(sys, sys.model.rates.n as u8)),
        BackgroundInit::Stationary => xi_stationary(sys, rng),
    }
}

/// Exact stationary sample for product backgrounds; `None` for spin systems.
pub fn xi_stationary<R: Rng>(sys: &System, rng: &mut R) -> Option<Vec<u8>> {
    if matches!(sys.model.background, BackgroundSpec::SpinSystem { .. }) {
        return None;
    }
    let pis: Vec<Vec<f64>> = [false, true]
        .iter()
        .map(|&edge| crate::model::stationary_dist(&sys.model.background.cell_generator(edge).unwrap()).expect("validated generator"))
        .collect();
    let n_sites = sys.n_sites();
    Some(
        (0..sys.n_cells())
            .map(|c| {
                let pi = &pis[(c >= n_sites) as usize];
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for (l, p) in pi.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return l as u8;
                    }
                }
                (pi.len() - 1) as u8
            })
            .collect(),
    )
}
