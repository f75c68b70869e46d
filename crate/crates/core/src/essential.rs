//! Essential hitting times, their shifted versions, bad-growth diagnostics
//! and the restart procedure that produces a seed `(sigma, Y)` from which the
//! macroscopic percolation survives.

use crate::engine::{self, BackgroundInit, CopyState, CoupledRun, EngineError, RecordOpts};
use crate::graphical::{EventStream, MapKind, System};
use crate::lattice::{self, l1_dist, Site, Window};
use crate::model::{ModelError, ModelSpec};
use crate::observables::{CensoredTime, Proportion};
use crate::percolation::{self, BlockAudit, MacroGeom, MacroParams, PercolationError};
use crate::rng::{self, derive_trial_seed, Role};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EssentialError {
    #[error("site {0:?} is outside the window")]
    OutsideWindow(Site),
    #[error("stream covers [0, {have}], need {need}")]
    StreamShort { need: f64, have: f64 },
    #[error("no stationary background sample for this model")]
    NoStationary,
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Percolation(#[from] PercolationError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EssentialOpts {
    /// A restarted copy alive this long (and at the horizon) counts as surviving forever.
    pub t_surv: f64,
    /// Length of the observation period after the base copy's start.
    pub horizon: f64,
}

impl Default for EssentialOpts {
    fn default() -> Self {
        EssentialOpts { t_surv: 50.0, horizon: 100.0 }
    }
}

/// One step of the iteration; times are relative to the base copy's start.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Iteration {
    pub l: f64,
    pub u: f64,
    pub v: CensoredTime,
}

#[derive(Clone, Debug, Serialize)]
pub struct EssentialRecord {
    pub x: Site,
    pub iterations: Vec<Iteration>,
    /// Number of iterations needed; `None` when censored, `Some(0)` when x is never hit.
    pub k: Option<u32>,
    pub sigma: CensoredTime,
    /// First hitting time `t(x)`.
    pub t_first: CensoredTime,
    /// Base copy alive at the horizon.
    pub survived: bool,
}

/// Run a base copy from `start` for `opts.horizon` with an infection log.
pub fn run_base(sys: &System, stream: &EventStream, eta: Vec<u8>, xi: Vec<u8>, start: f64, horizon: f64) -> Result<CopyState, EssentialError> {
    let mut run = CoupledRun::starting_at(sys, stream, start, vec![CopyState::new("base", start, eta, xi)], RecordOpts { stop_when_extinct: true, ..RecordOpts::default() });
    run.advance_to(start + horizon)?;
    Ok(run.copies.remove(0))
}

/// First time `>= from` (and `<= end`) at which site `x` of the logged copy
/// has value `want`.
fn first_time(c: &CopyState, x: u32, from: f64, want: u8, end: f64) -> Option<f64> {
    let mut val = c.eta0[x as usize];
    let mut i = 0;
    while i < c.log.len() && c.log[i].0 <= from {
        if c.log[i].1 == x {
            val = c.log[i].2;
        }
        i += 1;
    }
    if val == want {
        return Some(from);
    }
    c.log[i..].iter().take_while(|e| e.0 <= end).find(|e| e.1 == x && e.2 == want).map(|e| e.0)
}

/// Extinction time of `(δx, 0̲)` restarted at `u`, or `None` if alive at `end`.
fn restart_lifetime(sys: &System, stream: &EventStream, x: u32, u: f64, end: f64) -> Result<Option<f64>, EngineError> {
    let mut eta = vec![0u8; sys.n_sites()];
    eta[x as usize] = 1;
    let c = CopyState::new("restart", u, eta, engine::xi_const(sys, 0));
    let mut run = CoupledRun::starting_at(sys, stream, u, vec![c], RecordOpts::quiet());
    run.advance_to(end)?;
    Ok(run.copies[0].extinct_at)
}

/// Essential hitting time of `x` for a base copy already evolved (with its
/// infection log) over `[base.start, base.start + opts.horizon]`.
pub fn essential_hitting(sys: &System, stream: &EventStream, base: &CopyState, x: Site, opts: &EssentialOpts) -> Result<EssentialRecord, EssentialError> {
    let xi = sys.window.site_index(x).ok_or(EssentialError::OutsideWindow(x))? as u32;
    let start = base.start;
    let end = start + opts.horizon;
    if stream.horizon() < end {
        return Err(EssentialError::StreamShort { need: end, have: stream.horizon() });
    }
    let extinct = base.extinct_at.is_some_and(|e| e <= end);
    let delta_base = base.eta0.iter().enumerate().all(|(i, &v)| v == (i as u32 == xi) as u8) && base.xi0.iter().all(|&v| v == 0);
    let rel = |t: f64| t - start;
    let mut rec = EssentialRecord { x, iterations: Vec::new(), k: None, sigma: CensoredTime::CensoredAtHorizon, t_first: CensoredTime::CensoredAtHorizon, survived: !extinct };
    let mut l = start;
    loop {
        let Some(u) = first_time(base, xi, l, 1, end) else {
            if extinct {
                let n = rec.iterations.len();
                rec.k = Some(n as u32);
                rec.sigma = if n == 0 { CensoredTime::Infinite } else { CensoredTime::Finite(rec.iterations[n - 1].u) };
                if n == 0 {
                    rec.t_first = CensoredTime::Infinite;
                }
            }
            return Ok(rec);
        };
        if rec.iterations.is_empty() {
            rec.t_first = CensoredTime::Finite(rel(u));
        }
        let life = if rec.iterations.is_empty() && u == start && delta_base { base.extinct_at.filter(|e| *e <= end) } else { restart_lifetime(sys, stream, xi, u, end)? };
        let v = match life {
            Some(e) => CensoredTime::Finite(rel(e)),
            None if end - u >= opts.t_surv => CensoredTime::Infinite,
            None => CensoredTime::CensoredAtHorizon,
        };
        rec.iterations.push(Iteration { l: rel(l), u: rel(u), v });
        match (v, life) {
            (CensoredTime::Infinite, _) => {
                rec.k = Some(rec.iterations.len() as u32);
                rec.sigma = CensoredTime::Finite(rel(u));
                return Ok(rec);
            }
            (CensoredTime::Finite(_), Some(e)) => match first_time(base, xi, e, 0, end) {
                Some(next) => l = next,
                None => return Ok(rec),
            },
            _ => return Ok(rec),
        }
    }
}

/// Invariant violations of a record against its base copy.
pub fn check_record(sys: &System, base: &CopyState, rec: &EssentialRecord) -> Vec<String> {
    let mut bad = Vec::new();
    let Some(xi) = sys.window.site_index(rec.x) else {
        return vec![format!("{:?} outside window", rec.x)];
    };
    let abs = |t: f64| base.start + t;
    for (k, it) in rec.iterations.iter().enumerate() {
        if base.eta_at(abs(it.u))[xi] != 1 {
            bad.push(format!("x not infected at u_{}", k + 1));
        }
        if k > 0 && base.eta_at(abs(it.l))[xi] != 0 {
            bad.push(format!("x infected at l_{}", k + 1));
        }
        if it.l > it.u {
            bad.push(format!("l_{0} > u_{0}", k + 1));
        }
        if let Some(v) = it.v.value() {
            if v < it.u {
                bad.push(format!("v_{0} < u_{0}", k + 1));
            }
        }
        if let Some(next) = rec.iterations.get(k + 1) {
            if next.l < it.u || it.v.value().is_none_or(|v| next.l < v) {
                bad.push(format!("l_{} before v_{}", k + 2, k + 1));
            }
        }
    }
    if let Some(k) = rec.k {
        let k = k as usize;
        match (k, rec.sigma) {
            (0, CensoredTime::Infinite) => {
                if rec.survived {
                    bad.push("x never hit although the base survives".into());
                }
            }
            (k, CensoredTime::Finite(s)) if k >= 1 && k == rec.iterations.len() => {
                if s != rec.iterations[k - 1].u {
                    bad.push("sigma != u_K".into());
                }
                if rec.t_first.value().is_none_or(|t| s < t) {
                    bad.push("sigma < t(x)".into());
                }
                // {K = k, survival} <=> {u_k < inf, v_k = inf}
                let v_inf = rec.iterations[k - 1].v == CensoredTime::Infinite;
                if rec.survived != v_inf {
                    bad.push(format!("survival {} but v_K infinite {}", rec.survived, v_inf));
                }
            }
            _ => bad.push("K and sigma inconsistent".into()),
        }
    }
    bad
}

/// `sigma^xi(0)` and the essential hitting times `s^xi(x)` of the targets for
/// a fresh `(δ0, 0̲)` copy started at `sigma^xi(0)`.
#[derive(Clone, Debug, Serialize)]
pub struct ShiftedEssential {
    pub origin: EssentialRecord,
    pub records: Vec<EssentialRecord>,
}

impl ShiftedEssential {
    pub fn shift(&self) -> CensoredTime {
        self.origin.sigma
    }
}

/// The stream is extended as needed (it is prefix-consistent).
pub fn shifted_essential(sys: &System, stream: &mut EventStream, xi0: Vec<u8>, targets: &[Site], opts: &EssentialOpts) -> Result<ShiftedEssential, EssentialError> {
    stream.extend_to(&sys.catalog, opts.horizon);
    let delta0 = engine::eta_from_sites(sys, &[Site::ORIGIN])?;
    let base = run_base(sys, stream, delta0.clone(), xi0, 0.0, opts.horizon)?;
    let origin = essential_hitting(sys, stream, &base, Site::ORIGIN, opts)?;
    let mut records = Vec::new();
    if let CensoredTime::Finite(s) = origin.sigma {
        stream.extend_to(&sys.catalog, s + opts.horizon);
        let shifted = run_base(sys, stream, delta0, engine::xi_const(sys, 0), s, opts.horizon)?;
        for &x in targets {
            records.push(essential_hitting(sys, stream, &shifted, x, opts)?);
        }
    }
    Ok(ShiftedEssential { origin, records })
}

/// Monte Carlo of essential records for one target.
#[derive(Clone, Debug, Serialize)]
pub struct EssentialSample {
    pub trial: u64,
    pub record: EssentialRecord,
    pub violations: Vec<String>,
}

/// Independent trials of `essential_hitting` from `(δ0, xi0)` in a window of
/// radius `radius`.
#[allow(clippy::too_many_arguments)]
pub fn essential_trials(model: &ModelSpec, dim: usize, radius: u32, init: BackgroundInit, x: Site, opts: &EssentialOpts, trials: u64, seed: u64) -> Result<Vec<EssentialSample>, EssentialError> {
    let sys = System::new(Window::new(dim, radius), model.clone())?;
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let s = derive_trial_seed(seed, trial);
            let stream = EventStream::sample(&sys.catalog, opts.horizon, s);
            let xi0 = engine::xi_init(&sys, init, &mut rng::stream(s, Role::Background)).ok_or(EssentialError::NoStationary)?;
            let base = run_base(&sys, &stream, engine::eta_from_sites(&sys, &[Site::ORIGIN])?, xi0, 0.0, opts.horizon)?;
            let record = essential_hitting(&sys, &stream, &base, x, opts)?;
            let violations = check_record(&sys, &base, &record);
            Ok(EssentialSample { trial, record, violations })
        })
        .collect()
}

/// Constants of the bad-growth events. `gamma = 3M(1 + 1/c)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BadGrowthParams {
    /// At-most-linear growth speed.
    pub m: f64,
    /// At-least-linear growth speed.
    pub c: f64,
    pub t_surv: f64,
}

impl BadGrowthParams {
    pub fn gamma(&self) -> f64 {
        3.0 * self.m * (1.0 + 1.0 / self.c)
    }

    /// How long the local copies are followed.
    pub fn local_horizon(&self, t: f64) -> f64 {
        self.t_surv.max(self.gamma() * t)
    }
}

/// The five constituents of the bad-growth event at `(y, s)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BadGrowth {
    /// No effective recovery at `y` during `[s, s + t/2)`.
    pub no_recovery: bool,
    /// The copy `(δy, ξ_s)` leaves the l1 ball of radius `Mt` by time `s + t`.
    pub escapes: bool,
    /// `t/2 < τ^{y,0̲} < ∞`.
    pub late_death_zero: bool,
    /// `t/2 < τ^{y,ξ} < ∞`.
    pub late_death: bool,
    /// `(δy, ξ_s)` survives but `x` is not infected during `[s + 2t, s + γt]`.
    pub misses: bool,
}

impl BadGrowth {
    pub fn any(&self) -> bool {
        self.as_array().iter().any(|b| *b)
    }

    pub fn as_array(&self) -> [bool; 5] {
        [self.no_recovery, self.escapes, self.late_death_zero, self.late_death, self.misses]
    }
}

/// Evaluate the bad-growth events for copies started at `(y, s)` from the
/// background `xi_s`. "< ∞" means extinct before `s + h`, `h` the local horizon.
#[allow(clippy::too_many_arguments)]
pub fn bad_growth_events(sys: &System, stream: &EventStream, y: Site, s: f64, xi_s: &[u8], x: Site, t: f64, p: &BadGrowthParams) -> Result<BadGrowth, EssentialError> {
    let yi = sys.window.site_index(y).ok_or(EssentialError::OutsideWindow(y))? as u32;
    let xi_x = sys.window.site_index(x).ok_or(EssentialError::OutsideWindow(x))? as u32;
    let h = p.local_horizon(t);
    if stream.horizon() < s + h {
        return Err(EssentialError::StreamShort { need: s + h, have: stream.horizon() });
    }
    let mut out = BadGrowth::default();

    let mut xi = xi_s.to_vec();
    out.no_recovery = true;
    for i in stream.first_after(s)..stream.len() {
        if stream.times[i] >= s + t / 2.0 {
            break;
        }
        let m = &sys.catalog.maps[stream.maps[i] as usize];
        match *m {
            MapKind::Rec { site, .. } if site == yi && sys.usable(m, &xi) => {
                out.no_recovery = false;
                break;
            }
            MapKind::Inf { .. } | MapKind::Rec { .. } => {}
            _ => {
                sys.apply_bg(m, &mut xi);
            }
        }
    }

    let mut delta = vec![0u8; sys.n_sites()];
    delta[yi as usize] = 1;
    let copies = vec![CopyState::new("xi", s, delta.clone(), xi_s.to_vec()), CopyState::new("zero", s, delta, engine::xi_const(sys, 0))];
    let mut run = CoupledRun::starting_at(sys, stream, s, copies, RecordOpts { stop_when_extinct: true, ..RecordOpts::default() });
    run.advance_to(s + h)?;
    let (a, z) = (&run.copies[0], &run.copies[1]);
    let radius = p.m * t;
    out.escapes = a.log.iter().take_while(|e| e.0 <= s + t).any(|e| e.2 == 1 && l1_dist(sys.window.site(e.1 as usize), y) as f64 > radius);
    let late = |c: &CopyState| c.extinct_at.is_some_and(|e| e - s > t / 2.0);
    out.late_death_zero = late(z);
    out.late_death = late(a);
    if a.extinct_at.is_none() {
        let (ta, tb) = (s + 2.0 * t, s + p.gamma() * t);
        let hit = a.eta_at(ta)[xi_x as usize] == 1 || a.log.iter().any(|e| e.0 > ta && e.0 <= tb && e.1 == xi_x && e.2 == 1);
        out.misses = !hit;
    }
    Ok(out)
}

/// Candidate times at `y` in `[0, l]`: 0, `l`, recoveries at `y` and
/// infection events on arrows touching `y`.
fn candidate_times(sys: &System, stream: &EventStream, yi: u32, l: f64) -> Vec<f64> {
    let mut ts = vec![0.0];
    for i in 0..stream.len() {
        let t = stream.times[i];
        if t > l {
            break;
        }
        let hit = match sys.catalog.maps[stream.maps[i] as usize] {
            MapKind::Rec { site, .. } => site == yi,
            MapKind::Inf { arrow, .. } => {
                let a = &sys.arrows[arrow as usize];
                a.from == yi || a.to == yi
            }
            _ => false,
        };
        if hit {
            ts.push(t);
        }
    }
    ts.push(l);
    ts
}

/// Count of bad-growth events `N_L` over sites `y` within l1 distance
/// `Mt + 2` of `x` and candidate times in `[0, l]`. The background at each
/// candidate time is read from `bg` (a copy run with a background log).
#[allow(clippy::too_many_arguments)]
pub fn count_bad_growth(sys: &System, stream: &EventStream, bg: &CopyState, x: Site, t: f64, l: f64, p: &BadGrowthParams, stop_at_first: bool) -> Result<usize, EssentialError> {
    let mut n = 0;
    for y in lattice::ball(sys.dim(), p.m * t + 2.0, x) {
        let Some(yi) = sys.window.site_index(y) else { continue };
        for s in candidate_times(sys, stream, yi as u32, l) {
            if bad_growth_events(sys, stream, y, s, &bg.xi_at(s), x, t, p)?.any() {
                n += 1;
                if stop_at_first {
                    return Ok(n);
                }
            }
        }
    }
    Ok(n)
}

#[derive(Clone, Debug, Serialize)]
pub struct BadGrowthEstimate {
    pub t: f64,
    pub gamma: f64,
    /// Constituents in the order of [`BadGrowth::as_array`].
    pub events: Vec<Proportion>,
    pub union: Proportion,
    /// `P(N_L >= 1)` when a counting period was requested.
    pub n_l_positive: Option<Proportion>,
}

/// Monte Carlo estimates of the bad-growth events at `(0, 0)` for each time
/// scale in `t_grid`, and optionally of `P(N_L >= 1)` over `[0, l]`.
#[allow(clippy::too_many_arguments)]
pub fn bad_growth_probe(model: &ModelSpec, dim: usize, radius: u32, init: BackgroundInit, x: Site, t_grid: &[f64], params: &BadGrowthParams, l: Option<f64>, trials: u64, seed: u64) -> Result<Vec<BadGrowthEstimate>, EssentialError> {
    let sys = System::new(Window::new(dim, radius), model.clone())?;
    t_grid
        .iter()
        .map(|&t| {
            let h = params.local_horizon(t) + l.unwrap_or(0.0);
            let rows = (0..trials)
                .into_par_iter()
                .map(|trial| -> Result<([bool; 5], bool), EssentialError> {
                    let s = derive_trial_seed(seed, trial);
                    let stream = EventStream::sample(&sys.catalog, h, s);
                    let xi0 = engine::xi_init(&sys, init, &mut rng::stream(s, Role::Background)).ok_or(EssentialError::NoStationary)?;
                    let ev = bad_growth_events(&sys, &stream, Site::ORIGIN, 0.0, &xi0, x, t, params)?;
                    let nl = match l {
                        Some(l) => {
                            let bg = CopyState::new("bg", 0.0, vec![0; sys.n_sites()], xi0);
                            let opts = RecordOpts { infection_log: false, background_log: true, snapshot_dt: None, stop_when_extinct: false };
                            let bg = engine::evolve(&sys, &stream, vec![bg], opts, l)?.copies.remove(0);
                            count_bad_growth(&sys, &stream, &bg, x, t, l, params, true)? > 0
                        }
                        None => false,
                    };
                    Ok((ev.as_array(), nl))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let count = |f: &dyn Fn(&([bool; 5], bool)) -> bool| rows.iter().filter(|r| f(r)).count() as u64;
            Ok(BadGrowthEstimate {
                t,
                gamma: params.gamma(),
                events: (0..5).map(|i| Proportion::new(count(&|r| r.0[i]), trials)).collect(),
                union: Proportion::new(count(&|r| r.0.iter().any(|b| *b)), trials),
                n_l_positive: l.map(|_| Proportion::new(count(&|r| r.1), trials)),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RestartParams {
    pub macro_params: MacroParams,
    /// Macro levels a cluster must reach to count as surviving.
    pub macro_levels: u32,
    /// Parameter of the filler edges.
    pub p: f64,
    pub max_restarts: u32,
}

impl Default for RestartParams {
    fn default() -> Self {
        RestartParams { macro_params: MacroParams { n: 1, a: 4, b: 2.0 }, macro_levels: 40, p: 0.9, max_restarts: 1000 }
    }
}

/// One restart: from site `x` at time `u`, `n` integer steps until death or a
/// full cube, then `m` macro levels (`None` for survival to the macro horizon).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RestartStep {
    pub x: Site,
    pub u: f64,
    pub n: u32,
    pub seeded: bool,
    pub m: Option<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RestartRecord {
    pub steps: Vec<RestartStep>,
    /// Number of restarts; `None` when censored.
    pub l: Option<u32>,
    pub sigma: CensoredTime,
    pub y: Option<Site>,
    pub base_survived: bool,
    /// `Y + [-n, n]^d` fully infected in the base copy at `sigma`; checked
    /// only when the base survives the whole stream.
    pub cube_ok: Option<bool>,
    pub audit: BlockAudit,
    /// Why an incomplete record stopped.
    pub censor: Option<String>,
}

impl RestartRecord {
    /// `sigma` recomputed from the steps; `None` unless the record is complete.
    pub fn sigma_from_parts(&self, b: f64) -> Option<f64> {
        self.l?;
        let (last, rest) = self.steps.split_last()?;
        let mut s = last.n as f64 + 1.0;
        for st in rest {
            s += st.n as f64 + 1.0 + 6.0 * b * st.m? as f64;
        }
        Some(s)
    }
}

fn lexmin_infected(w: &Window, eta: &[u8]) -> Option<Site> {
    eta.iter().enumerate().filter(|(_, v)| **v == 1).map(|(i, _)| w.site(i)).min()
}

/// Run the restart procedure on one stream from the base copy `(δ0, xi0)`.
/// The base is evolved over the whole stream.
pub fn restart_procedure(sys: &System, stream: &EventStream, xi0: Vec<u8>, params: &RestartParams) -> Result<RestartRecord, EssentialError> {
    let mp = params.macro_params;
    mp.check()?;
    let w = &sys.window;
    let n = mp.n as i32;
    let end = stream.horizon();
    let base = run_base(sys, stream, engine::eta_from_sites(sys, &[Site::ORIGIN])?, xi0, 0.0, end)?;
    let mut rec = RestartRecord { steps: Vec::new(), l: None, sigma: CensoredTime::CensoredAtHorizon, y: None, base_survived: base.extinct_at.is_none(), cube_ok: None, audit: BlockAudit::default(), censor: None };
    let mut u = 0.0;
    let (wlo, whi) = (w.lo(), w.hi());
    for ell in 1..=params.max_restarts {
        let x = lexmin_infected(w, &base.eta_at(u)).unwrap_or(Site::ORIGIN);
        let xi = w.site_index(x).ok_or(EssentialError::OutsideWindow(x))?;
        let mut eta = vec![0u8; sys.n_sites()];
        eta[xi] = 1;
        let c = CopyState::new("restart", u, eta, engine::xi_const(sys, 0));
        let mut run = CoupledRun::starting_at(sys, stream, u, vec![c], RecordOpts::quiet());
        let mut k = 0u32;
        let seed = loop {
            let t = u + k as f64 + 1.0;
            if t > end {
                rec.censor = Some("horizon during seeding".into());
                return Ok(rec);
            }
            run.advance_to(t)?;
            let c = &run.copies[0];
            if c.extinct_at.is_some() {
                break None;
            }
            if let Some(y) = percolation::first_full_in(w, &c.eta, wlo, whi, n) {
                break Some(y);
            }
            k += 1;
        };
        let t0 = u + k as f64 + 1.0;
        let Some(y) = seed else {
            rec.steps.push(RestartStep { x, u, n: k, seeded: false, m: Some(0) });
            u = t0;
            continue;
        };
        let need = t0 + (5 * params.macro_levels + 1) as f64 * mp.b;
        if need > end {
            rec.censor = Some("horizon during macro levels".into());
            return Ok(rec);
        }
        let geom = MacroGeom { x0: y, t0, params: mp };
        let bc = match percolation::build_block_coupling(sys, stream, geom, params.macro_levels, params.p, derive_trial_seed(stream.seed, ell as u64), None) {
            Ok(bc) => bc,
            Err(PercolationError::BoxOverflow { .. }) => {
                rec.censor = Some("macro boxes leave the window".into());
                return Ok(rec);
            }
            Err(e) => return Err(e.into()),
        };
        rec.audit.merge(&bc.audit);
        let m = bc.extinction_level();
        rec.steps.push(RestartStep { x, u, n: k, seeded: true, m });
        match m {
            Some(m) => u = t0 + 6.0 * mp.b * m as f64,
            None => {
                rec.l = Some(ell);
                rec.sigma = CensoredTime::Finite(t0);
                rec.y = Some(y);
                if rec.base_survived {
                    rec.cube_ok = Some(percolation::cube_full(w, &base.eta_at(t0), y, n));
                }
                return Ok(rec);
            }
        }
    }
    rec.censor = Some("restart limit".into());
    Ok(rec)
}

#[derive(Clone, Debug, Serialize)]
pub struct RestartSample {
    pub trial: u64,
    pub record: RestartRecord,
}

#[allow(clippy::too_many_arguments)]
pub fn restart_trials(model: &ModelSpec, dim: usize, radius: u32, init: BackgroundInit, horizon: f64, params: &RestartParams, trials: u64, seed: u64) -> Result<Vec<RestartSample>, EssentialError> {
    let sys = System::new(Window::new(dim, radius), model.clone())?;
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let s = derive_trial_seed(seed, trial);
            let stream = EventStream::sample(&sys.catalog, horizon, s);
            let xi0 = engine::xi_init(&sys, init, &mut rng::stream(s, Role::Background)).ok_or(EssentialError::NoStationary)?;
            Ok(RestartSample { trial, record: restart_procedure(&sys, &stream, xi0, params)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackgroundSpec;

    fn sys(radius: u32, m: ModelSpec) -> System {
        System::new(Window::new(1, radius), m).unwrap()
    }

    #[test]
    fn origin_with_immediate_survival_is_zero() {
        let s = sys(30, ModelSpec::dynamical_graph(6.0, 1.0, 1.0, 1.0));
        let opts = EssentialOpts { t_surv: 10.0, horizon: 20.0 };
        let mut seen = 0;
        for seed in 0..20 {
            let st = EventStream::sample(&s.catalog, 20.0, seed);
            let base = run_base(&s, &st, engine::eta_from_sites(&s, &[Site::ORIGIN]).unwrap(), engine::xi_const(&s, 0), 0.0, 20.0).unwrap();
            let r = essential_hitting(&s, &st, &base, Site::ORIGIN, &opts).unwrap();
            assert!(check_record(&s, &base, &r).is_empty(), "{r:?}");
            assert_eq!(r.t_first, CensoredTime::Finite(0.0));
            if r.survived {
                seen += 1;
                assert_eq!(r.k, Some(1));
                assert_eq!(r.sigma, CensoredTime::Finite(0.0));
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn subcritical_records_end_in_extinction() {
        let s = sys(20, ModelSpec::basic(0.5, 1.0));
        let opts = EssentialOpts { t_surv: 5.0, horizon: 60.0 };
        for seed in 0..30 {
            let st = EventStream::sample(&s.catalog, 60.0, seed);
            let base = run_base(&s, &st, engine::eta_from_sites(&s, &[Site::ORIGIN]).unwrap(), engine::xi_const(&s, 0), 0.0, 60.0).unwrap();
            let r = essential_hitting(&s, &st, &base, Site::new(&[2]), &opts).unwrap();
            assert!(check_record(&s, &base, &r).is_empty(), "{r:?}");
            if !r.survived {
                assert!(r.k.is_some());
            }
        }
    }

    #[test]
    fn records_satisfy_invariants_off_origin() {
        let m = ModelSpec::new(crate::model::RateTable::switching([[0.5, 2.0], [2.0, 4.0]], [1.2, 0.8]), BackgroundSpec::cpdp(1.0, 1.0, 1.0, 1.0));
        let s = sys(40, m);
        let opts = EssentialOpts { t_surv: 8.0, horizon: 30.0 };
        let mut multi = 0;
        for seed in 0..40 {
            let st = EventStream::sample(&s.catalog, 30.0, seed);
            let base = run_base(&s, &st, engine::eta_from_sites(&s, &[Site::ORIGIN]).unwrap(), engine::xi_const(&s, 1), 0.0, 30.0).unwrap();
            for x in [-3, 1, 4] {
                let r = essential_hitting(&s, &st, &base, Site::new(&[x]), &opts).unwrap();
                assert!(check_record(&s, &base, &r).is_empty(), "{r:?} {:?}", check_record(&s, &base, &r));
                multi += (r.iterations.len() > 1) as usize;
            }
        }
        assert!(multi > 0, "no record needed a second iteration");
    }

    #[test]
    fn shifted_times_are_nonnegative() {
        let s = sys(40, ModelSpec::dynamical_graph(6.0, 1.0, 1.0, 1.0));
        let opts = EssentialOpts { t_surv: 8.0, horizon: 20.0 };
        for seed in 0..10 {
            let mut st = EventStream::sample(&s.catalog, 1.0, seed);
            let r = shifted_essential(&s, &mut st, engine::xi_const(&s, 1), &[Site::new(&[3])], &opts).unwrap();
            if r.shift().is_finite() {
                assert_eq!(r.records.len(), 1);
                if let Some(v) = r.records[0].sigma.value() {
                    assert!(v >= 0.0);
                }
            } else {
                assert!(r.records.is_empty());
            }
        }
    }

    #[test]
    fn no_effective_recovery_matches_poisson_thinning() {
        // constant recovery rate 1: P(no recovery in [0, t/2)) = exp(-t/2)
        let m = ModelSpec::dynamical_graph(2.0, 1.0, 1.0, 1.0);
        let p = BadGrowthParams { m: 12.0, c: 0.5, t_surv: 2.0 };
        let est = bad_growth_probe(&m, 1, 15, BackgroundInit::Zero, Site::new(&[3]), &[1.0], &p, None, 4000, 7).unwrap();
        let e = &est[0];
        let exact = (-0.5f64).exp();
        assert!(e.events[0].lo - 0.01 < exact && exact < e.events[0].hi + 0.01, "{:?}", e.events[0]);
        assert!(e.union.p >= e.events.iter().map(|q| q.p).fold(0.0, f64::max));
        assert!((e.gamma - 3.0 * 12.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn counter_stops_at_first() {
        let s = sys(25, ModelSpec::dynamical_graph(3.0, 1.0, 1.0, 1.0));
        let p = BadGrowthParams { m: 2.0, c: 0.5, t_surv: 3.0 };
        let st = EventStream::sample(&s.catalog, 40.0, 3);
        let bg = CopyState::new("bg", 0.0, vec![0; s.n_sites()], engine::xi_const(&s, 0));
        let opts = RecordOpts { infection_log: false, background_log: true, snapshot_dt: None, stop_when_extinct: false };
        let bg = engine::evolve(&s, &st, vec![bg], opts, 1.0).unwrap().copies.remove(0);
        let all = count_bad_growth(&s, &st, &bg, Site::ORIGIN, 1.0, 1.0, &p, false).unwrap();
        let first = count_bad_growth(&s, &st, &bg, Site::ORIGIN, 1.0, 1.0, &p, true).unwrap();
        assert_eq!(first, all.min(1));
    }

    #[test]
    fn restart_identity_and_seed_cube() {
        let params = RestartParams { macro_params: MacroParams { n: 1, a: 3, b: 1.5 }, macro_levels: 4, p: 0.95, max_restarts: 200 };
        let s = sys(80, ModelSpec::dynamical_graph(15.0, 1.0, 2.0, 1.0));
        let mut done = 0;
        for seed in 0..10 {
            let st = EventStream::sample(&s.catalog, 80.0, seed);
            let r = restart_procedure(&s, &st, engine::xi_const(&s, 0), &params).unwrap();
            assert_eq!(r.audit.violations, 0);
            if let CensoredTime::Finite(sigma) = r.sigma {
                done += 1;
                assert!((r.sigma_from_parts(1.5).unwrap() - sigma).abs() < 1e-9);
                assert_eq!(r.cube_ok, r.base_survived.then_some(true));
            }
        }
        assert!(done > 0);
    }
}
