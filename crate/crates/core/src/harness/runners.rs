//! Trial loops shared by the presets, the examples and the acceptance tests.

use crate::engine::{self, BackgroundInit, CopyState, CoupledRun, RecordOpts};
use crate::graphical::{EventStream, System};
use crate::lattice::{l1_norm, Site, Window};
use crate::model::{ModelError, ModelSpec};
use crate::observables::{self, CensoredTime, HitRecord};
use crate::percolation::{self, OrientedField, SlabStart};
use crate::rng::{self, derive_trial_seed, Role};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] engine::EngineError),
    #[error("no stationary background sample for this model")]
    NoStationary,
}

fn initial(sys: &System, init: BackgroundInit, seed: u64) -> Result<(Vec<u8>, Vec<u8>), RunError> {
    let xi = engine::xi_init(sys, init, &mut rng::stream(seed, Role::Background)).ok_or(RunError::NoStationary)?;
    Ok((engine::eta_from_sites(sys, &[Site::ORIGIN])?, xi))
}

/// Extinction time of `(δ0, xi0)`; `Infinite` means alive at the horizon.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ExtinctionRow {
    pub trial: u64,
    pub tau: CensoredTime,
    /// The infection reached the window boundary.
    pub touched_boundary: bool,
}

pub fn extinction_trials(model: &ModelSpec, dim: usize, radius: u32, init: BackgroundInit, horizon: f64, trials: u64, seed: u64) -> Result<Vec<ExtinctionRow>, RunError> {
    let sys = System::new(Window::new(dim, radius), model.clone())?;
    let boundary: Vec<bool> = (0..sys.n_sites()).map(|i| sys.window.site(i).max_abs() == radius as i32).collect();
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let s = derive_trial_seed(seed, trial);
            let stream = EventStream::sample(&sys.catalog, horizon, s);
            let (eta, xi) = initial(&sys, init, s)?;
            let opts = RecordOpts { stop_when_extinct: true, ..RecordOpts::default() };
            let mut run = CoupledRun::new(&sys, &stream, vec![CopyState::new("x", 0.0, eta, xi)], opts);
            run.advance_to(horizon)?;
            let c = &run.copies[0];
            let tau = match c.extinct_at {
                Some(t) => CensoredTime::Finite(t),
                None => CensoredTime::Infinite,
            };
            let touched_boundary = c.log.iter().any(|e| e.2 == 1 && boundary[e.1 as usize]);
            Ok(ExtinctionRow { trial, tau, touched_boundary })
        })
        .collect()
}

/// Empirical `P(t < tau < inf)` on a grid as `(t, k, n)`.
pub fn late_extinction_counts(rows: &[ExtinctionRow], grid: &[f64]) -> Vec<(f64, u64, u64)> {
    let n = rows.len() as u64;
    grid.iter().map(|&t| (t, rows.iter().filter(|r| r.tau.value().is_some_and(|v| v > t)).count() as u64, n)).collect()
}

/// One run from `(δ0, xi0)`: hitting times along rays and growth-bound checks.
#[derive(Clone, Debug)]
pub struct GrowthRow {
    pub hits: HitRecord,
    /// For each grid time `t`, whether the ever-infected set by `t` leaves the
    /// l1 ball of radius `M t`.
    pub escapes: Vec<bool>,
}

/// Time at which the ever-infected set first leaves the ball of radius `m t`
/// is not needed; only the grid check is.
#[allow(clippy::too_many_arguments)]
pub fn growth_trials(model: &ModelSpec, dim: usize, radius: u32, init: BackgroundInit, horizon: f64, rays: &[Site], radii: &[u32], m: f64, t_grid: &[f64], trials: u64, seed: u64) -> Result<Vec<GrowthRow>, RunError> {
    let sys = System::new(Window::new(dim, radius), model.clone())?;
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let s = derive_trial_seed(seed, trial);
            let stream = EventStream::sample(&sys.catalog, horizon, s);
            let (eta, xi) = initial(&sys, init, s)?;
            let opts = RecordOpts { stop_when_extinct: true, ..RecordOpts::default() };
            let mut run = CoupledRun::new(&sys, &stream, vec![CopyState::new("x", 0.0, eta, xi)], opts);
            run.advance_to(horizon)?;
            let c = &run.copies[0];
            let first = observables::first_hits(c);
            let hits = rays
                .iter()
                .map(|ray| {
                    radii
                        .iter()
                        .map(|&k| match sys.window.site_index(ray.scale(k as i32)) {
                            Some(i) if first[i].is_finite() => CensoredTime::Finite(first[i]),
                            Some(_) if c.extinct_at.is_some() => CensoredTime::Infinite,
                            _ => CensoredTime::CensoredAtHorizon,
                        })
                        .collect()
                })
                .collect();
            let escapes = t_grid
                .iter()
                .map(|&t| first.iter().enumerate().any(|(i, &h)| h <= t && l1_norm(sys.window.site(i)) as f64 > m * t))
                .collect();
            Ok(GrowthRow { hits: HitRecord { trial, survived: c.extinct_at.is_none(), hits }, escapes })
        })
        .collect()
}

/// Oriented-percolation diagnostics of one field.
#[derive(Clone, Debug, Serialize)]
pub struct FieldRow {
    pub trial: u64,
    /// Extinction level of the cluster of the origin (`None`: alive at the last level).
    pub tau: Option<u32>,
    /// `|P_n ∩ B_{beta n} ∩ axis|` from the even lattice, per level in the grid.
    pub slab: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn field_trials(dim: usize, p: f64, levels: u32, radius: u32, slab_levels: &[u32], beta: f64, trials: u64, seed: u64) -> Vec<FieldRow> {
    (0..trials)
        .into_par_iter()
        .map(|trial| {
            let f: OrientedField = percolation::sample_independent_field(dim, p, levels, radius, derive_trial_seed(seed, trial));
            let tau = percolation::extinction_level(&f, Site::ORIGIN);
            let slab = slab_levels.iter().map(|&n| percolation::density_slab(&f, SlabStart::EvenLattice, n, beta * n as f64)).collect();
            FieldRow { trial, tau, slab }
        })
        .collect()
}

/// Number of parity-compatible axis sites in `B_{beta n}` at level `n`, the
/// value a fully open field would give.
pub fn slab_capacity(n: u32, beta: f64) -> usize {
    let r = (beta * n as f64).floor() as i64;
    (-r..=r).filter(|v| (v + n as i64) % 2 == 0).count()
}
