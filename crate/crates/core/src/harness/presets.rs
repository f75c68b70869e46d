//! Named experiments. Each preset reads its own `params` object (unknown keys
//! are rejected) and returns CSV tables plus pass/fail checks.

use super::runners::{self, late_extinction_counts};
use super::{num, runtime, Check, ExperimentConfig, HarnessError, PresetOutput, Table, TrialValue};
use crate::duality;
use crate::engine::{self, BackgroundInit};
use crate::essential::{self, BadGrowthParams, EssentialOpts, RestartParams};
use crate::graphical::{self, EventStream, System};
use crate::lattice::{Site, Window};
use crate::model::{BackgroundSpec, ModelSpec, RateTable};
use crate::observables::{self, log_tail_fit, tail_counts, CensoredTime, Proportion};
use crate::oracle;
use crate::percolation::{self, MacroGeom, MacroParams};
use crate::rng::{self, derive_trial_seed, Role};
use rand::Rng;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub struct Preset {
    pub name: &'static str,
    pub about: &'static str,
    pub run: fn(&ExperimentConfig) -> Result<PresetOutput, HarnessError>,
    check: fn(&ExperimentConfig) -> Result<(), HarnessError>,
    defaults: fn() -> ExperimentConfig,
}

macro_rules! preset {
    ($name:literal, $about:literal, $params:ty, $run:ident, $defaults:ident) => {
        Preset { name: $name, about: $about, run: $run, check: |c| params::<$params>(c).map(|_| ()), defaults: $defaults }
    };
}

pub static PRESETS: &[Preset] = &[
    preset!("oracle", "simulator marginals vs the exact CTMC on four micro-cases", OracleParams, run_oracle, def_oracle),
    preset!("stream", "catalog reconstruction and per-map Poisson count tests", StreamParams, run_stream, def_stream),
    preset!("coupling", "pathwise additivity, sandwich, worst-case and conditional duality audits", CouplingParams, run_coupling, def_coupling),
    preset!("duality", "stationary self-duality two-proportion test", DualityParams, run_duality, def_duality),
    preset!("tails", "extinction times and the late-extinction tail", TailParams, run_tails, def_tails),
    preset!("shape", "hitting times along rays, time constants and growth bounds", ShapeParams, run_shape, def_shape),
    preset!("essential", "essential hitting times and iteration counts", EssentialParams, run_essential, def_essential),
    preset!("shifted", "shifted essential times vs essential times from the all-zero background", EssentialParams, run_shifted, def_shifted),
    preset!("bad_growth", "bad-growth event probabilities", BadGrowthCfg, run_bad_growth, def_bad_growth),
    preset!("finite_spacetime", "finite space-time events E1, E2, E3", FiniteParams, run_finite, def_finite),
    preset!("calibrate", "sweep of macro parameters (n, a, b) by block-event probes", CalibrateParams, run_calibrate, def_calibrate),
    preset!("block", "block construction of the macroscopic oriented field", BlockParams, run_block, def_block),
    preset!("restart", "restart procedure producing (sigma, Y)", RestartCfg, run_restart, def_restart),
    preset!("percolation", "oriented percolation extinction and slab-density tails", PercolationParams, run_percolation, def_percolation),
];

pub fn find(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub fn default_config(name: &str) -> Option<ExperimentConfig> {
    find(name).map(|p| (p.defaults)())
}

pub(super) fn check_params(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    (find(&cfg.preset).expect("known preset").check)(cfg)
}

fn params<P: DeserializeOwned + Default>(cfg: &ExperimentConfig) -> Result<P, HarnessError> {
    match &cfg.params {
        Value::Null => Ok(P::default()),
        v => serde_json::from_value(v.clone()).map_err(|e| HarnessError::Config(format!("params for '{}': {e}", cfg.preset))),
    }
}

fn base(preset: &str, model: Option<ModelSpec>, dim: usize, radius: u32, horizon: f64, trials: u64, p: impl Serialize) -> ExperimentConfig {
    ExperimentConfig {
        preset: preset.into(),
        model,
        dim,
        radius,
        horizon,
        snapshot_dt: None,
        trials,
        seed: 1,
        background: BackgroundInit::Zero,
        params: serde_json::to_value(p).expect("params serialize"),
    }
}

/// Supercritical CPDP on a dynamical graph used by several defaults.
pub fn supercritical() -> ModelSpec {
    ModelSpec::dynamical_graph(8.0, 1.0, 1.0, 1.0)
}

/// Model and macro parameters whose block events have probability about 0.95.
pub fn block_model() -> (ModelSpec, MacroParams) {
    (ModelSpec::dynamical_graph(15.0, 1.0, 2.0, 1.0), MacroParams { n: 1, a: 3, b: 1.5 })
}

fn site(dim: usize, v: &[i32]) -> Result<Site, HarnessError> {
    if v.len() != dim {
        return Err(HarnessError::Config(format!("site {v:?} does not have {dim} coordinates")));
    }
    Ok(Site::new(v))
}

fn coords(s: Site, dim: usize) -> String {
    s.coords(dim).iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";")
}

fn ct(v: CensoredTime) -> String {
    v.label()
}

fn window(cfg: &ExperimentConfig) -> Window {
    Window::new(cfg.dim, cfg.radius)
}

fn system(cfg: &ExperimentConfig) -> Result<System, HarnessError> {
    System::new(window(cfg), cfg.model()?.clone()).map_err(|e| HarnessError::Config(e.to_string()))
}

fn tail_table(name: &str, x: &str, pts: &[(f64, u64, u64)]) -> Table {
    let mut t = Table::new(name, &[(x, "-"), ("k", "count"), ("n", "count"), ("p", "probability")]);
    for &(v, k, n) in pts {
        t.push(vec![num(v), k.to_string(), n.to_string(), num(k as f64 / n.max(1) as f64)]);
    }
    t
}

fn slope_check(name: &str, pts: &[(f64, u64, u64)]) -> Check {
    match log_tail_fit(pts) {
        Some(f) => Check::new(name, f.decays(), format!("slope {:.4} [{:.4}, {:.4}] over {} points", f.slope, f.ci_lo, f.ci_hi, f.points)),
        None => Check::new(name, false, "fewer than two nonzero tail points"),
    }
}

/// Like [`slope_check`] but only the sign of the fitted slope is tested.
fn slope_sign_check(name: &str, pts: &[(f64, u64, u64)]) -> Check {
    match log_tail_fit(pts) {
        Some(f) => Check::new(name, f.slope < 0.0, format!("slope {:.4} [{:.4}, {:.4}] over {} points", f.slope, f.ci_lo, f.ci_hi, f.points)),
        None => Check::new(name, false, "fewer than two nonzero tail points"),
    }
}

// ---------------------------------------------------------------- oracle

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleParams {
    pub times: Vec<f64>,
    pub max_abs_z: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        OracleParams { times: vec![0.5, 2.0, 8.0], max_abs_z: 4.0 }
    }
}

fn def_oracle() -> ExperimentConfig {
    base("oracle", None, 1, 1, 8.0, 100_000, OracleParams::default())
}

fn run_oracle(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: OracleParams = params(cfg)?;
    let mut t = Table::new("oracle", &[("case", "-"), ("time", "time"), ("state", "index"), ("p_exact", "probability"), ("p_mc", "probability"), ("z", "sd")]);
    let mut checks = Vec::new();
    for (i, case) in oracle::standard_cases().iter().enumerate() {
        let (worst, rows) = oracle::run_case(case, &case.model, &p.times, cfg.trials, derive_trial_seed(cfg.seed, i as u64)).map_err(runtime)?;
        for r in rows {
            t.push(vec![r.case, num(r.time), r.state.to_string(), num(r.p_exact), num(r.p_mc), num(r.z)]);
        }
        checks.push(Check::new(&case.name, worst < p.max_abs_z, format!("max|z| = {worst:.3}")));
    }
    Ok(PresetOutput { tables: vec![t], checks })
}

// ---------------------------------------------------------------- stream

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamParams {
    pub streams: usize,
    pub alpha: f64,
}

impl Default for StreamParams {
    fn default() -> Self {
        StreamParams { streams: 100, alpha: 0.001 }
    }
}

fn def_stream() -> ExperimentConfig {
    let m = ModelSpec::new(RateTable::switching([[0.5, 1.0], [1.0, 2.5]], [1.2, 0.6]), BackgroundSpec::cpdp(0.8, 1.1, 1.0, 1.0));
    base("stream", Some(m), 1, 3, 20.0, 0, StreamParams::default())
}

fn run_stream(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: StreamParams = params(cfg)?;
    let sys = system(cfg)?;
    let streams: Vec<EventStream> = (0..p.streams as u64).into_par_iter().map(|i| EventStream::sample(&sys.catalog, cfg.horizon, derive_trial_seed(cfg.seed, i))).collect();
    let mut counts = vec![0u64; sys.catalog.len()];
    for s in &streams {
        for &m in &s.maps {
            counts[m as usize] += 1;
        }
    }
    let exposure = cfg.horizon * p.streams as f64;
    let mut t = Table::new("stream_counts", &[("map", "index"), ("kind", "-"), ("target", "-"), ("detail", "-"), ("rate", "1/time"), ("count", "count"), ("expected", "count")]);
    for (i, m) in sys.catalog.maps.iter().enumerate() {
        let (kind, target, detail) = sys.describe(m);
        t.push(vec![i.to_string(), kind.into(), target, detail, num(sys.catalog.rates[i]), counts[i].to_string(), num(sys.catalog.rates[i] * exposure)]);
    }
    let rec = sys.reconstruction_error();
    let (chi, df, pc) = graphical::count_chi_square(&sys.catalog, &streams);
    let (disp, ddf, pd) = graphical::count_dispersion(&sys.catalog, &streams);
    Ok(PresetOutput {
        tables: vec![t],
        checks: vec![
            Check::new("reconstruction", rec < 1e-9, format!("max error {rec:.3e}")),
            Check::new("poisson_counts", pc > p.alpha, format!("chi2 {chi:.2} df {df} p {pc:.4}")),
            Check::new("dispersion", pd > p.alpha, format!("stat {disp:.2} df {ddf} p {pd:.4}")),
        ],
    })
}

// ---------------------------------------------------------------- coupling

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingParams {
    pub dt: f64,
    /// Density of the random initial infections.
    pub density: f64,
}

impl Default for CouplingParams {
    fn default() -> Self {
        CouplingParams { dt: 0.1, density: 0.15 }
    }
}

fn def_coupling() -> ExperimentConfig {
    base("coupling", Some(ModelSpec::dynamical_graph(1.5, 1.0, 1.0, 1.0)), 1, 6, 3.0, 2_000, CouplingParams::default())
}

fn random_eta<R: Rng>(sys: &System, d: f64, r: &mut R) -> Vec<u8> {
    (0..sys.n_sites()).map(|_| r.random_bool(d) as u8).collect()
}

fn random_xi<R: Rng>(sys: &System, r: &mut R) -> Vec<u8> {
    let top = sys.model.rates.n as u8;
    (0..sys.n_cells()).map(|_| r.random_range(0..=top)).collect()
}

fn run_coupling(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: CouplingParams = params(cfg)?;
    let sys = system(cfg)?;
    let mono = crate::model::validate_model(&sys.model, cfg.dim).map_err(runtime)?.monotone;
    let rows = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<[usize; 4], HarnessError> {
            let s = derive_trial_seed(cfg.seed, trial);
            let mut r = rng::stream(s, Role::Aux);
            let st = EventStream::sample(&sys.catalog, cfg.horizon, s);
            let (e1, e2) = (random_eta(&sys, p.density, &mut r), random_eta(&sys, p.density, &mut r));
            let (x1, x2) = (random_xi(&sys, &mut r), random_xi(&sys, &mut r));
            let add = engine::additivity_violations(&sys, &st, &e1, &e2, &x1, cfg.horizon, p.dt).map_err(runtime)?;
            let sandwich = if mono {
                let hi_eta: Vec<u8> = e1.iter().zip(&e2).map(|(a, b)| a | b).collect();
                let lo: Vec<u8> = x1.iter().zip(&x2).map(|(a, b)| *a.min(b)).collect();
                let hi: Vec<u8> = x1.iter().zip(&x2).map(|(a, b)| *a.max(b)).collect();
                engine::sandwich_violations(&sys, &st, (&e1, &lo), (&hi_eta, &hi), cfg.horizon, p.dt).map_err(runtime)?
            } else {
                0
            };
            let worst = engine::worst_case_violations(&sys, &st, &e1, &x1, cfg.horizon, p.dt).map_err(runtime)?;
            let dual = !duality::conditional_duality_check(&sys, &st, &e1, &e2, &x1, cfg.horizon).map_err(runtime)?;
            Ok([add, sandwich, worst, dual as usize])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut t = Table::new("coupling", &[("trial", "index"), ("additivity", "count"), ("sandwich", "count"), ("worst_case", "count"), ("duality", "count")]);
    for (i, r) in rows.iter().enumerate() {
        t.push(vec![i.to_string(), r[0].to_string(), r[1].to_string(), r[2].to_string(), r[3].to_string()]);
    }
    let tot = |k: usize| rows.iter().map(|r| r[k]).sum::<usize>();
    let mut checks = vec![Check::new("additivity", tot(0) == 0, format!("{} violations", tot(0)))];
    checks.push(if mono { Check::new("sandwich", tot(1) == 0, format!("{} violations", tot(1))) } else { Check::new("sandwich", true, "skipped: model not monotone") });
    checks.push(Check::new("worst_case", tot(2) == 0, format!("{} violations", tot(2))));
    checks.push(Check::new("conditional_duality", tot(3) == 0, format!("{} violations", tot(3))));
    Ok(PresetOutput { tables: vec![t], checks })
}

// ---------------------------------------------------------------- duality

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DualityParams {
    pub eta: Vec<Vec<i32>>,
    pub eta_prime: Vec<Vec<i32>>,
    pub t: f64,
    pub assume_reversible: bool,
    pub max_abs_z: f64,
}

impl Default for DualityParams {
    fn default() -> Self {
        DualityParams { eta: vec![vec![0]], eta_prime: vec![vec![3], vec![4], vec![5]], t: 5.0, assume_reversible: false, max_abs_z: 4.0 }
    }
}

fn def_duality() -> ExperimentConfig {
    base("duality", Some(ModelSpec::dynamical_graph(2.0, 1.0, 1.0, 1.0)), 1, 25, 5.0, 100_000, DualityParams::default())
}

fn run_duality(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: DualityParams = params(cfg)?;
    let sys = system(cfg)?;
    let to_eta = |v: &[Vec<i32>]| -> Result<Vec<u8>, HarnessError> {
        let sites = v.iter().map(|c| site(cfg.dim, c)).collect::<Result<Vec<_>, _>>()?;
        engine::eta_from_sites(&sys, &sites).map_err(|e| HarnessError::Config(e.to_string()))
    };
    let (eta, eta_prime) = (to_eta(&p.eta)?, to_eta(&p.eta_prime)?);
    let st = duality::stationary_duality_check(cfg.model()?, &sys.window, &eta, &eta_prime, p.t, cfg.trials, cfg.seed, p.assume_reversible).map_err(runtime)?;
    let mut t = Table::new("duality", &[("t", "time"), ("p_fwd", "probability"), ("p_dual", "probability"), ("trials", "count"), ("z", "sd")]);
    t.push(vec![num(st.t), num(st.p_fwd), num(st.p_dual), st.n_trials.to_string(), num(st.z)]);
    Ok(PresetOutput { tables: vec![t], checks: vec![Check::new("two_proportion_z", st.z.abs() < p.max_abs_z, format!("z = {:.3}", st.z))] })
}

// ---------------------------------------------------------------- tails

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailParams {
    pub t_grid: Vec<f64>,
}

impl Default for TailParams {
    fn default() -> Self {
        TailParams { t_grid: (1..=10).map(|i| 2.0 * i as f64).collect() }
    }
}

fn def_tails() -> ExperimentConfig {
    base("tails", Some(supercritical()), 1, 80, 40.0, 20_000, TailParams::default())
}

fn run_tails(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: TailParams = params(cfg)?;
    let rows = runners::extinction_trials(cfg.model()?, cfg.dim, cfg.radius, cfg.background, cfg.horizon, cfg.trials, cfg.seed).map_err(runtime)?;
    let mut t = Table::new("extinction", &[("trial", "index"), ("tau", "time"), ("touched_boundary", "bool")]);
    for r in &rows {
        t.push(vec![r.trial.to_string(), ct(r.tau), r.touched_boundary.to_string()]);
    }
    let pts = late_extinction_counts(&rows, &p.t_grid);
    let vals: Vec<TrialValue> = rows.iter().map(|r| TrialValue { trial: r.trial, metric: "tau".into(), value: Some(r.tau) }).collect();
    let summary = super::aggregate(&vals, cfg.trials)?;
    let surv = Proportion::new(rows.iter().filter(|r| !r.tau.is_finite()).count() as u64, rows.len() as u64);
    let boundary = rows.iter().filter(|r| r.touched_boundary).count();
    Ok(PresetOutput {
        tables: vec![t, tail_table("late_extinction", "t", &pts), super::summary_table(&summary)],
        checks: vec![
            slope_check("late_extinction_slope", &pts),
            Check::new("survival_fraction", true, format!("{:.4} [{:.4}, {:.4}], {} runs touched the boundary", surv.p, surv.lo, surv.hi, boundary)),
        ],
    })
}

// ---------------------------------------------------------------- shape

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeParams {
    pub rays: Vec<Vec<i32>>,
    pub radii: Vec<u32>,
    /// `M = m_factor * lambda_max * 2d` for the growth bound.
    pub m_factor: f64,
    pub t_grid: Vec<f64>,
    pub max_secant_gap: f64,
    pub max_escape_rate: f64,
}

impl Default for ShapeParams {
    fn default() -> Self {
        ShapeParams { rays: vec![vec![1]], radii: vec![7, 15, 30, 60], m_factor: 3.0, t_grid: vec![0.5, 1.0, 2.0, 4.0, 8.0], max_secant_gap: 0.15, max_escape_rate: 0.01 }
    }
}

fn def_shape() -> ExperimentConfig {
    base("shape", Some(supercritical()), 1, 60, 500.0, 1_000, ShapeParams::default())
}

fn run_shape(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: ShapeParams = params(cfg)?;
    if cfg.trials < 10 {
        return Err(HarnessError::Config("shape needs at least 10 trials (≥10 surviving trials required)".into()));
    }
    let model = cfg.model()?;
    let rays = p.rays.iter().map(|r| site(cfg.dim, r)).collect::<Result<Vec<_>, _>>()?;
    let m = p.m_factor * model.rates.lambda_max() * 2.0 * cfg.dim as f64;
    let rows = runners::growth_trials(model, cfg.dim, cfg.radius, cfg.background, cfg.horizon, &rays, &p.radii, m, &p.t_grid, cfg.trials, cfg.seed).map_err(runtime)?;
    let mut hits = Table::new("hits", &[("trial", "index"), ("survived", "bool"), ("ray", "site"), ("radius", "sites"), ("time", "time")]);
    for r in &rows {
        for (ri, ray) in rays.iter().enumerate() {
            for (k, &rad) in p.radii.iter().enumerate() {
                hits.push(vec![r.hits.trial.to_string(), r.hits.survived.to_string(), coords(*ray, cfg.dim), rad.to_string(), ct(r.hits.hits[ri][k])]);
            }
        }
    }
    let records: Vec<_> = rows.iter().map(|r| r.hits.clone()).collect();
    let est = observables::shape_estimate(&records, &rays, &p.radii, cfg.dim, cfg.seed).map_err(|e| HarnessError::Runtime(format!("{e} (≥10 surviving trials required)")))?;
    let mut shape = Table::new("shape", &[("ray", "site"), ("n", "sites"), ("mu_hat", "time/site"), ("ci_lo", "time/site"), ("ci_hi", "time/site"), ("secant", "time/site"), ("secant_half", "time/site"), ("samples", "count")]);
    let mut checks = Vec::new();
    for r in &est.rays {
        let o = |v: Option<f64>| v.map(num).unwrap_or_else(|| "NA".into());
        shape.push(vec![r.ray.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"), r.n.to_string(), num(r.mu_hat), num(r.ci_lo), num(r.ci_hi), o(r.secant), o(r.secant_half), r.samples.to_string()]);
        let gap = match (r.secant, r.secant_half) {
            (Some(a), Some(b)) => Some((a - b).abs() / r.mu_hat),
            _ => None,
        };
        checks.push(Check::new(
            &format!("secant_{}", r.ray.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("_")),
            gap.is_some_and(|g| g < p.max_secant_gap),
            gap.map(|g| format!("relative secant gap {g:.4} at n = {}", r.n)).unwrap_or_else(|| "secants unavailable".into()),
        ));
    }
    let mut growth = Table::new("growth", &[("t", "time"), ("radius_bound", "sites"), ("escapes", "count"), ("trials", "count")]);
    let mut esc_total = 0;
    for (i, &t) in p.t_grid.iter().enumerate() {
        let e = rows.iter().filter(|r| r.escapes[i]).count();
        esc_total += e;
        growth.push(vec![num(t), num(m * t), e.to_string(), rows.len().to_string()]);
    }
    let rate = esc_total as f64 / (rows.len() * p.t_grid.len()).max(1) as f64;
    checks.push(Check::new("growth_bound", rate < p.max_escape_rate, format!("escape rate {rate:.5} with M = {m:.2}; {} of {} runs survived", est.surviving, est.total)));
    Ok(PresetOutput { tables: vec![hits, shape, growth], checks })
}

// ---------------------------------------------------------------- essential

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EssentialParams {
    pub target: Vec<i32>,
    pub t_surv: f64,
    pub k_grid: Vec<u32>,
    pub ks_alpha: f64,
}

impl Default for EssentialParams {
    fn default() -> Self {
        EssentialParams { target: vec![5], t_surv: 50.0, k_grid: (0..8).collect(), ks_alpha: 0.001 }
    }
}

fn def_essential() -> ExperimentConfig {
    base("essential", Some(supercritical()), 1, 100, 100.0, 2_000, EssentialParams::default())
}

fn run_essential(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: EssentialParams = params(cfg)?;
    let x = site(cfg.dim, &p.target)?;
    let opts = EssentialOpts { t_surv: p.t_surv, horizon: cfg.horizon };
    let rows = essential::essential_trials(cfg.model()?, cfg.dim, cfg.radius, cfg.background, x, &opts, cfg.trials, cfg.seed).map_err(runtime)?;
    let mut t = Table::new("essential", &[("trial", "index"), ("x", "site"), ("K", "count"), ("sigma", "time"), ("censor", "-"), ("u_1", "time"), ("t_first", "time"), ("survived", "bool")]);
    for r in &rows {
        let rec = &r.record;
        t.push(vec![
            r.trial.to_string(),
            coords(rec.x, cfg.dim),
            rec.k.map(|k| k.to_string()).unwrap_or_else(|| "censored".into()),
            ct(rec.sigma),
            (rec.k.is_none()).to_string(),
            rec.iterations.first().map(|i| num(i.u)).unwrap_or_else(|| "NA".into()),
            ct(rec.t_first),
            rec.survived.to_string(),
        ]);
    }
    let violations: usize = rows.iter().map(|r| r.violations.len()).sum();
    let determined: Vec<u32> = rows.iter().filter_map(|r| r.record.k).collect();
    let pts: Vec<(f64, u64, u64)> = p.k_grid.iter().map(|&n| (n as f64, determined.iter().filter(|&&k| k > n).count() as u64, determined.len() as u64)).collect();
    let sigma_ok = rows.iter().all(|r| match (r.record.sigma.value(), r.record.t_first.value()) {
        (Some(s), Some(t)) => s >= t,
        _ => true,
    });
    Ok(PresetOutput {
        tables: vec![t, tail_table("k_tail", "n", &pts)],
        checks: vec![
            Check::new("record_invariants", violations == 0, format!("{violations} violations in {} records, {} censored", rows.len(), rows.len() - determined.len())),
            Check::new("sigma_after_first_hit", sigma_ok, "sigma >= t(x) in every record"),
            slope_check("k_tail_slope", &pts),
        ],
    })
}

fn def_shifted() -> ExperimentConfig {
    base("shifted", Some(supercritical()), 1, 120, 100.0, 1_000, EssentialParams { t_surv: 30.0, ..EssentialParams::default() })
}

fn run_shifted(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: EssentialParams = params(cfg)?;
    let x = site(cfg.dim, &p.target)?;
    let opts = EssentialOpts { t_surv: p.t_surv, horizon: cfg.horizon };
    let sys = system(cfg)?;
    let rows = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<(CensoredTime, Option<essential::EssentialRecord>, essential::EssentialRecord), HarnessError> {
            let s = derive_trial_seed(cfg.seed, trial);
            let xi0 = engine::xi_init(&sys, cfg.background, &mut rng::stream(s, Role::Background)).ok_or_else(|| HarnessError::Config("no stationary sample".into()))?;
            let mut st = EventStream::sample(&sys.catalog, cfg.horizon, s);
            let sh = essential::shifted_essential(&sys, &mut st, xi0, &[x], &opts).map_err(runtime)?;
            // reference: essential time from (δ0, 0̲) on an independent stream
            let s2 = derive_trial_seed(cfg.seed ^ 0x5eed_0002, trial);
            let st2 = EventStream::sample(&sys.catalog, cfg.horizon, s2);
            let b = essential::run_base(&sys, &st2, engine::eta_from_sites(&sys, &[Site::ORIGIN]).map_err(runtime)?, engine::xi_const(&sys, 0), 0.0, cfg.horizon).map_err(runtime)?;
            let reference = essential::essential_hitting(&sys, &st2, &b, x, &opts).map_err(runtime)?;
            Ok((sh.shift(), sh.records.into_iter().next(), reference))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut t = Table::new("shifted", &[("trial", "index"), ("shift", "time"), ("s_x", "time"), ("s_survived", "bool"), ("sigma_ref", "time"), ("ref_survived", "bool")]);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, (shift, rec, r)) in rows.iter().enumerate() {
        let (sx, ss) = rec.as_ref().map(|q| (ct(q.sigma), q.survived.to_string())).unwrap_or(("NA".into(), "NA".into()));
        t.push(vec![i.to_string(), ct(*shift), sx, ss, ct(r.sigma), r.survived.to_string()]);
        if let Some(q) = rec {
            if let (true, Some(v)) = (q.survived, q.sigma.value()) {
                a.push(v);
            }
        }
        if let (true, Some(v)) = (r.survived, r.sigma.value()) {
            b.push(v);
        }
    }
    let (d, pk) = observables::ks_two_sample(&a, &b);
    let nonneg = a.iter().all(|v| *v >= 0.0);
    Ok(PresetOutput {
        tables: vec![t],
        checks: vec![
            Check::new("shifted_law", pk > p.ks_alpha && a.len() >= 20 && b.len() >= 20, format!("KS D = {d:.4}, p = {pk:.4}, samples {} vs {}", a.len(), b.len())),
            Check::new("shifted_nonnegative", nonneg, "s(x) >= 0"),
        ],
    })
}

// ---------------------------------------------------------------- bad growth

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BadGrowthCfg {
    pub x: Vec<i32>,
    pub t_grid: Vec<f64>,
    pub m: f64,
    pub c: f64,
    pub t_surv: f64,
    /// Counting period for `N_L`; omitted to skip the counter.
    pub l: Option<f64>,
}

impl Default for BadGrowthCfg {
    fn default() -> Self {
        BadGrowthCfg { x: vec![2], t_grid: vec![0.5, 1.0, 2.0], m: 3.0, c: 0.5, t_surv: 5.0, l: None }
    }
}

fn def_bad_growth() -> ExperimentConfig {
    base("bad_growth", Some(supercritical()), 1, 60, 1.0, 500, BadGrowthCfg::default())
}

fn run_bad_growth(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: BadGrowthCfg = params(cfg)?;
    let x = site(cfg.dim, &p.x)?;
    let bp = BadGrowthParams { m: p.m, c: p.c, t_surv: p.t_surv };
    let est = essential::bad_growth_probe(cfg.model()?, cfg.dim, cfg.radius, cfg.background, x, &p.t_grid, &bp, p.l, cfg.trials, cfg.seed).map_err(runtime)?;
    let names = ["no_recovery", "escapes", "late_death_zero", "late_death", "misses", "union", "n_l_positive"];
    let mut t = Table::new("bad_growth", &[("t", "time"), ("gamma", "-"), ("event", "-"), ("k", "count"), ("n", "count"), ("p", "probability"), ("lo", "probability"), ("hi", "probability")]);
    let mut union_ok = true;
    for e in &est {
        let all: Vec<Option<&Proportion>> = e.events.iter().map(Some).chain([Some(&e.union), e.n_l_positive.as_ref()]).collect();
        for (name, q) in names.iter().zip(all) {
            if let Some(q) = q {
                t.push(vec![num(e.t), num(e.gamma), name.to_string(), q.k.to_string(), q.n.to_string(), num(q.p), num(q.lo), num(q.hi)]);
            }
        }
        union_ok &= e.events.iter().all(|q| q.k <= e.union.k);
    }
    Ok(PresetOutput { tables: vec![t], checks: vec![Check::new("union_bound", union_ok, "union count >= each constituent")] })
}

// ---------------------------------------------------------------- finite space-time

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiniteParams {
    pub n: u32,
    pub l: u32,
    pub t: f64,
}

impl Default for FiniteParams {
    fn default() -> Self {
        FiniteParams { n: 1, l: 4, t: 3.0 }
    }
}

fn def_finite() -> ExperimentConfig {
    let (m, _) = block_model();
    base("finite_spacetime", Some(m), 1, 0, 1.0, 2_000, FiniteParams::default())
}

fn run_finite(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: FiniteParams = params(cfg)?;
    let r = percolation::probe_finite_spacetime(cfg.model()?, cfg.dim, p.n, p.l, p.t, cfg.trials, cfg.seed).map_err(runtime)?;
    let mut t = Table::new("finite_spacetime", &[("event", "-"), ("k", "count"), ("n", "count"), ("p", "probability"), ("lo", "probability"), ("hi", "probability")]);
    for (name, q) in [("E1", &r.e1), ("E1_reflected", &r.e1_reflected), ("E2", &r.e2), ("E3", &r.e3)] {
        t.push(vec![name.into(), q.k.to_string(), q.n.to_string(), num(q.p), num(q.lo), num(q.hi)]);
    }
    Ok(PresetOutput { tables: vec![t], checks: vec![Check::new("reflection_consistency", r.reflection_consistent(), format!("E1 {:.4} vs reflected {:.4}", r.e1.p, r.e1_reflected.p))] })
}

// ---------------------------------------------------------------- calibrate

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateParams {
    pub grid: Vec<MacroParams>,
    pub target: f64,
}

impl Default for CalibrateParams {
    fn default() -> Self {
        let grid = [(1, 3, 1.0), (1, 3, 1.5), (1, 4, 2.0), (2, 5, 2.0), (2, 6, 2.5)].iter().map(|&(n, a, b)| MacroParams { n, a, b }).collect();
        CalibrateParams { grid, target: 0.9 }
    }
}

fn def_calibrate() -> ExperimentConfig {
    let (m, _) = block_model();
    base("calibrate", Some(m), 1, 0, 1.0, 300, CalibrateParams::default())
}

/// Worst of the block-event probabilities over directions, for the central
/// start `(0, 0)` and the corner start `(-a, ..., -a)` at time `b`.
fn probe_all(model: &ModelSpec, dim: usize, mp: MacroParams, trials: u64, seed: u64) -> Result<Vec<(usize, &'static str, Proportion)>, HarnessError> {
    let corner = Site::new(&vec![-(mp.a as i32); dim]);
    let mut out = Vec::new();
    for dir in 0..2 * dim {
        for (label, x, s) in [("centre", Site::ORIGIN, 0.0), ("corner", corner, mp.b)] {
            let q = percolation::probe_block_event(model, dim, mp, dir, x, s, trials, derive_trial_seed(seed, (dir * 2 + (label == "corner") as usize) as u64)).map_err(runtime)?;
            out.push((dir, label, q));
        }
    }
    Ok(out)
}

fn run_calibrate(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: CalibrateParams = params(cfg)?;
    let mut t = Table::new("calibration", &[("n", "sites"), ("a", "sites"), ("b", "time"), ("direction", "index"), ("start", "-"), ("p", "probability"), ("lo", "probability"), ("hi", "probability")]);
    let mut best: Option<(MacroParams, f64)> = None;
    for (gi, mp) in p.grid.iter().enumerate() {
        mp.check().map_err(|e| HarnessError::Config(e.to_string()))?;
        let res = probe_all(cfg.model()?, cfg.dim, *mp, cfg.trials, derive_trial_seed(cfg.seed, gi as u64))?;
        let worst = res.iter().map(|r| r.2.p).fold(1.0, f64::min);
        for (dir, label, q) in res {
            t.push(vec![mp.n.to_string(), mp.a.to_string(), num(mp.b), dir.to_string(), label.into(), num(q.p), num(q.lo), num(q.hi)]);
        }
        if best.is_none_or(|b| worst > b.1) {
            best = Some((*mp, worst));
        }
    }
    let detail = best.map(|(mp, w)| format!("best (n, a, b) = ({}, {}, {}) with worst probe {w:.3}", mp.n, mp.a, mp.b)).unwrap_or_default();
    Ok(PresetOutput { tables: vec![t], checks: vec![Check::new("calibration_target", best.is_some_and(|b| b.1 >= p.target), detail)] })
}

// ---------------------------------------------------------------- block

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockParams {
    pub macro_params: MacroParams,
    pub levels: u32,
    /// Filler density of the macroscopic field.
    pub p: f64,
    pub probe_trials: u64,
    /// Density of the independent comparison field.
    pub g: f64,
    /// Check seed cubes against a logged reference run (slow).
    pub reference: bool,
}

impl Default for BlockParams {
    fn default() -> Self {
        BlockParams { macro_params: block_model().1, levels: 10, p: 0.9, probe_trials: 400, g: 0.9, reference: false }
    }
}

fn def_block() -> ExperimentConfig {
    base("block", Some(block_model().0), 1, 0, 1.0, 150, BlockParams::default())
}

fn run_block(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: BlockParams = params(cfg)?;
    let mp = p.macro_params;
    mp.check().map_err(|e| HarnessError::Config(e.to_string()))?;
    let model = cfg.model()?;
    let probes = probe_all(model, cfg.dim, mp, p.probe_trials, cfg.seed ^ 0xb10c)?;
    let mut pt = Table::new("block_probe", &[("direction", "index"), ("start", "-"), ("k", "count"), ("n", "count"), ("p", "probability"), ("lo", "probability"), ("hi", "probability")]);
    for (dir, label, q) in &probes {
        pt.push(vec![dir.to_string(), label.to_string(), q.k.to_string(), q.n.to_string(), num(q.p), num(q.lo), num(q.hi)]);
    }
    let worst = probes.iter().map(|r| r.2.p).fold(1.0, f64::min);
    let centre: Vec<&Proportion> = probes.iter().filter(|r| r.1 == "centre").map(|r| &r.2).collect();
    let probe_mean = centre.iter().map(|q| q.p).sum::<f64>() / centre.len() as f64;
    let probe_se = (probe_mean * (1.0 - probe_mean) / (p.probe_trials as f64 * centre.len() as f64)).sqrt();

    let radius = percolation::coupling_radius(&mp, p.levels, Site::ORIGIN, cfg.dim).max(cfg.radius);
    let sys = System::new(Window::new(cfg.dim, radius), model.clone()).map_err(runtime)?;
    let horizon = (5 * p.levels + 1) as f64 * mp.b;
    let rows = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<(percolation::BlockAudit, Option<u32>), HarnessError> {
            let s = derive_trial_seed(cfg.seed, trial);
            let st = EventStream::sample(&sys.catalog, horizon, s);
            let reference = if p.reference {
                let c = engine::CopyState::new("ref", 0.0, engine::eta_cube(&sys, Site::ORIGIN, mp.n as i32), engine::xi_const(&sys, 0));
                Some(engine::evolve(&sys, &st, vec![c], engine::RecordOpts::default(), horizon).map_err(runtime)?.copies.remove(0))
            } else {
                None
            };
            let bc = percolation::build_block_coupling(&sys, &st, MacroGeom { x0: Site::ORIGIN, t0: 0.0, params: mp }, p.levels, p.p, derive_trial_seed(s, 1), reference.as_ref()).map_err(runtime)?;
            Ok((bc.audit.clone(), bc.extinction_level()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut at = Table::new("block_audit", &[("trial", "index"), ("levels_tracked", "count"), ("tracked_edges", "count"), ("open_fraction", "fraction"), ("violations", "count"), ("extinction_level", "level")]);
    let mut total = percolation::BlockAudit::default();
    for (i, (a, ext)) in rows.iter().enumerate() {
        at.push(vec![i.to_string(), a.levels_tracked.to_string(), a.tracked_edges.to_string(), num(a.open_fraction()), a.violations.to_string(), ext.map(|e| e.to_string()).unwrap_or_else(|| "alive".into())]);
        total.merge(a);
    }
    let macro_alive = rows.iter().filter(|r| r.1.is_none()).count();
    let indep = runners::field_trials(cfg.dim, p.g, p.levels, p.levels, &[], 0.0, cfg.trials, cfg.seed ^ 0x9);
    let indep_alive = indep.iter().filter(|r| r.tau.is_none()).count();
    let mut cmp = Table::new("comparison", &[("field", "-"), ("density", "probability"), ("alive_at_last_level", "count"), ("trials", "count")]);
    cmp.push(vec!["block".into(), num(total.open_fraction()), macro_alive.to_string(), cfg.trials.to_string()]);
    cmp.push(vec!["independent".into(), num(p.g), indep_alive.to_string(), cfg.trials.to_string()]);
    Ok(PresetOutput {
        tables: vec![pt, at, cmp],
        checks: vec![
            Check::new("probe_target", worst >= p.p, format!("worst block-event probe {worst:.3} vs p = {}", p.p)),
            Check::new("implication", total.violations == 0, format!("{} violations over {} tracked levels, {} seed cubes checked", total.violations, total.levels_tracked, total.checked_seeds)),
            Check::new("open_frequency", total.open_fraction() >= probe_mean - 3.0 * probe_se, format!("open fraction {:.4} vs probe {:.4} (se {:.4})", total.open_fraction(), probe_mean, probe_se)),
        ],
    })
}

// ---------------------------------------------------------------- restart

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestartCfg {
    pub restart: RestartParams,
    pub alpha: f64,
    pub sigma_grid: Vec<f64>,
}

impl Default for RestartCfg {
    fn default() -> Self {
        RestartCfg {
            restart: RestartParams { macro_params: block_model().1, macro_levels: 10, p: 0.95, max_restarts: 1000 },
            alpha: 0.001,
            sigma_grid: (1..=14).map(f64::from).collect(),
        }
    }
}

fn def_restart() -> ExperimentConfig {
    base("restart", Some(block_model().0), 1, 120, 300.0, 300, RestartCfg::default())
}

fn run_restart(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: RestartCfg = params(cfg)?;
    let rows = essential::restart_trials(cfg.model()?, cfg.dim, cfg.radius, cfg.background, cfg.horizon, &p.restart, cfg.trials, cfg.seed).map_err(runtime)?;
    let mut t = Table::new("restart", &[("trial", "index"), ("L", "count"), ("sigma", "time"), ("Y", "site"), ("N", "steps"), ("M", "levels"), ("base_survived", "bool"), ("cube_ok", "bool"), ("censor", "-")]);
    for r in &rows {
        let rec = &r.record;
        let join = |f: &dyn Fn(&essential::RestartStep) -> String| rec.steps.iter().map(f).collect::<Vec<_>>().join(";");
        t.push(vec![
            r.trial.to_string(),
            rec.l.map(|l| l.to_string()).unwrap_or_else(|| "NA".into()),
            ct(rec.sigma),
            rec.y.map(|y| coords(y, cfg.dim)).unwrap_or_else(|| "NA".into()),
            join(&|s| s.n.to_string()),
            join(&|s| s.m.map(|m| m.to_string()).unwrap_or_else(|| "inf".into())),
            rec.base_survived.to_string(),
            rec.cube_ok.map(|c| c.to_string()).unwrap_or_else(|| "NA".into()),
            rec.censor.clone().unwrap_or_default(),
        ]);
    }
    let ls: Vec<u32> = rows.iter().filter_map(|r| r.record.l).collect();
    let gof = observables::geometric_gof(&ls);
    let cube_bad = rows.iter().filter(|r| r.record.cube_ok == Some(false)).count();
    let cube_checked = rows.iter().filter(|r| r.record.cube_ok.is_some()).count();
    let identity_bad = rows.iter().filter(|r| r.record.sigma.value().is_some_and(|s| r.record.sigma_from_parts(p.restart.macro_params.b).is_none_or(|q| (q - s).abs() > 1e-9))).count();
    let sig: Vec<f64> = rows.iter().filter_map(|r| r.record.sigma.value()).collect();
    let pts = tail_counts(&sig, &p.sigma_grid);
    let violations: u64 = rows.iter().map(|r| r.record.audit.violations).sum();
    Ok(PresetOutput {
        tables: vec![t, tail_table("sigma_tail", "t", &pts)],
        checks: vec![
            match gof {
                Some((stat, df, pv)) => Check::new("geometric_L", pv > p.alpha, format!("chi2 {stat:.3} df {df} p {pv:.4} over {} complete records", ls.len())),
                None => Check::new("geometric_L", false, format!("too few cells for a chi-square test ({} complete records)", ls.len())),
            },
            Check::new("seed_cube", cube_bad == 0 && cube_checked > 0, format!("{cube_bad} failures over {cube_checked} surviving runs")),
            Check::new("sigma_identity", identity_bad == 0, format!("{identity_bad} mismatches")),
            Check::new("block_implication", violations == 0, format!("{violations} violations")),
            slope_check("sigma_tail_slope", &pts),
        ],
    })
}

// ---------------------------------------------------------------- percolation

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PercolationParams {
    pub p: f64,
    pub levels: u32,
    pub tau_grid: Vec<u32>,
    pub slab_levels: Vec<u32>,
    /// Slab half-width as a fraction of the level.
    pub beta: f64,
    /// Shortfall means fewer than `threshold * capacity` sites.
    pub threshold: f64,
}

impl Default for PercolationParams {
    fn default() -> Self {
        PercolationParams { p: 0.95, levels: 60, tau_grid: vec![1, 2, 3, 4, 5], slab_levels: vec![4, 8, 12, 16, 20, 24], beta: 0.5, threshold: 0.8 }
    }
}

fn def_percolation() -> ExperimentConfig {
    base("percolation", None, 1, 0, 1.0, 10_000, PercolationParams::default())
}

fn run_percolation(cfg: &ExperimentConfig) -> Result<PresetOutput, HarnessError> {
    let p: PercolationParams = params(cfg)?;
    let radius = p.levels + 2;
    let rows = runners::field_trials(cfg.dim, p.p, p.levels, radius, &p.slab_levels, p.beta, cfg.trials, cfg.seed);
    let mut t = Table::new("percolation", &[("trial", "index"), ("tau", "level"), ("slab", "count")]);
    for r in &rows {
        t.push(vec![r.trial.to_string(), r.tau.map(|v| v.to_string()).unwrap_or_else(|| "alive".into()), r.slab.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")]);
    }
    let n = rows.len() as u64;
    // tail of tau on extinction: P(tau > k | tau < inf)
    let extinct = rows.iter().filter(|r| r.tau.is_some()).count() as u64;
    let tau_pts: Vec<(f64, u64, u64)> = p.tau_grid.iter().map(|&k| (k as f64, rows.iter().filter(|r| r.tau.is_some_and(|v| v > k)).count() as u64, extinct)).collect();
    let short_pts: Vec<(f64, u64, u64)> = p
        .slab_levels
        .iter()
        .enumerate()
        .map(|(i, &lv)| {
            let cap = runners::slab_capacity(lv, p.beta) as f64;
            (lv as f64, rows.iter().filter(|r| (r.slab[i] as f64) < p.threshold * cap).count() as u64, n)
        })
        .collect();
    Ok(PresetOutput {
        tables: vec![t, tail_table("tau_tail", "n", &tau_pts), tail_table("slab_shortfall", "n", &short_pts)],
        checks: vec![slope_sign_check("tau_tail_slope", &tau_pts), slope_sign_check("slab_shortfall_slope", &short_pts)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_has_a_valid_default() {
        for p in PRESETS {
            let c = default_config(p.name).unwrap();
            assert_eq!(c.preset, p.name);
            check_params(&c).unwrap();
        }
        assert!(find("nope").is_none());
    }

    #[test]
    fn unknown_params_are_rejected() {
        let mut c = default_config("tails").unwrap();
        c.params = serde_json::json!({"t_grd": [1.0]});
        assert!(check_params(&c).is_err());
    }

    #[test]
    fn shape_with_zero_trials_is_an_error() {
        let mut c = default_config("shape").unwrap();
        c.trials = 0;
        let e = run_shape(&c).unwrap_err();
        assert!(e.to_string().contains("≥10 surviving trials required"));
    }

    #[test]
    fn slab_capacity_counts_parity_sites() {
        assert_eq!(runners::slab_capacity(4, 0.5), 3);
        assert_eq!(runners::slab_capacity(3, 1.0), 4);
    }
}
