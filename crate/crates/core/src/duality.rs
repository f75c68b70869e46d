//! Mirrored-rate dual: pathwise duality on a fixed realization (events replayed
//! backwards with arrows flipped) and the stationary-start distributional check.

use crate::engine::{self, evolve, CopyState, RecordOpts};
use crate::graphical::{EventStream, MapKind, System};
use crate::lattice::Window;
use crate::model::{validate_model, BackgroundSpec, ModelError, ModelSpec, RateTable};
use crate::rng::{self, derive_trial_seed, Role};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DualityError {
    #[error("background is not reversible")]
    NotReversible,
    #[error("stream covers [0, {horizon}], dual needs [0, {t}]")]
    ShortStream { t: f64, horizon: f64 },
    #[error("spin background did not couple within burn-in {0}")]
    BurnIn(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `λ̌(i, j, k) = λ(k, j, i)`; recovery rates unchanged.
pub fn mirror_rates(rt: &RateTable) -> RateTable {
    RateTable::from_fn(rt.n, |i, j, k| rt.lambda(k, j, i), |i| rt.r[i])
}

/// Dual infection built on the events of one forward realization in `[0, t]`,
/// read backwards. Dual time `s` corresponds to forward time `t - s`.
#[derive(Clone, Debug)]
pub struct DualRun {
    pub t: f64,
    pub eta0: Vec<u8>,
    /// Final dual state at dual time `t`.
    pub eta: Vec<u8>,
    /// `(dual time, site, value)` changes.
    pub log: Vec<(f64, u32, u8)>,
}

impl DualRun {
    pub fn eta_at(&self, s: f64) -> Vec<u8> {
        let mut e = self.eta0.clone();
        for &(u, x, v) in &self.log {
            if u > s {
                break;
            }
            e[x as usize] = v;
        }
        e
    }
}

/// Usable flags of every infection/recovery event in `[0, t]` under the
/// background started from `xi0`. Background maps get `false`.
pub fn usable_flags(sys: &System, stream: &EventStream, xi0: &[u8], t: f64) -> Vec<bool> {
    let mut xi = xi0.to_vec();
    let end = stream.first_after(t);
    let mut flags = Vec::with_capacity(end);
    for i in 0..end {
        let m = &sys.catalog.maps[stream.maps[i] as usize];
        match m {
            MapKind::Inf { .. } | MapKind::Rec { .. } => flags.push(sys.usable(m, &xi)),
            _ => {
                sys.apply_bg(m, &mut xi);
                flags.push(false);
            }
        }
    }
    flags
}

/// Dual process from `eta_prime` at forward time `t`, against the background
/// trajectory from `xi0`.
pub fn dual_run(sys: &System, stream: &EventStream, t: f64, eta_prime: &[u8], xi0: &[u8]) -> Result<DualRun, DualityError> {
    if t > stream.horizon() + 1e-12 {
        return Err(DualityError::ShortStream { t, horizon: stream.horizon() });
    }
    let flags = usable_flags(sys, stream, xi0, t);
    let mut eta = eta_prime.to_vec();
    let mut log = Vec::new();
    for i in (0..flags.len()).rev() {
        if !flags[i] {
            continue;
        }
        let s = t - stream.times[i];
        match sys.catalog.maps[stream.maps[i] as usize] {
            MapKind::Inf { arrow, .. } => {
                let a = &sys.arrows[arrow as usize];
                if eta[a.to as usize] == 1 && eta[a.from as usize] == 0 {
                    eta[a.from as usize] = 1;
                    log.push((s, a.from, 1));
                }
            }
            MapKind::Rec { site, .. }
                if eta[site as usize] == 1 => {
                    eta[site as usize] = 0;
                    log.push((s, site, 0));
                }
            _ => {}
        }
    }
    Ok(DualRun { t, eta0: eta_prime.to_vec(), eta, log })
}

fn meets(a: &[u8], b: &[u8]) -> bool {
    a.iter().zip(b).any(|(x, y)| *x == 1 && *y == 1)
}

/// Indicators `(η_t^η ∩ η' ≠ ∅, η ∩ η̂_t^{η'} ≠ ∅)` on one realization.
pub fn conditional_duality_pair(sys: &System, stream: &EventStream, eta: &[u8], eta_prime: &[u8], xi0: &[u8], t: f64) -> Result<(bool, bool), DualityError> {
    let fwd = evolve(sys, stream, vec![CopyState::new("fwd", 0.0, eta.to_vec(), xi0.to_vec())], RecordOpts::quiet(), t)
        .map_err(|_| DualityError::ShortStream { t, horizon: stream.horizon() })?;
    let dual = dual_run(sys, stream, t, eta_prime, xi0)?;
    Ok((meets(&fwd.copies[0].eta, eta_prime), meets(eta, &dual.eta)))
}

pub fn conditional_duality_check(sys: &System, stream: &EventStream, eta: &[u8], eta_prime: &[u8], xi0: &[u8], t: f64) -> Result<bool, DualityError> {
    let (a, b) = conditional_duality_pair(sys, stream, eta, eta_prime, xi0, t)?;
    Ok(a == b)
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityStat {
    pub t: f64,
    pub p_fwd: f64,
    pub p_dual: f64,
    pub n_trials: u64,
    pub z: f64,
}

/// Two-proportion z statistic with pooled variance (0 when both are degenerate).
pub fn two_proportion_z(k1: u64, n1: u64, k2: u64, n2: u64) -> f64 {
    let p1 = k1 as f64 / n1 as f64;
    let p2 = k2 as f64 / n2 as f64;
    let p = (k1 + k2) as f64 / (n1 + n2) as f64;
    let se = (p * (1.0 - p) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    if se == 0.0 {
        return if p1 == p2 { 0.0 } else { f64::INFINITY };
    }
    (p1 - p2) / se
}

/// Stationary background sample. Exact for product backgrounds; spin systems
/// run the all-zero and all-one copies until they agree everywhere, doubling
/// the burn-in up to `max_burn`.
pub fn stationary_background(sys: &System, seed: u64, max_burn: f64) -> Result<Vec<u8>, DualityError> {
    let mut r = rng::stream(seed, Role::Background);
    if let Some(xi) = engine::xi_stationary(sys, &mut r) {
        return Ok(xi);
    }
    let mut burn = 4.0;
    let mut stream = EventStream::new(rng::mix64(seed ^ 0xb0b0));
    while burn <= max_burn {
        stream.extend_to(&sys.catalog, burn);
        let n = sys.n_sites();
        let opts = RecordOpts { infection_log: false, background_log: false, snapshot_dt: None, stop_when_extinct: false };
        let copies = vec![CopyState::new("lo", 0.0, vec![0; n], engine::xi_const(sys, 0)), CopyState::new("hi", 0.0, vec![0; n], engine::xi_const(sys, 1))];
        let tr = evolve(sys, &stream, copies, opts, burn).map_err(|_| DualityError::BurnIn(burn))?;
        if tr.copies[0].xi == tr.copies[1].xi {
            return Ok(tr.copies[0].xi.clone());
        }
        burn *= 2.0;
    }
    Err(DualityError::BurnIn(max_burn))
}

/// `P(η_t^{η,π} ∩ η' ≠ ∅)` against `P(η̌_t^{η',π} ∩ η ≠ ∅)` from independent
/// forward runs of the model and of its mirrored version. Refuses backgrounds
/// not known to be reversible unless `assume_reversible`.
#[allow(clippy::too_many_arguments)]
pub fn stationary_duality_check(
    model: &ModelSpec,
    window: &Window,
    eta: &[u8],
    eta_prime: &[u8],
    t: f64,
    trials: u64,
    seed: u64,
    assume_reversible: bool,
) -> Result<DualityStat, DualityError> {
    let diag = validate_model(model, window.dim())?;
    if !diag.reversible && !assume_reversible {
        return Err(DualityError::NotReversible);
    }
    let fwd = System::new(window.clone(), model.clone())?;
    let dual = System::new(window.clone(), model.mirrored())?;
    let hits = |sys: &System, start: &[u8], target: &[u8], side: u64| -> Result<u64, DualityError> {
        (0..trials)
            .into_par_iter()
            .map(|i| {
                let s = derive_trial_seed(seed.wrapping_add(side), i);
                let xi0 = stationary_background(sys, s, 4096.0)?;
                let stream = EventStream::sample(&sys.catalog, t, s);
                let tr = evolve(sys, &stream, vec![CopyState::new("x", 0.0, start.to_vec(), xi0)], RecordOpts::quiet(), t)
                    .map_err(|_| DualityError::ShortStream { t, horizon: stream.horizon() })?;
                Ok(meets(&tr.copies[0].eta, target) as u64)
            })
            .sum()
    };
    let k1 = hits(&fwd, eta, eta_prime, 0)?;
    let k2 = hits(&dual, eta_prime, eta, 0x5eed_0001)?;
    Ok(DualityStat { t, p_fwd: k1 as f64 / trials as f64, p_dual: k2 as f64 / trials as f64, n_trials: trials, z: two_proportion_z(k1, trials, k2, trials) })
}

/// True when `background` is one of the kinds with an exact stationary sampler.
pub fn exact_stationary(background: &BackgroundSpec) -> bool {
    !matches!(background, BackgroundSpec::SpinSystem { .. })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{eta_from_sites, xi_const};
    use crate::lattice::Site;
    use proptest::prelude::*;

    #[test]
    fn mirror_examples() {
        let sw = RateTable::switching([[0.5, 2.0], [1.0, 0.2]], [1.0, 1.0]);
        let m = mirror_rates(&sw);
        assert_eq!(m.lambda(1, 0, 0), sw.lambda(0, 0, 1));
        assert_eq!(m.lambda(0, 0, 1), 1.0);
        assert_eq!(m.lambda(1, 0, 0), 2.0);
        let sym = RateTable::edge_gated(2.0, 1.0);
        assert_eq!(mirror_rates(&sym).lambda, sym.lambda);
        assert_eq!(mirror_rates(&m).lambda, sw.lambda);
        assert_eq!(m.lambda_max(), sw.lambda_max());
    }

    #[test]
    fn dual_trivial_cases() {
        let sys = System::new(Window::new(1, 4), ModelSpec::basic(1.0, 1.0)).unwrap();
        let st = EventStream::sample(&sys.catalog, 3.0, 5);
        let xi = xi_const(&sys, 0);
        let empty = vec![0; sys.n_sites()];
        assert_eq!(dual_run(&sys, &st, 3.0, &empty, &xi).unwrap().eta, empty);
        let one = eta_from_sites(&sys, &[Site::ORIGIN]).unwrap();
        let d0 = dual_run(&sys, &st, 0.0, &one, &xi).unwrap();
        assert_eq!(d0.eta, one);
        assert!(dual_run(&sys, &st, 4.0, &one, &xi).is_err());
    }

    #[test]
    fn no_infection_no_recovery_keeps_both_indicators() {
        let sys = System::new(Window::new(1, 2), ModelSpec::basic(0.0, 0.0)).unwrap();
        let st = EventStream::sample(&sys.catalog, 2.0, 1);
        let one = eta_from_sites(&sys, &[Site::ORIGIN]).unwrap();
        assert_eq!(conditional_duality_pair(&sys, &st, &one, &one, &xi_const(&sys, 0), 2.0).unwrap(), (true, true));
    }

    #[test]
    fn full_target_is_survival() {
        let sys = System::new(Window::new(1, 5), ModelSpec::dynamical_graph(2.0, 1.0, 1.0, 1.0)).unwrap();
        let all = engine::eta_all(&sys);
        for seed in 0..200 {
            let st = EventStream::sample(&sys.catalog, 2.0, seed);
            let one = eta_from_sites(&sys, &[Site::ORIGIN]).unwrap();
            let xi = xi_const(&sys, 1);
            let fwd = evolve(&sys, &st, vec![CopyState::new("a", 0.0, one.clone(), xi.clone())], RecordOpts::quiet(), 2.0).unwrap();
            let (a, b) = conditional_duality_pair(&sys, &st, &one, &all, &xi, 2.0).unwrap();
            assert_eq!(a, fwd.copies[0].n_infected > 0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn isolated_site_closed_form() {
        // λ = 0: both sides are P(no recovery by t) = e^{-r t} when η = η' = {0}.
        let w = Window::new(1, 0);
        let one = vec![1u8];
        let st = stationary_duality_check(&ModelSpec::basic(0.0, 1.0), &w, &one, &one, 0.7, 20000, 3, false).unwrap();
        let p = (-0.7f64).exp();
        let sd = (p * (1.0 - p) / 20000.0).sqrt();
        assert!((st.p_fwd - p).abs() < 4.0 * sd && (st.p_dual - p).abs() < 4.0 * sd, "{st:?}");
        let z0 = stationary_duality_check(&ModelSpec::basic(1.0, 1.0), &Window::new(1, 2), &[0, 0, 1, 0, 0], &[0, 0, 1, 0, 0], 0.0, 100, 3, false).unwrap();
        assert_eq!((z0.p_fwd, z0.p_dual, z0.z), (1.0, 1.0, 0.0));
    }

    #[test]
    fn spin_background_is_refused_unless_assumed() {
        let spin = crate::model::SpinRates::constant(1.0, 1.0, 1.0, 1.0, 1, 1);
        let m = ModelSpec::new(RateTable::edge_gated(1.0, 1.0), BackgroundSpec::SpinSystem { range: 1, rates: spin });
        let w = Window::new(1, 3);
        let e = vec![0, 0, 0, 1, 0, 0, 0];
        assert!(matches!(stationary_duality_check(&m, &w, &e, &e, 1.0, 10, 1, false), Err(DualityError::NotReversible)));
        let s = stationary_duality_check(&m, &w, &e, &e, 1.0, 200, 1, true).unwrap();
        assert!(s.z.abs() < 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pathwise_duality(seed in 0u64..10_000, a in 0u8..32, b in 0u8..32, t in 0.1f64..3.0) {
            let model = ModelSpec::new(RateTable::switching([[0.5, 2.5], [1.0, 0.3]], [1.0, 0.4]), BackgroundSpec::cpdp(0.8, 1.1, 1.0, 1.0));
            let sys = System::new(Window::new(1, 2), model).unwrap();
            let st = EventStream::sample(&sys.catalog, t, seed);
            let bits = |m: u8| (0..5).map(|i| (m >> i) & 1).collect::<Vec<u8>>();
            let mut r = rng::stream(seed, Role::Aux);
            let xi0 = engine::xi_stationary(&sys, &mut r).unwrap();
            prop_assert!(conditional_duality_check(&sys, &st, &bits(a), &bits(b), &xi0, t).unwrap());
        }
    }
}
