//! Late extinctions P(t < tau < inf) for a supercritical dynamical-graph model.
use cpdre::engine::BackgroundInit;
use cpdre::harness::{presets, runners};
use cpdre::observables::log_tail_fit;

fn main() {
    let rows = runners::extinction_trials(&presets::supercritical(), 1, 60, BackgroundInit::Zero, 30.0, 2_000, 5).unwrap();
    let grid: Vec<f64> = (1..=8).map(|i| 2.0 * i as f64).collect();
    let pts = runners::late_extinction_counts(&rows, &grid);
    for (t, k, n) in &pts {
        println!("t = {t:>4}: {k:>4} / {n}");
    }
    if let Some(f) = log_tail_fit(&pts) {
        println!("log-slope {:.3} [{:.3}, {:.3}]", f.slope, f.ci_lo, f.ci_hi);
    }
}
