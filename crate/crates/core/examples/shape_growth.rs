//! Hitting times along e1 and the time constant from surviving runs.
use cpdre::engine::BackgroundInit;
use cpdre::harness::{presets, runners};
use cpdre::lattice::Site;
use cpdre::observables::shape_estimate;

fn main() {
    let rays = [Site::axis(0, 1), Site::axis(0, -1)];
    let radii = [5, 10, 20];
    let rows = runners::growth_trials(&presets::supercritical(), 1, 25, BackgroundInit::Zero, 150.0, &rays, &radii, 48.0, &[1.0, 4.0], 200, 6).unwrap();
    let recs: Vec<_> = rows.iter().map(|r| r.hits.clone()).collect();
    let est = shape_estimate(&recs, &rays, &radii, 1, 6).unwrap();
    println!("{} of {} runs survived", est.surviving, est.total);
    for r in &est.rays {
        println!("ray {:?}: mu = {:.3} [{:.3}, {:.3}] at n = {}", r.ray, r.mu_hat, r.ci_lo, r.ci_hi, r.n);
    }
}
